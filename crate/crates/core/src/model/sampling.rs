//! Temperature + nucleus (top-p) sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::ModelParams;
use super::transformer::forward;
use super::vocab::TokenId;
use super::ModelError;

/// Below this temperature sampling degenerates to argmax.
pub const GREEDY_TEMPERATURE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub max_new: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            temperature: 0.6,
            top_p: 0.95,
            max_new: 64,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent RNG stream seed for a tuple such as `(step, candidate)`.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Softmax of `logits / temperature`.
pub fn tempered_probs(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .iter()
        .map(|l| ((l - max) / temperature).exp())
        .collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Smallest probability-sorted prefix whose mass reaches `top_p`,
/// renormalized. Ties keep the lower token id first.
pub fn nucleus(probs: &[f64], top_p: f64) -> Vec<(usize, f64)> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for i in order {
        kept.push(i);
        mass += probs[i];
        if mass >= top_p {
            break;
        }
    }
    let total: f64 = kept.iter().map(|&i| probs[i]).sum();
    kept.into_iter().map(|i| (i, probs[i] / total)).collect()
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Draws one token id from `logits`.
pub fn sample_token<R: Rng + ?Sized>(
    logits: &[f64],
    temperature: f64,
    top_p: f64,
    rng: &mut R,
) -> usize {
    if temperature < GREEDY_TEMPERATURE {
        return argmax(logits);
    }
    let probs = tempered_probs(logits, temperature);
    let kept = nucleus(&probs, top_p);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for &(i, p) in &kept {
        acc += p;
        if u < acc {
            return i;
        }
    }
    kept.last().map(|&(i, _)| i).unwrap_or(0)
}

/// Autoregressive generation after `context`; stops after emitting
/// `stop_id` or `max_new` tokens. The context is left-truncated when the
/// window would overflow `max_seq`. Deterministic in `(params, context,
/// soft_prompt, settings, seed)`.
pub fn sample_response(
    params: &ModelParams,
    context: &[TokenId],
    soft_prompt: Option<&[f64]>,
    settings: &SamplingConfig,
    stop_id: TokenId,
    seed: u64,
) -> Result<Vec<TokenId>, ModelError> {
    if context.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let window = params.config.max_seq - usize::from(soft_prompt.is_some());
    let mut ids = context.to_vec();
    let mut out = Vec::new();
    for _ in 0..settings.max_new {
        let start = ids.len().saturating_sub(window);
        let (logits, _) = forward(params, &ids[start..], soft_prompt)?;
        let last = logits.row(logits.rows() - 1);
        let next = sample_token(last, settings.temperature, settings.top_p, &mut rng) as TokenId;
        out.push(next);
        ids.push(next);
        if next == stop_id {
            break;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::{init_model, ModelConfig};

    #[test]
    fn nucleus_example() {
        let kept = nucleus(&[0.5, 0.3, 0.15, 0.05], 0.7);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].0, 0);
        assert_eq!(kept[1].0, 1);
        assert!((kept[0].1 - 0.625).abs() < 1e-12);
        assert!((kept[1].1 - 0.375).abs() < 1e-12);
    }

    #[test]
    fn full_nucleus_is_identity() {
        let probs = tempered_probs(&[1.0, 2.0, 0.5], 1.0);
        let mut kept = nucleus(&probs, 1.0);
        kept.sort_by_key(|k| k.0);
        for (k, p) in kept.iter().zip(&probs) {
            assert!((k.1 - p).abs() < 1e-12);
        }
    }

    #[test]
    fn unfiltered_sampling_frequencies() {
        let logits = [0.0, (2.0f64).ln(), (3.0f64).ln()];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = [0usize; 3];
        let n = 60_000;
        for _ in 0..n {
            counts[sample_token(&logits, 1.0, 1.0, &mut rng)] += 1;
        }
        for (c, want) in counts.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((*c as f64 / n as f64 - want).abs() < 0.01);
        }
    }

    #[test]
    fn tiny_temperature_is_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            assert_eq!(sample_token(&[0.1, 3.0, 2.9], 1e-9, 0.95, &mut rng), 1);
        }
    }

    #[test]
    fn derived_seeds_differ() {
        let a = derive_seed(1, &[0, 0]);
        assert_eq!(a, derive_seed(1, &[0, 0]));
        assert_ne!(a, derive_seed(1, &[0, 1]));
        assert_ne!(a, derive_seed(1, &[1, 0]));
        assert_ne!(a, derive_seed(2, &[0, 0]));
    }

    #[test]
    fn default_sampling_settings() {
        let s = SamplingConfig::default();
        assert_eq!(s.temperature, 0.6);
        assert_eq!(s.top_p, 0.95);
    }

    #[test]
    fn generation_is_deterministic() {
        let p = init_model(&ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_seq: 12,
            vocab_size: 7,
            init_seed: 2,
        })
        .unwrap();
        let s = SamplingConfig {
            temperature: 1.0,
            top_p: 1.0,
            max_new: 20,
        };
        let a = sample_response(&p, &[1, 2], None, &s, 99, 5).unwrap();
        let b = sample_response(&p, &[1, 2], None, &s, 99, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 20);
        let c = sample_response(&p, &[1, 2], Some(&[0.0; 8]), &s, 3, 5).unwrap();
        assert!(c.len() <= 20);
        if c.len() < 20 {
            assert_eq!(*c.last().unwrap(), 3);
        }
    }
}
