//! Supervised losses: masked cross-entropy, the keyword attention loss, the
//! weighted joint loss, and the rarity-based keyword extractor that feeds the
//! attention targets.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{log_softmax, Tape, Var};
use crate::model::{AttentionMap, TokenId, Vocab};
use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("supervision mask selects no tokens")]
    EmptyMask,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite loss component: {0}")]
    NonFinite(&'static str),
    #[error("invalid loss weights: {0}")]
    InvalidWeights(String),
}

/// Mean of `−log softmax(logits[t])[targets[t]]` over rows with `mask[t]`.
pub fn generation_loss(
    logits: &Tensor,
    targets: &[TokenId],
    mask: &[bool],
) -> Result<f64, ObjectiveError> {
    check_rows(logits.rows(), targets.len(), mask.len())?;
    let mut total = 0.0;
    let mut n = 0usize;
    for t in (0..targets.len()).filter(|&t| mask[t]) {
        total -= log_softmax(logits.row(t))[targets[t] as usize];
        n += 1;
    }
    if n == 0 {
        return Err(ObjectiveError::EmptyMask);
    }
    Ok(total / n as f64)
}

/// Tape version of [`generation_loss`].
pub fn generation_loss_on_tape(
    tape: &mut Tape<'_>,
    logits: Var,
    targets: &[TokenId],
    mask: &[bool],
) -> Result<Var, ObjectiveError> {
    check_rows(tape.value(logits).rows(), targets.len(), mask.len())?;
    let rows: Vec<usize> = (0..targets.len()).filter(|&t| mask[t]).collect();
    if rows.is_empty() {
        return Err(ObjectiveError::EmptyMask);
    }
    let picked: Vec<usize> = rows.iter().map(|&t| targets[t] as usize).collect();
    let sel = tape.gather_rows(logits, &rows);
    let lp = tape.log_softmax_pick(sel, &picked);
    let total = tape.sum(lp);
    Ok(tape.scale(total, -1.0 / rows.len() as f64))
}

fn check_rows(rows: usize, targets: usize, mask: usize) -> Result<(), ObjectiveError> {
    if targets != rows {
        return Err(ObjectiveError::DimensionMismatch {
            expected: rows,
            got: targets,
        });
    }
    if mask != rows {
        return Err(ObjectiveError::DimensionMismatch {
            expected: rows,
            got: mask,
        });
    }
    Ok(())
}

/// Token counts over a corpus of encoded sequences.
pub fn frequency_table<'a, I>(sequences: I) -> HashMap<TokenId, u64>
where
    I: IntoIterator<Item = &'a [TokenId]>,
{
    let mut freq = HashMap::new();
    for seq in sequences {
        for &id in seq {
            *freq.entry(id).or_insert(0) += 1;
        }
    }
    freq
}

/// Special tokens plus every whitespace or punctuation character.
pub fn default_stop_set(vocab: &Vocab) -> HashSet<TokenId> {
    (0..vocab.len() as TokenId)
        .filter(|&id| {
            vocab.is_special(id)
                || vocab
                    .symbol(id)
                    .chars()
                    .all(|c| c.is_whitespace() || !c.is_alphanumeric())
        })
        .collect()
}

/// Positions of the `max(1, ⌈k_fraction·len⌉)` rarest non-stop tokens,
/// earliest position first among equal frequencies. Unseen tokens count as
/// frequency 0. When every token is a stop token, position 0 is returned.
pub fn extract_keywords(
    response: &[TokenId],
    freq: &HashMap<TokenId, u64>,
    k_fraction: f64,
    stop: &HashSet<TokenId>,
) -> BTreeSet<usize> {
    if response.is_empty() {
        return BTreeSet::new();
    }
    let mut candidates: Vec<(u64, usize)> = response
        .iter()
        .enumerate()
        .filter(|(_, id)| !stop.contains(id))
        .map(|(pos, id)| (freq.get(id).copied().unwrap_or(0), pos))
        .collect();
    if candidates.is_empty() {
        return BTreeSet::from([0]);
    }
    candidates.sort_unstable();
    let k = ((k_fraction * response.len() as f64).ceil() as usize).max(1);
    candidates.into_iter().take(k).map(|(_, pos)| pos).collect()
}

/// Target attention distribution over a supervised sequence of length `M`.
#[derive(Clone, Debug, PartialEq)]
pub struct KeywordTargets {
    pub positions: BTreeSet<usize>,
    pub eta: Vec<f64>,
    pub kappa: f64,
}

impl KeywordTargets {
    pub fn new(positions: BTreeSet<usize>, len: usize, kappa: f64) -> Result<Self, ObjectiveError> {
        let mut eta = vec![0.0; len];
        if let Some(&bad) = positions.iter().find(|&&p| p >= len) {
            return Err(ObjectiveError::DimensionMismatch {
                expected: len,
                got: bad + 1,
            });
        }
        for &p in &positions {
            eta[p] = 1.0 / positions.len() as f64;
        }
        Ok(Self {
            positions,
            eta,
            kappa,
        })
    }

    pub fn len(&self) -> usize {
        self.eta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eta.is_empty()
    }

    /// Saliency weights `exp(κ·η_j)`.
    pub fn lambda(&self) -> Vec<f64> {
        self.eta.iter().map(|e| (self.kappa * e).exp()).collect()
    }
}

/// Final-layer attention averaged over heads and over `query_rows`,
/// restricted to key columns `key_offset..key_offset + len`.
pub fn attention_mass(
    attn: &AttentionMap,
    query_rows: &[usize],
    key_offset: usize,
    len: usize,
) -> Vec<f64> {
    let heads = attn.final_layer();
    let mut a = vec![0.0; len];
    if heads.is_empty() || query_rows.is_empty() {
        return a;
    }
    for h in heads {
        for &q in query_rows {
            for (j, v) in a.iter_mut().enumerate() {
                *v += h.get(q, key_offset + j);
            }
        }
    }
    let denom = (heads.len() * query_rows.len()) as f64;
    a.iter_mut().for_each(|v| *v /= denom);
    a
}

/// `(1/M)·Σ_j exp(κ·η_j)·(a_j − η_j)²`.
pub fn csfal(a: &[f64], targets: &KeywordTargets) -> Result<f64, ObjectiveError> {
    if a.len() != targets.len() {
        return Err(ObjectiveError::DimensionMismatch {
            expected: targets.len(),
            got: a.len(),
        });
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = a
        .iter()
        .zip(&targets.eta)
        .zip(targets.lambda())
        .map(|((a, e), l)| l * (a - e) * (a - e))
        .sum();
    Ok(total / a.len() as f64)
}

/// Tape version of [`attention_mass`] followed by [`csfal`]. `final_heads`
/// are the final-layer attention nodes.
pub fn csfal_on_tape(
    tape: &mut Tape<'_>,
    final_heads: &[Var],
    query_rows: &[usize],
    key_offset: usize,
    targets: &KeywordTargets,
) -> Result<Var, ObjectiveError> {
    let m = targets.len();
    let first = final_heads.first().ok_or(ObjectiveError::DimensionMismatch {
        expected: 1,
        got: 0,
    })?;
    let cols = tape.value(*first).cols();
    if key_offset + m > cols {
        return Err(ObjectiveError::DimensionMismatch {
            expected: cols - key_offset.min(cols),
            got: m,
        });
    }
    if query_rows.is_empty() {
        return Err(ObjectiveError::EmptyMask);
    }
    let mut acc: Option<Var> = None;
    for &h in final_heads {
        let rows = tape.gather_rows(h, query_rows);
        let s = tape.sum_rows(rows);
        acc = Some(match acc {
            Some(prev) => tape.add(prev, s),
            None => s,
        });
    }
    let mean = tape.scale(
        acc.expect("non-empty heads"),
        1.0 / (final_heads.len() * query_rows.len()) as f64,
    );
    let a = tape.slice_cols(mean, key_offset, m);
    let eta = tape.constant(Tensor::row_vector(targets.eta.clone()));
    let diff = tape.sub(a, eta);
    let sq = tape.mul(diff, diff);
    let lambda = tape.constant(Tensor::row_vector(targets.lambda()));
    let weighted = tape.mul(sq, lambda);
    let total = tape.sum(weighted);
    Ok(tape.scale(total, 1.0 / m as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SFTLossWeights {
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
}

impl Default for SFTLossWeights {
    fn default() -> Self {
        Self {
            gamma1: 1.0,
            gamma2: 0.5,
            gamma3: 0.1,
        }
    }
}

impl SFTLossWeights {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        let g = [self.gamma1, self.gamma2, self.gamma3];
        if g.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(ObjectiveError::InvalidWeights(format!(
                "weights must be finite and non-negative, got {g:?}"
            )));
        }
        if g.iter().all(|v| *v == 0.0) {
            return Err(ObjectiveError::InvalidWeights("all weights are zero".into()));
        }
        Ok(())
    }
}

/// `γ1·l_gen + γ2·l_csfal + γ3·l_smooth`.
pub fn sft_loss(
    l_gen: f64,
    l_csfal: f64,
    l_smooth: f64,
    w: &SFTLossWeights,
) -> Result<f64, ObjectiveError> {
    for (v, name) in [(l_gen, "l_gen"), (l_csfal, "l_csfal"), (l_smooth, "l_smooth")] {
        if !v.is_finite() {
            return Err(ObjectiveError::NonFinite(name));
        }
    }
    Ok(w.gamma1 * l_gen + w.gamma2 * l_csfal + w.gamma3 * l_smooth)
}

/// Tape version of [`sft_loss`]; absent components contribute nothing.
pub fn sft_loss_on_tape(
    tape: &mut Tape<'_>,
    l_gen: Var,
    l_csfal: Option<Var>,
    l_smooth: Option<Var>,
    w: &SFTLossWeights,
) -> Var {
    let mut total = tape.scale(l_gen, w.gamma1);
    for (v, g) in [(l_csfal, w.gamma2), (l_smooth, w.gamma3)] {
        if let Some(v) = v {
            let term = tape.scale(v, g);
            total = tape.add(total, term);
        }
    }
    total
}

/// One line of the per-step loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub l_gen: f64,
    pub l_csfal: f64,
    pub l_smooth: f64,
    pub l_total: f64,
}

impl LossRecord {
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", serde_json::to_string(self).map_err(std::io::Error::other)?)
    }
}
