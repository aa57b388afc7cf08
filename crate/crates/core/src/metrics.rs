//! Automatic evaluation metrics over token sequences, and corpus-level
//! evaluation of a response generator.

use std::collections::HashMap;
use std::hash::Hash;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Session, SpeakerRole, Utterance};
use crate::model::{derive_seed, TokenId, Vocab};
use crate::tensor::Tensor;

fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F1. Empty input scores 0.
pub fn rouge_l<T: PartialEq>(hyp: &[T], reference: &[T]) -> f64 {
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(hyp, reference) as f64;
    let p = lcs / hyp.len() as f64;
    let r = lcs / reference.len() as f64;
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for g in tokens.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence-level BLEU over orders `1..=n` with brevity penalty. With
/// `smoothing`, an order whose clipped match count is zero uses
/// `1 / (total + 1)` as its precision.
pub fn bleu_n<T: Eq + Hash>(hyp: &[T], reference: &[T], n: usize, smoothing: bool) -> f64 {
    assert!((1..=4).contains(&n), "BLEU order must be in 1..=4");
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let h = ngram_counts(hyp, k);
        let r = ngram_counts(reference, k);
        let total = hyp.len().saturating_sub(k - 1);
        let matched: usize = h
            .iter()
            .map(|(g, c)| (*c).min(r.get(g).copied().unwrap_or(0)))
            .sum();
        let p = if matched > 0 {
            matched as f64 / total as f64
        } else if smoothing {
            1.0 / (total as f64 + 1.0)
        } else {
            return 0.0;
        };
        log_sum += p.ln();
    }
    let bp = (1.0 - reference.len() as f64 / hyp.len() as f64).exp().min(1.0);
    bp * (log_sum / n as f64).exp()
}

/// Unique n-grams over total n-grams, pooled across `texts`.
pub fn distinct_n<T: Eq + Hash, S: AsRef<[T]>>(texts: &[S], n: usize) -> f64 {
    assert!(n >= 1, "n must be positive");
    let mut seen = std::collections::HashSet::new();
    let mut total = 0usize;
    for t in texts {
        let t = t.as_ref();
        if t.len() >= n {
            for g in t.windows(n) {
                seen.insert(g);
                total += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        seen.len() as f64 / total as f64
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Greedy-matching F1 on clamped cosine similarity between rows of
/// `embeddings` indexed by token id.
pub fn semantic_similarity(hyp: &[TokenId], reference: &[TokenId], embeddings: &Tensor) -> f64 {
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let sim: Vec<Vec<f64>> = hyp
        .iter()
        .map(|&h| {
            reference
                .iter()
                .map(|&r| {
                    cosine(embeddings.row(h as usize), embeddings.row(r as usize)).clamp(0.0, 1.0)
                })
                .collect()
        })
        .collect();
    let p = sim
        .iter()
        .map(|row| row.iter().cloned().fold(0.0, f64::max))
        .sum::<f64>()
        / hyp.len() as f64;
    let r = (0..reference.len())
        .map(|j| sim.iter().map(|row| row[j]).fold(0.0, f64::max))
        .sum::<f64>()
        / reference.len() as f64;
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rouge_l: f64,
    pub bleu2: f64,
    pub bleu4: f64,
    pub semantic: f64,
    pub distinct2: f64,
    pub n_examples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleDetail {
    pub session: String,
    pub turn: u32,
    pub reference: String,
    pub generated: String,
    pub rouge_l: f64,
    pub bleu2: f64,
    pub bleu4: f64,
    pub semantic: f64,
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("test corpus has no assistant turns")]
    EmptyCorpus,
    #[error("generation failed: {0}")]
    Generator(String),
}

/// Produces the assistant reply for `session.utterances[turn_index]` given
/// the utterances before it.
pub trait ResponseGenerator: Sync {
    fn respond(&self, session: &Session, turn_index: usize, seed: u64) -> Result<String, String>;
}

/// Token ids used for scoring: special tokens removed, surrounding
/// whitespace trimmed.
pub fn scoring_tokens(text: &str, vocab: &Vocab) -> Vec<TokenId> {
    scoring_ids(&vocab.encode(text), vocab)
}

/// [`scoring_tokens`] for already-encoded ids.
pub fn scoring_ids(ids: &[TokenId], vocab: &Vocab) -> Vec<TokenId> {
    let ids = vocab.strip_special(ids);
    let blank = |id: &TokenId| vocab.symbol(*id).chars().all(char::is_whitespace);
    let start = ids.iter().position(|i| !blank(i)).unwrap_or(ids.len());
    let end = ids.iter().rposition(|i| !blank(i)).map_or(start, |e| e + 1);
    ids[start..end].to_vec()
}

/// Scores one generated text against a reference, both given as text.
pub fn score_pair(generated: &str, reference: &str, vocab: &Vocab, emb: &Tensor) -> [f64; 4] {
    let h = scoring_tokens(generated, vocab);
    let r = scoring_tokens(reference, vocab);
    [
        rouge_l(&h, &r),
        bleu_n(&h, &r, 2, false),
        bleu_n(&h, &r, 4, false),
        semantic_similarity(&h, &r, emb),
    ]
}

/// Generates a reply for every assistant turn of every session (after the
/// first utterance) and averages sentence-level scores. Distinct-2 is
/// computed over the pooled generations.
pub fn evaluate_corpus<G: ResponseGenerator>(
    generator: &G,
    corpus: &[Session],
    vocab: &Vocab,
    embeddings: &Tensor,
    seed: u64,
) -> Result<(MetricReport, Vec<ExampleDetail>), MetricsError> {
    let jobs: Vec<(usize, usize)> = corpus
        .iter()
        .enumerate()
        .flat_map(|(si, s)| {
            s.utterances
                .iter()
                .enumerate()
                .filter(|(ti, u)| *ti > 0 && u.speaker == SpeakerRole::Assistant)
                .map(move |(ti, _)| (si, ti))
        })
        .collect();
    if jobs.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }

    let outputs: Vec<Result<String, String>> = jobs
        .par_iter()
        .map(|&(si, ti)| generator.respond(&corpus[si], ti, derive_seed(seed, &[si as u64, ti as u64])))
        .collect();

    let mut details = Vec::with_capacity(jobs.len());
    let mut pooled = Vec::with_capacity(jobs.len());
    let mut sums = [0.0; 4];
    for (&(si, ti), out) in jobs.iter().zip(outputs) {
        let generated = out.map_err(MetricsError::Generator)?;
        let u: &Utterance = &corpus[si].utterances[ti];
        let scores = score_pair(&generated, &u.text, vocab, embeddings);
        for (s, v) in sums.iter_mut().zip(scores) {
            *s += v;
        }
        pooled.push(scoring_tokens(&generated, vocab));
        details.push(ExampleDetail {
            session: corpus[si].id.clone(),
            turn: u.turn,
            reference: u.text.clone(),
            generated,
            rouge_l: scores[0],
            bleu2: scores[1],
            bleu4: scores[2],
            semantic: scores[3],
        });
    }
    let n = details.len() as f64;
    let report = MetricReport {
        rouge_l: sums[0] / n,
        bleu2: sums[1] / n,
        bleu4: sums[2] / n,
        semantic: sums[3] / n,
        distinct2: distinct_n(&pooled, 2),
        n_examples: details.len(),
    };
    Ok((report, details))
}

pub fn write_details<W: Write>(mut w: W, details: &[ExampleDetail]) -> std::io::Result<()> {
    for d in details {
        writeln!(w, "{}", serde_json::to_string(d).map_err(std::io::Error::other)?)?;
    }
    Ok(())
}
