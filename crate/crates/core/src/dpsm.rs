//! Dynamic participant state modeling.
//!
//! Each elder in a session is summarized by a [`ParticipantState`] (speaker
//! slot, cognitive score, recent engagement, and the mean embedding of what
//! they have said). A small generator network maps the featurized state to a
//! soft prompt in `(−1, 1)^d_model`, which the dialogue model reads as a
//! virtual token at position 0:
//!
//! ```text
//! L1     = GELU(x·W1 + b1)
//! L2     = GELU(softmax((L1·Wq)(L1·Wk)ᵀ / √d_k) · (L1·Wv) · W2 + b2)
//! P_soft = tanh(L2·W_out + b_out)
//! ```
//!
//! `L1` is a single row, so the attention softmax is over a `1 × 1` score
//! matrix and always equals 1. The block is still evaluated as written.
//!
//! Consecutive prompts for the same participant are tied together with the
//! squared-distance smoothness penalty [`smoothness_loss`].

use std::collections::BTreeMap;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Tape, Var};
use crate::corpus::{Session, SpeakerRole};
use crate::model::{ParamRef, Parameters, Vocab};
use crate::tensor::Tensor;

pub const ENGAGEMENT_WINDOW: usize = 8;

#[derive(Debug, Error, PartialEq)]
pub enum DpsmError {
    #[error("speaker {speaker} outside 1..={max_humans}")]
    IndexOutOfRange { speaker: String, max_humans: u32 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpsmConfig {
    /// Width of the one-hot speaker slot.
    pub max_humans: u32,
    pub hidden1: usize,
    pub hidden2: usize,
    pub window: usize,
    /// Per-human cognitive score in `[0, 1]`, indexed by `human − 1`;
    /// missing entries fall back to `default_cognitive_score`.
    pub cognitive_scores: Vec<f64>,
    pub default_cognitive_score: f64,
    pub init_seed: u64,
}

impl Default for DpsmConfig {
    fn default() -> Self {
        Self {
            max_humans: 9,
            hidden1: 512,
            hidden2: 256,
            window: ENGAGEMENT_WINDOW,
            cognitive_scores: Vec::new(),
            default_cognitive_score: 0.5,
            init_seed: 17,
        }
    }
}

impl DpsmConfig {
    pub fn input_dim(&self, d_model: usize) -> usize {
        self.max_humans as usize + 2 + d_model
    }

    pub fn cognitive_score(&self, human: u32) -> f64 {
        self.cognitive_scores
            .get(human as usize - 1)
            .copied()
            .unwrap_or(self.default_cognitive_score)
            .clamp(0.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParticipantState {
    pub speaker: SpeakerRole,
    pub cognitive_score: f64,
    pub engagement: f64,
    pub history_vector: Vec<f64>,
}

impl ParticipantState {
    pub fn new(speaker: SpeakerRole, cognitive_score: f64, d_model: usize) -> Self {
        Self {
            speaker,
            cognitive_score,
            engagement: 0.0,
            history_vector: vec![0.0; d_model],
        }
    }
}

/// `[one-hot(max_humans) ‖ cognitive_score ‖ engagement ‖ history_vector]`.
pub fn featurize(state: &ParticipantState, max_humans: u32) -> Result<Vec<f64>, DpsmError> {
    let idx = match state.speaker {
        SpeakerRole::Human(i) if i >= 1 && i <= max_humans => i as usize,
        other => {
            return Err(DpsmError::IndexOutOfRange {
                speaker: other.token(),
                max_humans,
            })
        }
    };
    let mut x = vec![0.0; max_humans as usize];
    x[idx - 1] = 1.0;
    x.push(state.cognitive_score);
    x.push(state.engagement);
    x.extend_from_slice(&state.history_vector);
    Ok(x)
}

/// Recomputes engagement (share of the trailing `window` turns up to and
/// including `turn_index` spoken by the participant) and the history vector
/// (mean token embedding over every character the participant has said so
/// far). The cognitive score is carried over.
pub fn update_state(
    state: &ParticipantState,
    session: &Session,
    turn_index: u32,
    vocab: &Vocab,
    token_embedding: &Tensor,
    window: usize,
) -> ParticipantState {
    let upto: Vec<_> = session
        .utterances
        .iter()
        .filter(|u| u.turn <= turn_index)
        .collect();
    let recent = &upto[upto.len().saturating_sub(window)..];
    let engagement = if recent.is_empty() {
        0.0
    } else {
        recent.iter().filter(|u| u.speaker == state.speaker).count() as f64 / recent.len() as f64
    };

    let d = token_embedding.cols();
    let mut history = vec![0.0; d];
    let mut n = 0usize;
    for u in upto.iter().filter(|u| u.speaker == state.speaker) {
        for id in vocab.encode(&u.text) {
            for (h, e) in history.iter_mut().zip(token_embedding.row(id as usize)) {
                *h += e;
            }
            n += 1;
        }
    }
    if n > 0 {
        for h in &mut history {
            *h /= n as f64;
        }
    }
    ParticipantState {
        speaker: state.speaker,
        cognitive_score: state.cognitive_score,
        engagement,
        history_vector: history,
    }
}

/// Generator network weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftPromptNetParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

impl SoftPromptNetParams {
    /// Fan-in scaled normal weights, zero biases.
    pub fn init(input_dim: usize, cfg: &DpsmConfig, prompt_dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let (h1, h2) = (cfg.hidden1, cfg.hidden2);
        let mut w = |rows: usize, cols: usize| {
            Tensor::randn(rows, cols, 1.0 / (rows as f64).sqrt(), &mut rng)
        };
        Self {
            w1: w(input_dim, h1),
            b1: Tensor::zeros(1, h1),
            w_q: w(h1, h1),
            w_k: w(h1, h1),
            w_v: w(h1, h1),
            w2: w(h1, h2),
            b2: Tensor::zeros(1, h2),
            w_out: w(h2, prompt_dim),
            b_out: Tensor::zeros(1, prompt_dim),
        }
    }

    pub fn zeros(input_dim: usize, h1: usize, h2: usize, prompt_dim: usize) -> Self {
        Self {
            w1: Tensor::zeros(input_dim, h1),
            b1: Tensor::zeros(1, h1),
            w_q: Tensor::zeros(h1, h1),
            w_k: Tensor::zeros(h1, h1),
            w_v: Tensor::zeros(h1, h1),
            w2: Tensor::zeros(h1, h2),
            b2: Tensor::zeros(1, h2),
            w_out: Tensor::zeros(h2, prompt_dim),
            b_out: Tensor::zeros(1, prompt_dim),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn prompt_dim(&self) -> usize {
        self.w_out.cols()
    }

    pub fn bind_net<'a>(&'a self, tape: &mut Tape<'a>) -> BoundNet {
        let v = self.bind(tape);
        BoundNet {
            w1: v[0],
            b1: v[1],
            w_q: v[2],
            w_k: v[3],
            w_v: v[4],
            w2: v[5],
            b2: v[6],
            w_out: v[7],
            b_out: v[8],
            all: v,
        }
    }
}

impl Parameters for SoftPromptNetParams {
    fn params(&self) -> Vec<ParamRef<'_>> {
        [
            ("w1", &self.w1, true),
            ("b1", &self.b1, false),
            ("w_q", &self.w_q, true),
            ("w_k", &self.w_k, true),
            ("w_v", &self.w_v, true),
            ("w2", &self.w2, true),
            ("b2", &self.b2, false),
            ("w_out", &self.w_out, true),
            ("b_out", &self.b_out, false),
        ]
        .into_iter()
        .map(|(n, t, decay)| ParamRef {
            name: format!("dpsm.{n}"),
            tensor: t,
            decay,
        })
        .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w1,
            &mut self.b1,
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w2,
            &mut self.b2,
            &mut self.w_out,
            &mut self.b_out,
        ]
    }
}

pub struct BoundNet {
    pub w1: Var,
    pub b1: Var,
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w2: Var,
    pub b2: Var,
    pub w_out: Var,
    pub b_out: Var,
    pub all: Vec<Var>,
}

/// Records the generator on `tape` for input features `x`.
pub fn soft_prompt_on_tape(
    tape: &mut Tape<'_>,
    net: &SoftPromptNetParams,
    bound: &BoundNet,
    x: &[f64],
) -> Result<Var, DpsmError> {
    let xv = tape.constant(Tensor::row_vector(x.to_vec()));
    soft_prompt_from_var(tape, net, bound, xv)
}

/// As [`soft_prompt_on_tape`], with the `1 × D_in` input already on the tape.
pub fn soft_prompt_from_var(
    tape: &mut Tape<'_>,
    net: &SoftPromptNetParams,
    bound: &BoundNet,
    xv: Var,
) -> Result<Var, DpsmError> {
    let shape = tape.value(xv).shape();
    if shape != (1, net.input_dim()) {
        return Err(DpsmError::DimensionMismatch {
            expected: net.input_dim(),
            got: shape.0 * shape.1,
        });
    }
    let d_k = net.w_q.cols() as f64;
    let l1 = tape.matmul(xv, bound.w1);
    let l1 = tape.add_row(l1, bound.b1);
    let l1 = tape.gelu(l1);
    let q = tape.matmul(l1, bound.w_q);
    let k = tape.matmul(l1, bound.w_k);
    let v = tape.matmul(l1, bound.w_v);
    let scores = tape.matmul_bt(q, k);
    let scores = tape.scale(scores, 1.0 / d_k.sqrt());
    let weights = tape.causal_softmax(scores);
    let attended = tape.matmul(weights, v);
    let l2 = tape.matmul(attended, bound.w2);
    let l2 = tape.add_row(l2, bound.b2);
    let l2 = tape.gelu(l2);
    let out = tape.matmul(l2, bound.w_out);
    let out = tape.add_row(out, bound.b_out);
    Ok(tape.tanh(out))
}

/// Soft prompt for input features `x`; every component lies in `(−1, 1)`.
pub fn soft_prompt_forward(net: &SoftPromptNetParams, x: &[f64]) -> Result<Vec<f64>, DpsmError> {
    let mut tape = Tape::new();
    let bound = net.bind_net(&mut tape);
    let p = soft_prompt_on_tape(&mut tape, net, &bound, x)?;
    Ok(tape.value(p).data().to_vec())
}

/// `‖p_t − p_prev‖²`.
pub fn smoothness_loss(p_t: &[f64], p_prev: &[f64]) -> Result<f64, DpsmError> {
    if p_t.len() != p_prev.len() {
        return Err(DpsmError::DimensionMismatch {
            expected: p_prev.len(),
            got: p_t.len(),
        });
    }
    Ok(p_t.iter().zip(p_prev).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Tape version of [`smoothness_loss`]; `p_prev` is treated as a constant.
pub fn smoothness_on_tape(tape: &mut Tape<'_>, p_t: Var, p_prev: &[f64]) -> Var {
    let prev = tape.constant(Tensor::row_vector(p_prev.to_vec()));
    let diff = tape.sub(p_t, prev);
    let sq = tape.mul(diff, diff);
    tape.sum(sq)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub session: String,
    pub participant: u32,
    pub turn: u32,
    pub p_soft: Vec<f64>,
}

/// Emitted prompts per (session, participant), in emission order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SoftPromptTrace {
    entries: BTreeMap<(String, u32), Vec<(u32, Vec<f64>)>>,
}

impl SoftPromptTrace {
    pub fn record(&mut self, session: &str, participant: u32, turn: u32, p: Vec<f64>) {
        self.entries
            .entry((session.to_string(), participant))
            .or_default()
            .push((turn, p));
    }

    /// Previous prompt for a participant, or `None` before the first one.
    pub fn last(&self, session: &str, participant: u32) -> Option<&[f64]> {
        self.entries
            .get(&(session.to_string(), participant))
            .and_then(|v| v.last())
            .map(|(_, p)| p.as_slice())
    }

    pub fn series(&self) -> impl Iterator<Item = (&(String, u32), &Vec<(u32, Vec<f64>)>)> {
        self.entries.iter()
    }

    /// Mean `‖P_t − P_{t−1}‖²` over consecutive prompts of each participant.
    pub fn mean_consecutive_change(&self) -> Option<f64> {
        let mut total = 0.0;
        let mut n = 0usize;
        for series in self.entries.values() {
            for pair in series.windows(2) {
                total += smoothness_loss(&pair[1].1, &pair[0].1).expect("equal dims");
                n += 1;
            }
        }
        (n > 0).then(|| total / n as f64)
    }

    pub fn records(&self) -> Vec<TraceRecord> {
        self.entries
            .iter()
            .flat_map(|((s, p), series)| {
                series.iter().map(move |(t, v)| TraceRecord {
                    session: s.clone(),
                    participant: *p,
                    turn: *t,
                    p_soft: v.clone(),
                })
            })
            .collect()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for r in self.records() {
            writeln!(w, "{}", serde_json::to_string(&r).map_err(std::io::Error::other)?)?;
        }
        Ok(())
    }
}
