//! Multi-reward policy optimization.
//!
//! For each step a prompt is drawn, `G` candidates are sampled from the
//! current policy, and each is scored with a weighted sum of smoothed
//! BLEU-4, embedding similarity, Distinct-2 and a binary structure check.
//! Rewards are standardized within the group and the policy ascends
//!
//! ```text
//! J = mean_i (1/|o_i|) Σ_t [ exp(logp_θ − logp_old) · Â_i − β · kl_t ]
//! kl_t = r − ln r − 1,  r = exp(logp_ref − logp_θ)
//! ```
//!
//! The old policy is the current one at sampling time, so every ratio is 1
//! in value while still carrying the gradient of `logp_θ`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Tape, Var};
use crate::corpus::{serialize_utterance, serialize_utterances, Session};
use crate::dialogue::{assistant_turns, fit_context, soft_prompt_for};
use crate::dpsm::{DpsmConfig, DpsmError, SoftPromptNetParams};
use crate::metrics::{bleu_n, distinct_n, scoring_ids, semantic_similarity};
use crate::model::{
    continuation_log_probs, derive_seed, forward_on_tape, sample_response, ModelError,
    ModelParams, Parameters, SamplingConfig, TokenId, Vocab,
};
use crate::optim::{clip_grad_norm, AdamW, OptimError};
use crate::tensor::Tensor;

const ADV_EPS: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum MrpoError {
    #[error("reference response is empty")]
    EmptyReference,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("group size {0} is below 2")]
    GroupTooSmall(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("no prompts available")]
    NoPrompts,
    #[error("non-finite objective at step {0}")]
    NonFinite(u64),
    #[error("reference policy changed during optimization")]
    ReferenceDrift,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dpsm(#[from] DpsmError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub w_bleu: f64,
    pub w_sem: f64,
    pub w_dist: f64,
    pub w_struct: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            w_bleu: 0.25,
            w_sem: 0.35,
            w_dist: 0.20,
            w_struct: 0.20,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<(), MrpoError> {
        let w = [self.w_bleu, self.w_sem, self.w_dist, self.w_struct];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(MrpoError::InvalidConfig(format!("negative reward weight in {w:?}")));
        }
        if (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(MrpoError::InvalidConfig(format!("reward weights {w:?} do not sum to 1")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub bleu4: f64,
    pub semantic: f64,
    pub distinct2: f64,
    pub structure: f64,
    pub total: f64,
}

/// 1 when the candidate opens with `[Assistant]`, ends with `<|im_end|>`
/// (or was cut off at `max_len`), and carries no other speaker or
/// `<|im_start|>` token in its body.
pub fn structure_reward(candidate: &[TokenId], vocab: &Vocab, max_len: usize) -> f64 {
    let Some((&first, rest)) = candidate.split_first() else {
        return 0.0;
    };
    if first != vocab.assistant_id() {
        return 0.0;
    }
    let end = vocab.im_end_id();
    let body = match rest.split_last() {
        Some((&last, body)) if last == end => body,
        _ if candidate.len() >= max_len => rest,
        _ => return 0.0,
    };
    let bad = |id: &TokenId| {
        vocab.is_human_token(*id)
            || *id == vocab.im_start_id()
            || *id == vocab.assistant_id()
            || *id == end
    };
    if body.iter().any(bad) {
        0.0
    } else {
        1.0
    }
}

/// Weighted reward of `candidate` against `reference` (both as generated or
/// serialized ids; special tokens are stripped for the overlap terms).
pub fn composite_reward(
    candidate: &[TokenId],
    reference: &[TokenId],
    w: &RewardWeights,
    vocab: &Vocab,
    embeddings: &Tensor,
    max_len: usize,
) -> Result<RewardBreakdown, MrpoError> {
    let r = scoring_ids(reference, vocab);
    if r.is_empty() {
        return Err(MrpoError::EmptyReference);
    }
    let c = scoring_ids(candidate, vocab);
    let bleu4 = bleu_n(&c, &r, 4, true);
    let semantic = semantic_similarity(&c, &r, embeddings);
    let distinct2 = distinct_n(&[&c], 2);
    let structure = structure_reward(candidate, vocab, max_len);
    let total = w.w_bleu * bleu4 + w.w_sem * semantic + w.w_dist * distinct2 + w.w_struct * structure;
    Ok(RewardBreakdown {
        bleu4,
        semantic,
        distinct2,
        structure,
        total,
    })
}

/// `(R_i − mean) / (std_pop + 1e-8)`.
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>, MrpoError> {
    if rewards.len() < 2 {
        return Err(MrpoError::GroupTooSmall(rewards.len()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let denom = var.sqrt() + ADV_EPS;
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

/// Per-token `r − ln r − 1` with `r = exp(logp_ref − logp_policy)`.
pub fn kl_estimate(logp_policy: &[f64], logp_ref: &[f64]) -> Result<Vec<f64>, MrpoError> {
    if logp_policy.len() != logp_ref.len() {
        return Err(MrpoError::LengthMismatch(logp_policy.len(), logp_ref.len()));
    }
    Ok(logp_policy
        .iter()
        .zip(logp_ref)
        .map(|(p, r)| {
            let d = r - p;
            (d.exp_m1() - d).max(0.0)
        })
        .collect())
}

/// Value of the objective. Empty candidates contribute 0 to the group mean.
pub fn mrpo_objective(
    logp: &[Vec<f64>],
    logp_old: &[Vec<f64>],
    advantages: &[f64],
    kl: &[Vec<f64>],
    beta: f64,
) -> Result<f64, MrpoError> {
    let g = logp.len();
    if logp_old.len() != g || advantages.len() != g || kl.len() != g || g == 0 {
        return Err(MrpoError::ShapeMismatch(format!(
            "{g} candidates, {} old, {} advantages, {} kl",
            logp_old.len(),
            advantages.len(),
            kl.len()
        )));
    }
    let mut total = 0.0;
    for i in 0..g {
        let t = logp[i].len();
        if logp_old[i].len() != t || kl[i].len() != t {
            return Err(MrpoError::ShapeMismatch(format!("candidate {i} token counts differ")));
        }
        if t == 0 {
            continue;
        }
        let s: f64 = (0..t)
            .map(|k| (logp[i][k] - logp_old[i][k]).exp() * advantages[i] - beta * kl[i][k])
            .sum();
        total += s / t as f64;
    }
    Ok(total / g as f64)
}

/// One candidate's contribution `(1/|o|) Σ_t [ratio·Â − β·kl]` on `tape`,
/// where `logp` is an `n × 1` column of policy log-probabilities.
pub fn candidate_objective_on_tape(
    tape: &mut Tape<'_>,
    logp: Var,
    logp_old: &[f64],
    logp_ref: &[f64],
    advantage: f64,
    beta: f64,
) -> Result<Var, MrpoError> {
    let n = tape.value(logp).rows();
    if logp_old.len() != n || logp_ref.len() != n || tape.value(logp).cols() != 1 {
        return Err(MrpoError::ShapeMismatch(format!(
            "{n} policy log-probs, {} old, {} ref",
            logp_old.len(),
            logp_ref.len()
        )));
    }
    let old = tape.constant(Tensor::from_vec(n, 1, logp_old.to_vec()));
    let reference = tape.constant(Tensor::from_vec(n, 1, logp_ref.to_vec()));
    let diff = tape.sub(logp, old);
    let ratio = tape.exp(diff);
    let surrogate = tape.scale(ratio, advantage);
    let d = tape.sub(reference, logp);
    let r = tape.exp(d);
    let kl = tape.sub(r, d);
    let kl = tape.add_scalar(kl, -1.0);
    let penalty = tape.scale(kl, beta);
    let per_token = tape.sub(surrogate, penalty);
    Ok(tape.mean(per_token))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MRPOConfig {
    pub group_size: usize,
    pub beta: f64,
    pub lr: f64,
    pub steps: u64,
    pub seed: u64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub sampling: SamplingConfig,
    pub rewards: RewardWeights,
}

impl Default for MRPOConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            beta: 0.04,
            lr: 1e-5,
            steps: 200,
            seed: 0,
            weight_decay: 0.01,
            grad_clip: 1.0,
            sampling: SamplingConfig::default(),
            rewards: RewardWeights::default(),
        }
    }
}

impl MRPOConfig {
    pub fn validate(&self) -> Result<(), MrpoError> {
        if self.group_size < 2 {
            return Err(MrpoError::GroupTooSmall(self.group_size));
        }
        if !(self.beta >= 0.0) || !(self.lr > 0.0) || !(self.grad_clip > 0.0) {
            return Err(MrpoError::InvalidConfig(
                "beta must be >= 0; lr and grad_clip must be > 0".into(),
            ));
        }
        if self.sampling.max_new == 0 {
            return Err(MrpoError::InvalidConfig("sampling.max_new must be >= 1".into()));
        }
        self.rewards.validate()
    }
}

/// A prompt for the policy phase with its ground-truth reply.
#[derive(Clone, Debug, PartialEq)]
pub struct MrpoPrompt {
    pub session: String,
    pub turn: u32,
    pub context: Vec<TokenId>,
    pub soft_prompt: Option<Vec<f64>>,
    pub reference: Vec<TokenId>,
}

/// One prompt per assistant turn. Soft prompts come from the frozen
/// network evaluated with `reference_params`; contexts are left-truncated
/// to leave room for `max_new` generated tokens.
pub fn build_prompts(
    corpus: &[Session],
    reference_params: &ModelParams,
    net: &SoftPromptNetParams,
    vocab: &Vocab,
    dpsm: &DpsmConfig,
    max_new: usize,
) -> Result<Vec<MrpoPrompt>, MrpoError> {
    assistant_turns(corpus)
        .into_iter()
        .map(|t| {
            let s = &corpus[t.session];
            let prompt = soft_prompt_for(reference_params, net, vocab, dpsm, s, t.index)?;
            let offset = usize::from(prompt.is_some());
            let budget = reference_params
                .config
                .max_seq
                .checked_sub(offset + max_new)
                .filter(|&b| b > 0)
                .ok_or_else(|| {
                    MrpoError::InvalidConfig(format!(
                        "max_new {max_new} leaves no context room in max_seq {}",
                        reference_params.config.max_seq
                    ))
                })?;
            let context = vocab.encode(&serialize_utterances(&s.utterances[..t.index]));
            Ok(MrpoPrompt {
                session: s.id.clone(),
                turn: s.utterances[t.index].turn,
                context: fit_context(&context, budget).to_vec(),
                soft_prompt: prompt.map(|(_, p)| p),
                reference: vocab.encode(&serialize_utterance(&s.utterances[t.index])),
            })
        })
        .collect()
}

/// Per-step summary written to the reward trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub step: u64,
    pub mean_total: f64,
    pub mean_bleu4: f64,
    pub mean_sem: f64,
    pub mean_dist2: f64,
    pub struct_rate: f64,
    pub mean_kl: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RewardTrace {
    pub records: Vec<RewardRecord>,
    pub reference_checksum: String,
}

impl RewardTrace {
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for r in &self.records {
            writeln!(w, "{}", serde_json::to_string(r).map_err(std::io::Error::other)?)?;
        }
        Ok(())
    }
}

/// Mean reward breakdown of `samples` candidates per prompt, sampled with
/// seeds derived from `seed`, without updating anything.
pub fn evaluate_policy(
    params: &ModelParams,
    prompts: &[MrpoPrompt],
    vocab: &Vocab,
    embeddings: &Tensor,
    cfg: &MRPOConfig,
    samples: usize,
    seed: u64,
) -> Result<RewardBreakdown, MrpoError> {
    let jobs: Vec<(usize, usize)> = (0..prompts.len())
        .flat_map(|p| (0..samples).map(move |k| (p, k)))
        .collect();
    let scored: Vec<Result<RewardBreakdown, MrpoError>> = jobs
        .par_iter()
        .map(|&(p, k)| {
            let pr = &prompts[p];
            let cand = sample_response(
                params,
                &pr.context,
                pr.soft_prompt.as_deref(),
                &cfg.sampling,
                vocab.im_end_id(),
                derive_seed(seed, &[p as u64, k as u64]),
            )?;
            composite_reward(
                &cand,
                &pr.reference,
                &cfg.rewards,
                vocab,
                embeddings,
                cfg.sampling.max_new,
            )
        })
        .collect();
    let mut acc = [0.0; 5];
    for r in scored {
        let r = r?;
        for (a, v) in acc
            .iter_mut()
            .zip([r.bleu4, r.semantic, r.distinct2, r.structure, r.total])
        {
            *a += v;
        }
    }
    let n = jobs.len().max(1) as f64;
    Ok(RewardBreakdown {
        bleu4: acc[0] / n,
        semantic: acc[1] / n,
        distinct2: acc[2] / n,
        structure: acc[3] / n,
        total: acc[4] / n,
    })
}

struct CandidateOutcome {
    reward: RewardBreakdown,
    logp_old: Vec<f64>,
    logp_ref: Vec<f64>,
}

/// Log-probabilities of `candidate` under `params` recorded on `tape`, as
/// an `n × 1` column.
fn candidate_logp_on_tape<'a>(
    tape: &mut Tape<'a>,
    params: &'a ModelParams,
    prompt: &MrpoPrompt,
    candidate: &[TokenId],
) -> Result<(Var, Vec<Var>), MrpoError> {
    let bound = params.bind_model(tape);
    let soft = prompt
        .soft_prompt
        .as_ref()
        .map(|p| tape.constant(Tensor::row_vector(p.clone())));
    let ids: Vec<TokenId> = prompt.context.iter().chain(candidate).copied().collect();
    let fv = forward_on_tape(tape, params, &bound, &ids, soft)?;
    let ctx = prompt.context.len();
    let rows: Vec<usize> = (ctx..ids.len()).map(|k| fv.predicting_row(k)).collect();
    let targets: Vec<usize> = candidate.iter().map(|&t| t as usize).collect();
    let sel = tape.gather_rows(fv.logits, &rows);
    Ok((tape.log_softmax_pick(sel, &targets), bound.all))
}

/// Runs the policy phase from `params_sft`. The reference policy is a
/// frozen copy of `params_sft`; its checksum is verified after the last
/// step.
pub fn run_mrpo(
    params_sft: &ModelParams,
    prompts: &[MrpoPrompt],
    vocab: &Vocab,
    cfg: &MRPOConfig,
    mut on_step: impl FnMut(&RewardRecord),
) -> Result<(ModelParams, RewardTrace), MrpoError> {
    cfg.validate()?;
    if prompts.is_empty() {
        return Err(MrpoError::NoPrompts);
    }
    let reference = params_sft.clone();
    let ref_sum = reference.checksum();
    let embeddings = reference.token_embedding();
    let mut params = params_sft.clone();
    let decay = params.decay_mask();
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut trace = RewardTrace {
        records: Vec::with_capacity(cfg.steps as usize),
        reference_checksum: ref_sum.clone(),
    };
    let g = cfg.group_size;

    for step in 0..cfg.steps {
        let pick = derive_seed(cfg.seed, &[step, u64::MAX]) % prompts.len() as u64;
        let prompt = &prompts[pick as usize];
        let soft = prompt.soft_prompt.as_deref();

        let outcomes: Vec<Result<(Vec<TokenId>, CandidateOutcome), MrpoError>> = (0..g)
            .into_par_iter()
            .map(|i| {
                let cand = sample_response(
                    &params,
                    &prompt.context,
                    soft,
                    &cfg.sampling,
                    vocab.im_end_id(),
                    derive_seed(cfg.seed, &[step, i as u64]),
                )?;
                let reward = composite_reward(
                    &cand,
                    &prompt.reference,
                    &cfg.rewards,
                    vocab,
                    embeddings,
                    cfg.sampling.max_new,
                )?;
                let logp_old = continuation_log_probs(&params, &prompt.context, &cand, soft)?;
                let logp_ref = continuation_log_probs(&reference, &prompt.context, &cand, soft)?;
                Ok((
                    cand,
                    CandidateOutcome {
                        reward,
                        logp_old,
                        logp_ref,
                    },
                ))
            })
            .collect();
        let outcomes: Vec<(Vec<TokenId>, CandidateOutcome)> =
            outcomes.into_iter().collect::<Result<_, _>>()?;
        let rewards: Vec<f64> = outcomes.iter().map(|(_, o)| o.reward.total).collect();
        let adv = group_advantages(&rewards)?;

        let grads: Vec<Result<Option<Vec<Tensor>>, MrpoError>> = outcomes
            .par_iter()
            .zip(adv.par_iter())
            .map(|((cand, o), &a)| {
                if cand.is_empty() {
                    return Ok(None);
                }
                let mut tape = Tape::new();
                let (lp, vars) = candidate_logp_on_tape(&mut tape, &params, prompt, cand)?;
                let j = candidate_objective_on_tape(&mut tape, lp, &o.logp_old, &o.logp_ref, a, cfg.beta)?;
                let loss = tape.scale(j, -1.0 / g as f64);
                if !tape.value(loss).is_finite() {
                    return Err(MrpoError::NonFinite(step));
                }
                let mut gr = tape.backward(loss).expect("scalar loss");
                Ok(Some(vars.iter().map(|&v| gr.take(v)).collect()))
            })
            .collect();
        let mut total: Option<Vec<Tensor>> = None;
        for gr in grads {
            if let Some(gr) = gr? {
                match &mut total {
                    Some(acc) => acc.iter_mut().zip(&gr).for_each(|(a, b)| a.add_assign(b)),
                    None => total = Some(gr),
                }
            }
        }
        if let Some(mut total) = total {
            clip_grad_norm(&mut total, cfg.grad_clip);
            opt.step(params.params_mut(), &total, &decay, cfg.lr)?;
            if !params.all_finite() {
                return Err(MrpoError::NonFinite(step));
            }
        }

        let n = g as f64;
        let mean = |f: fn(&RewardBreakdown) -> f64| outcomes.iter().map(|(_, o)| f(&o.reward)).sum::<f64>() / n;
        let kl_means: Vec<f64> = outcomes
            .iter()
            .filter(|(c, _)| !c.is_empty())
            .map(|(_, o)| {
                let k = kl_estimate(&o.logp_old, &o.logp_ref).expect("equal lengths");
                k.iter().sum::<f64>() / k.len() as f64
            })
            .collect();
        let record = RewardRecord {
            step,
            mean_total: mean(|r| r.total),
            mean_bleu4: mean(|r| r.bleu4),
            mean_sem: mean(|r| r.semantic),
            mean_dist2: mean(|r| r.distinct2),
            struct_rate: mean(|r| r.structure),
            mean_kl: kl_means.iter().sum::<f64>() / kl_means.len().max(1) as f64,
        };
        on_step(&record);
        trace.records.push(record);
    }

    if reference.checksum() != ref_sum {
        return Err(MrpoError::ReferenceDrift);
    }
    Ok((params, trace))
}
