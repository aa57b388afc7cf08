//! Supervised phase: per-example joint loss with gradients, and the
//! accumulate / clip / AdamW loop over a corpus.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::corpus::Session;
use crate::dialogue::{assistant_turns, encode_turn, participant_inputs};
use crate::dpsm::{
    smoothness_loss, smoothness_on_tape, soft_prompt_from_var, DpsmConfig, SoftPromptNetParams,
    SoftPromptTrace,
};
use crate::model::{derive_seed, forward_on_tape, ModelParams, Parameters, TokenId, Vocab};
use crate::objectives::{
    attention_mass, csfal, csfal_on_tape, default_stop_set, extract_keywords, frequency_table,
    generation_loss, generation_loss_on_tape, sft_loss_on_tape, KeywordTargets, LossRecord,
    SFTLossWeights,
};
use crate::optim::{clip_grad_norm, lr_at, AdamW};
use crate::tensor::Tensor;

use super::{PipelineError, SftConfig};

/// Keyword statistics shared by every example of a phase.
pub struct KeywordIndex {
    pub freq: HashMap<TokenId, u64>,
    pub stop: HashSet<TokenId>,
    pub k_fraction: f64,
    pub kappa: f64,
}

impl KeywordIndex {
    /// Character frequencies over every utterance of `corpus`.
    pub fn from_corpus(corpus: &[Session], vocab: &Vocab, k_fraction: f64, kappa: f64) -> Self {
        let encoded: Vec<Vec<TokenId>> = corpus
            .iter()
            .flat_map(|s| s.utterances.iter().map(|u| vocab.encode(&u.text)))
            .collect();
        Self {
            freq: frequency_table(encoded.iter().map(Vec::as_slice)),
            stop: default_stop_set(vocab),
            k_fraction,
            kappa,
        }
    }
}

/// Everything an SFT example needs besides the parameters.
pub struct SftSetup<'a> {
    pub vocab: &'a Vocab,
    pub dpsm: &'a DpsmConfig,
    pub weights: SFTLossWeights,
    pub keywords: &'a KeywordIndex,
}

/// Loss components of one example, the prompt it produced, and gradients
/// for the model and the soft-prompt network.
pub struct SftOutcome {
    pub l_gen: f64,
    pub l_csfal: f64,
    pub l_smooth: f64,
    pub l_total: f64,
    pub prompt: Option<(u32, Vec<f64>)>,
    /// Mean final-layer attention on keyword positions, summed over keywords.
    pub keyword_mass: f64,
    pub model_grads: Vec<Tensor>,
    pub net_grads: Vec<Tensor>,
}

/// Teacher-forced joint loss for the assistant reply at `index`.
/// `p_prev` is the addressee's previous prompt (zero when absent). Terms
/// whose weight is 0 are left out of the graph.
pub fn sft_example(
    params: &ModelParams,
    net: &SoftPromptNetParams,
    setup: &SftSetup<'_>,
    session: &Session,
    index: usize,
    p_prev: Option<&[f64]>,
) -> Result<SftOutcome, PipelineError> {
    let w = setup.weights;
    let mut tape = Tape::new();
    let bound = params.bind_model(&mut tape);
    let bound_net = net.bind_net(&mut tape);

    let inputs = participant_inputs(session, index, setup.vocab, setup.dpsm)?;
    let prompt = match &inputs {
        Some(p) => {
            let x = p.features_on_tape(&mut tape, bound.tok_emb);
            Some((p.human, soft_prompt_from_var(&mut tape, net, &bound_net, x)?))
        }
        None => None,
    };
    let offset = usize::from(prompt.is_some());
    let enc = encode_turn(setup.vocab, session, index, params.config.max_seq - offset)?;
    let ids = enc.ids();
    let ctx = enc.context.len();
    let fv = forward_on_tape(&mut tape, params, &bound, &ids, prompt.map(|(_, v)| v))?;

    let rows = ids.len() + offset;
    let mut targets = vec![0; rows];
    let mut mask = vec![false; rows];
    for k in ctx..ids.len() {
        let r = fv.predicting_row(k);
        targets[r] = ids[k];
        mask[r] = true;
    }
    let gen = generation_loss_on_tape(&mut tape, fv.logits, &targets, &mask)?;
    let l_gen = tape.value(gen).item();
    debug_assert!((l_gen - generation_loss(tape.value(fv.logits), &targets, &mask)?).abs() < 1e-9);

    let k = &setup.keywords;
    let positions = extract_keywords(&enc.response, &k.freq, k.k_fraction, &k.stop);
    let kt = KeywordTargets::new(positions.iter().map(|p| p + ctx).collect(), ids.len(), k.kappa)?;
    let query_rows: Vec<usize> = (ctx..ids.len()).map(|q| q + offset).collect();
    let final_heads = fv.attn.last().expect("at least one layer").clone();
    let attn = crate::model::AttentionMap {
        layers: vec![final_heads.iter().map(|h| tape.value(*h).clone()).collect()],
    };
    let a = attention_mass(&attn, &query_rows, offset, ids.len());
    let l_csfal = csfal(&a, &kt)?;
    let keyword_mass = kt.positions.iter().map(|&p| a[p]).sum();
    let csfal_var = if w.gamma2 != 0.0 {
        Some(csfal_on_tape(&mut tape, &final_heads, &query_rows, offset, &kt)?)
    } else {
        None
    };

    let zeros = vec![0.0; net.prompt_dim()];
    let prev = p_prev.unwrap_or(&zeros);
    let (l_smooth, smooth_var) = match prompt {
        Some((_, p)) => {
            let l = smoothness_loss(tape.value(p).data(), prev)?;
            let v = (w.gamma3 != 0.0).then(|| smoothness_on_tape(&mut tape, p, prev));
            (l, v)
        }
        None => (0.0, None),
    };

    let total = sft_loss_on_tape(&mut tape, gen, csfal_var, smooth_var, &w);
    let l_total = tape.value(total).item();
    if !l_total.is_finite() {
        return Err(PipelineError::NonFinite("sft loss".into()));
    }
    let mut grads = tape.backward(total).expect("scalar loss");
    let model_grads = bound.all.iter().map(|&v| grads.take(v)).collect();
    let net_grads = bound_net.all.iter().map(|&v| grads.take(v)).collect();
    Ok(SftOutcome {
        l_gen,
        l_csfal,
        l_smooth,
        l_total,
        prompt: prompt.map(|(h, v)| (h, tape.value(v).data().to_vec())),
        keyword_mass,
        model_grads,
        net_grads,
    })
}

/// Summary of a finished phase.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SftReport {
    pub optimizer_steps: u64,
    pub examples: u64,
    pub losses: Vec<LossRecord>,
    pub trace: SoftPromptTrace,
}

impl SftReport {
    pub fn mean_l_gen(&self) -> f64 {
        mean(self.losses.iter().map(|l| l.l_gen))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// One supervised phase over `corpus`. Sessions are visited in an order
/// shuffled per epoch from `seed`; turns inside a session stay in order so
/// each participant's previous prompt is well defined. Gradients of
/// `grad_accum` consecutive examples are averaged, clipped by global norm,
/// and applied with AdamW at `lr_at(step, total_steps)`. Parameters are
/// rounded to `f32` at the end of the phase.
pub fn sft_phase(
    corpus: &[Session],
    params: &mut ModelParams,
    net: &mut SoftPromptNetParams,
    vocab: &Vocab,
    dpsm: &DpsmConfig,
    cfg: &SftConfig,
    epochs: usize,
    seed: u64,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<SftReport, PipelineError> {
    cfg.validate()?;
    let turns = assistant_turns(corpus);
    if turns.is_empty() {
        return Err(PipelineError::Data("corpus has no assistant replies after the first turn".into()));
    }
    let keywords = KeywordIndex::from_corpus(corpus, vocab, cfg.k_fraction, cfg.kappa);
    let setup = SftSetup {
        vocab,
        dpsm,
        weights: cfg.weights,
        keywords: &keywords,
    };
    let total_steps = (turns.len() * epochs).div_ceil(cfg.grad_accum) as u64;
    let mut decay = params.decay_mask();
    decay.extend(net.decay_mask());
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut report = SftReport::default();

    let mut acc: Option<Vec<Tensor>> = None;
    let mut acc_n = 0usize;
    let mut sums = [0.0; 4];
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[epoch as u64])));
        let mut trace = SoftPromptTrace::default();
        for &si in &order {
            let session = &corpus[si];
            for t in turns.iter().filter(|t| t.session == si) {
                let prev = crate::dialogue::addressee(session, t.index)
                    .and_then(|h| trace.last(&session.id, h).map(<[f64]>::to_vec));
                let out = sft_example(params, net, &setup, session, t.index, prev.as_deref())?;
                if let Some((h, p)) = &out.prompt {
                    trace.record(&session.id, *h, session.utterances[t.index].turn, p.clone());
                }
                for (s, v) in sums.iter_mut().zip([out.l_gen, out.l_csfal, out.l_smooth, out.l_total]) {
                    *s += v;
                }
                let mut g = out.model_grads;
                g.extend(out.net_grads);
                match &mut acc {
                    Some(a) => a.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b)),
                    None => acc = Some(g),
                }
                acc_n += 1;
                report.examples += 1;
                if acc_n == cfg.grad_accum {
                    let record = apply_update(
                        params, net, &mut opt, acc.take().expect("accumulated"), acc_n, &decay,
                        lr_at(report.optimizer_steps, total_steps, &cfg.schedule), cfg.grad_clip,
                        report.optimizer_steps, &sums,
                    )?;
                    on_step(&record);
                    report.losses.push(record);
                    report.optimizer_steps += 1;
                    acc_n = 0;
                    sums = [0.0; 4];
                }
            }
        }
        report.trace = trace;
    }
    if let Some(g) = acc.take() {
        let record = apply_update(
            params, net, &mut opt, g, acc_n, &decay,
            lr_at(report.optimizer_steps, total_steps, &cfg.schedule), cfg.grad_clip,
            report.optimizer_steps, &sums,
        )?;
        on_step(&record);
        report.losses.push(record);
        report.optimizer_steps += 1;
    }
    params.snap_to_f32();
    net.snap_to_f32();
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn apply_update(
    params: &mut ModelParams,
    net: &mut SoftPromptNetParams,
    opt: &mut AdamW,
    mut grads: Vec<Tensor>,
    n: usize,
    decay: &[bool],
    lr: f64,
    clip: f64,
    step: u64,
    sums: &[f64; 4],
) -> Result<LossRecord, PipelineError> {
    let inv = 1.0 / n as f64;
    grads.iter_mut().for_each(|g| g.scale_in_place(inv));
    clip_grad_norm(&mut grads, clip);
    let mut targets = params.params_mut();
    targets.extend(net.params_mut());
    opt.step(targets, &grads, decay, lr)?;
    if !params.all_finite() || !net.all_finite() {
        return Err(PipelineError::NonFinite(format!("parameters after step {step}")));
    }
    Ok(LossRecord {
        step,
        l_gen: sums[0] * inv,
        l_csfal: sums[1] * inv,
        l_smooth: sums[2] * inv,
        l_total: sums[3] * inv,
    })
}

/// Prompts the trained network emits over `corpus`, replayed turn by turn.
pub fn prompt_trace(
    params: &ModelParams,
    net: &SoftPromptNetParams,
    vocab: &Vocab,
    dpsm: &DpsmConfig,
    corpus: &[Session],
) -> Result<SoftPromptTrace, PipelineError> {
    let mut trace = SoftPromptTrace::default();
    for t in assistant_turns(corpus) {
        let s = &corpus[t.session];
        if let Some((h, p)) = crate::dialogue::soft_prompt_for(params, net, vocab, dpsm, s, t.index)? {
            trace.record(&s.id, h, s.utterances[t.index].turn, p);
        }
    }
    Ok(trace)
}

/// Mean keyword attention mass and generation loss of the model over
/// `corpus`, without updating anything.
pub fn keyword_attention(
    params: &ModelParams,
    net: &SoftPromptNetParams,
    vocab: &Vocab,
    dpsm: &DpsmConfig,
    keywords: &KeywordIndex,
    corpus: &[Session],
) -> Result<(f64, f64), PipelineError> {
    let setup = SftSetup {
        vocab,
        dpsm,
        weights: SFTLossWeights {
            gamma1: 1.0,
            gamma2: 0.0,
            gamma3: 0.0,
        },
        keywords,
    };
    let mut mass = Vec::new();
    let mut gen = Vec::new();
    for t in assistant_turns(corpus) {
        let out = sft_example(params, net, &setup, &corpus[t.session], t.index, None)?;
        mass.push(out.keyword_mass);
        gen.push(out.l_gen);
    }
    Ok((mean(mass.into_iter()), mean(gen.into_iter())))
}
