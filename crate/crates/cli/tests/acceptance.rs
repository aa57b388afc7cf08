//! Acceptance checks. Each criterion prints one PASS/FAIL line; the process
//! exits non-zero if any criterion fails. Pass criterion numbers as
//! arguments to run a subset, e.g. `cargo test --test acceptance -- 3 5`.

mod common;

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::{keyword_corpus, small_config, toy_corpus, write_workspace};
use gcsd_core::autograd::Tape;
use gcsd_core::corpus::{
    build_session, clean_utterance, parse_serialized, serialize_session, Origin, Session, SpeakerRole,
};
use gcsd_core::dialogue::{addressee, assistant_turns};
use gcsd_core::dpsm::SoftPromptNetParams;
use gcsd_core::metrics::{bleu_n, distinct_n, rouge_l};
use gcsd_core::model::{continuation_log_probs, sample_response, ModelParams, Parameters, Vocab};
use gcsd_core::mrpo::{
    build_prompts, candidate_objective_on_tape, evaluate_policy, group_advantages, kl_estimate,
    mrpo_objective, run_mrpo,
};
use gcsd_core::objectives::SFTLossWeights;
use gcsd_core::optim::{lr_at, AdamW, ScheduleConfig};
use gcsd_core::pgss::{generate_batch, validate_simulated, GeneratorBackend, ScenarioConfig};
use gcsd_core::pipeline::{
    build_vocab, fresh_model, keyword_attention, prompt_trace, sft_example, sft_phase, KeywordIndex,
    SftSetup, TrainConfig,
};
use gcsd_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

struct Criterion {
    id: usize,
    name: &'static str,
    limit: Duration,
    run: fn() -> Outcome,
}

fn main() {
    let wanted: BTreeSet<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria = [
        Criterion { id: 1, name: "gradient correctness", limit: Duration::from_secs(120), run: gradient_check },
        Criterion { id: 2, name: "metric oracles", limit: Duration::from_secs(30), run: metric_oracles },
        Criterion { id: 3, name: "keyword attention effect", limit: Duration::from_secs(600), run: csfal_effect },
        Criterion { id: 4, name: "prompt smoothness effect", limit: Duration::from_secs(600), run: smoothness_effect },
        Criterion { id: 5, name: "policy optimization effect", limit: Duration::from_secs(900), run: mrpo_effect },
        Criterion { id: 6, name: "policy optimization invariants", limit: Duration::from_secs(120), run: mrpo_invariants },
        Criterion { id: 7, name: "data pipeline", limit: Duration::from_secs(120), run: data_pipeline },
        Criterion { id: 8, name: "schedule and optimizer", limit: Duration::from_secs(30), run: schedule_and_optimizer },
        Criterion { id: 9, name: "end-to-end determinism", limit: Duration::from_secs(1800), run: end_to_end },
    ];
    let mut failed = 0;
    for c in criteria.iter().filter(|c| wanted.is_empty() || wanted.contains(&c.id)) {
        let start = Instant::now();
        let result = std::panic::catch_unwind(c.run).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let result = match result {
            Ok(_) if elapsed > c.limit => Err(format!("took {elapsed:.1?}, limit {:?}", c.limit)),
            r => r,
        };
        match result {
            Ok(detail) => println!("criterion {} ({}): PASS [{elapsed:.1?}] {detail}", c.id, c.name),
            Err(detail) => {
                failed += 1;
                println!("criterion {} ({}): FAIL [{elapsed:.1?}] {detail}", c.id, c.name);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- 1

fn tensor_mut<'a>(params: &'a mut ModelParams, net: &'a mut SoftPromptNetParams, index: usize) -> &'a mut Tensor {
    let n_model = params.params().len();
    if index < n_model {
        params.params_mut().swap_remove(index)
    } else {
        net.params_mut().swap_remove(index - n_model)
    }
}

fn gradient_check() -> Outcome {
    let mut cfg = small_config(11);
    cfg.model.d_model = 32;
    cfg.model.n_heads = 4;
    cfg.model.d_ff = 64;
    cfg.model.max_seq = 80;
    let corpus = keyword_corpus(6, 0);
    let vocab = build_vocab(&[&corpus], cfg.dpsm.max_humans);
    let (mut params, mut net) = fresh_model(&cfg, &vocab).map_err(err)?;
    let keywords = KeywordIndex::from_corpus(&corpus, &vocab, 0.2, 1.0);
    let setup = SftSetup {
        vocab: &vocab,
        dpsm: &cfg.dpsm,
        weights: SFTLossWeights {
            gamma1: 1.0,
            gamma2: 0.5,
            gamma3: 0.1,
        },
        keywords: &keywords,
    };
    let turn = assistant_turns(&corpus)
        .into_iter()
        .find(|t| addressee(&corpus[t.session], t.index).is_some())
        .ok_or("no addressed turn")?;
    let session = &corpus[turn.session];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p_prev: Vec<f64> = (0..cfg.model.d_model).map(|_| rng.gen_range(-0.5..0.5)).collect();

    let base = sft_example(&params, &net, &setup, session, turn.index, Some(&p_prev)).map_err(err)?;
    if base.prompt.is_none() || base.l_csfal <= 0.0 || base.l_smooth <= 0.0 {
        return Err("not every loss term is active".into());
    }
    let analytic: Vec<Tensor> = base.model_grads.into_iter().chain(base.net_grads).collect();
    let sizes: Vec<usize> = analytic.iter().map(Tensor::len).collect();
    let total: usize = sizes.iter().sum();

    let h = 1e-4;
    let samples = 256;
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    for _ in 0..samples {
        let mut flat = rng.gen_range(0..total);
        let mut tensor = 0;
        while flat >= sizes[tensor] {
            flat -= sizes[tensor];
            tensor += 1;
        }
        let a = analytic[tensor].data()[flat];
        let orig = tensor_mut(&mut params, &mut net, tensor).data()[flat];
        let mut losses = [0.0; 2];
        for (l, v) in losses.iter_mut().zip([orig + h, orig - h]) {
            tensor_mut(&mut params, &mut net, tensor).data_mut()[flat] = v;
            *l = sft_example(&params, &net, &setup, session, turn.index, Some(&p_prev)).map_err(err)?.l_total;
        }
        tensor_mut(&mut params, &mut net, tensor).data_mut()[flat] = orig;
        let [up, down] = losses;
        let n = (up - down) / (2.0 * h);
        let scale = a.abs().max(n.abs());
        let rel = if scale == 0.0 { 0.0 } else { (a - n).abs() / scale };
        if rel > worst {
            worst = rel;
            worst_at = format!("tensor {tensor}[{flat}] analytic {a:.3e} numeric {n:.3e}");
        }
    }
    check(
        worst < 1e-4,
        format!("{samples} parameters of {total}, max relative error {worst:.2e} ({worst_at})"),
    )
}

// ---------------------------------------------------------------- 2

fn is_subsequence(needle: &[u8], hay: &[u8]) -> bool {
    let mut it = hay.iter();
    needle.iter().all(|x| it.any(|y| y == x))
}

fn rouge_oracle(hyp: &[u8], reference: &[u8]) -> f64 {
    let mut lcs = 0;
    for mask in 0u32..(1 << hyp.len()) {
        let sub: Vec<u8> = (0..hyp.len()).filter(|i| mask & (1 << i) != 0).map(|i| hyp[i]).collect();
        if sub.len() > lcs && is_subsequence(&sub, reference) {
            lcs = sub.len();
        }
    }
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / hyp.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

fn grams(tokens: &[u8], k: usize) -> Vec<Vec<u8>> {
    if tokens.len() < k {
        return Vec::new();
    }
    (0..=tokens.len() - k).map(|i| tokens[i..i + k].to_vec()).collect()
}

fn bleu_oracle(hyp: &[u8], reference: &[u8], n: usize, smoothing: bool) -> f64 {
    let mut product = 1.0;
    for k in 1..=n {
        let h = grams(hyp, k);
        let r = grams(reference, k);
        let mut seen: Vec<&Vec<u8>> = Vec::new();
        let mut matched = 0;
        for g in &h {
            if seen.contains(&g) {
                continue;
            }
            seen.push(g);
            let in_h = h.iter().filter(|x| *x == g).count();
            let in_r = r.iter().filter(|x| *x == g).count();
            matched += in_h.min(in_r);
        }
        let p = if matched > 0 {
            matched as f64 / h.len() as f64
        } else if smoothing {
            1.0 / (h.len() as f64 + 1.0)
        } else {
            return 0.0;
        };
        product *= p;
    }
    let (c, r) = (hyp.len() as f64, reference.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * product.powf(1.0 / n as f64)
}

fn distinct_oracle(texts: &[Vec<u8>], n: usize) -> f64 {
    let all: Vec<Vec<u8>> = texts.iter().flat_map(|t| grams(t, n)).collect();
    if all.is_empty() {
        return 0.0;
    }
    let unique = (0..all.len()).filter(|&i| !all[..i].contains(&all[i])).count();
    unique as f64 / all.len() as f64
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let seq = |rng: &mut ChaCha8Rng, max: usize| -> Vec<u8> {
        let len = rng.gen_range(1..=max);
        let alphabet = rng.gen_range(2..=5);
        (0..len).map(|_| rng.gen_range(0..alphabet)).collect()
    };
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let hyp = seq(&mut rng, 12);
        let reference = seq(&mut rng, 12);
        let short = &hyp[..hyp.len().min(10)];
        worst = worst.max((rouge_l(short, &reference) - rouge_oracle(short, &reference)).abs());
        for n in [2, 4] {
            for smoothing in [false, true] {
                let d = bleu_n(&hyp, &reference, n, smoothing) - bleu_oracle(&hyp, &reference, n, smoothing);
                worst = worst.max(d.abs());
            }
        }
        let texts: Vec<Vec<u8>> = (0..rng.gen_range(1..4)).map(|_| seq(&mut rng, 8)).collect();
        worst = worst.max((distinct_n(&texts, 2) - distinct_oracle(&texts, 2)).abs());
    }
    let toks = |s: &str| s.split(' ').map(str::to_string).collect::<Vec<_>>();
    let pinned = [
        (rouge_l(&toks("a b c d"), &toks("a c d")), 6.0 / 7.0),
        (bleu_n(&toks("a b c d e"), &toks("a b c x e"), 2, false), 0.4f64.sqrt()),
        (distinct_n(&[toks("a a a a")], 2), 1.0 / 3.0),
    ];
    let pinned_ok = pinned.iter().all(|(got, want)| (got - want).abs() < 1e-12);
    check(
        worst < 1e-9 && pinned_ok,
        format!("200 random pairs, max |Δ| {worst:.1e}; pinned {:?}", pinned.map(|p| p.0)),
    )
}

// ---------------------------------------------------------------- 3, 4

struct Trained {
    params: ModelParams,
    net: SoftPromptNetParams,
    vocab: Vocab,
    cfg: TrainConfig,
}

fn train(train: &[Session], cfg: &TrainConfig, epochs: usize) -> Result<Trained, String> {
    let vocab = build_vocab(&[train], cfg.dpsm.max_humans);
    let (mut params, mut net) = fresh_model(cfg, &vocab).map_err(err)?;
    sft_phase(train, &mut params, &mut net, &vocab, &cfg.dpsm, &cfg.sft, epochs, cfg.seed, |_| {})
        .map_err(err)?;
    Ok(Trained {
        params,
        net,
        vocab,
        cfg: cfg.clone(),
    })
}

/// Per-example updates so a few thousand optimizer steps fit the budget.
fn effect_config(seed: u64, gamma2: f64, gamma3: f64) -> TrainConfig {
    let mut cfg = small_config(seed);
    cfg.sft.weights = SFTLossWeights {
        gamma1: 1.0,
        gamma2,
        gamma3,
    };
    cfg.sft.grad_accum = 1;
    cfg
}

const EFFECT_EPOCHS: usize = 30;

fn csfal_effect() -> Outcome {
    let corpus = keyword_corpus(24, 0);
    let held_out = keyword_corpus(8, 100);
    let mut lines = Vec::new();
    let mut wins = 0;
    for seed in [1, 2, 3] {
        let mut mass = [0.0; 2];
        for (slot, gamma2) in [(0, 0.0), (1, 0.5)] {
            // One target keyword per reply (the planted symbol), with a
            // stronger saliency weight than the default.
            let mut cfg = effect_config(seed, gamma2, 0.1);
            cfg.sft.k_fraction = 0.05;
            cfg.sft.kappa = 3.0;
            let t = train(&corpus, &cfg, EFFECT_EPOCHS)?;
            let keywords = KeywordIndex::from_corpus(&corpus, &t.vocab, t.cfg.sft.k_fraction, t.cfg.sft.kappa);
            mass[slot] = keyword_attention(&t.params, &t.net, &t.vocab, &t.cfg.dpsm, &keywords, &held_out)
                .map_err(err)?
                .0;
        }
        let gain = mass[1] / mass[0] - 1.0;
        wins += usize::from(gain >= 0.2);
        lines.push(format!("seed {seed}: {:.4} vs {:.4} ({:+.0}%)", mass[1], mass[0], 100.0 * gain));
    }
    check(wins == 3, format!("{wins}/3 seeds; {}", lines.join("; ")))
}

fn smoothness_effect() -> Outcome {
    let corpus = toy_corpus(24, Origin::Real, 0);
    let held_out = toy_corpus(8, Origin::Real, 50);
    let mut lines = Vec::new();
    let mut wins = 0;
    for seed in [1, 2, 3] {
        let mut change = [0.0; 2];
        for (slot, gamma3) in [(0, 0.0), (1, 0.1)] {
            let t = train(&corpus, &effect_config(seed, 0.5, gamma3), EFFECT_EPOCHS)?;
            let trace = prompt_trace(&t.params, &t.net, &t.vocab, &t.cfg.dpsm, &held_out).map_err(err)?;
            change[slot] = trace.mean_consecutive_change().ok_or("no consecutive prompts")?;
        }
        wins += usize::from(change[1] < change[0]);
        lines.push(format!("seed {seed}: {:.3e} vs {:.3e}", change[1], change[0]));
    }
    check(wins == 3, format!("{wins}/3 seeds; {}", lines.join("; ")))
}

// ---------------------------------------------------------------- 5

fn mrpo_effect() -> Outcome {
    let corpus = toy_corpus(24, Origin::Real, 0);
    let mut lines = Vec::new();
    let mut wins = 0;
    for seed in [1, 2, 3] {
        let mut cfg = small_config(seed);
        cfg.mrpo.steps = 200;
        cfg.mrpo.group_size = 8;
        cfg.mrpo.beta = 0.04;
        cfg.mrpo.lr = 3e-3;
        cfg.mrpo.seed = seed;
        cfg.mrpo.sampling.max_new = 32;
        // A partly trained starting point: it has seen the reply format but
        // rarely produces a well-formed turn yet.
        let t = train(&corpus, &cfg, 4)?;
        let prompts = build_prompts(&corpus, &t.params, &t.net, &t.vocab, &cfg.dpsm, cfg.mrpo.sampling.max_new)
            .map_err(err)?;
        let emb = t.params.token_embedding();
        let before = evaluate_policy(&t.params, &prompts, &t.vocab, emb, &cfg.mrpo, 4, 99).map_err(err)?;
        let (after_params, _) = run_mrpo(&t.params, &prompts, &t.vocab, &cfg.mrpo, |_| {}).map_err(err)?;
        let after = evaluate_policy(&after_params, &prompts, &t.vocab, emb, &cfg.mrpo, 4, 99).map_err(err)?;
        let gain = after.total / before.total - 1.0;
        let ok = gain >= 0.3 && after.structure >= 0.9;
        wins += usize::from(ok);
        lines.push(format!(
            "seed {seed}: reward {:.3} -> {:.3} ({:+.0}%), structure {:.2} -> {:.2}",
            before.total,
            after.total,
            100.0 * gain,
            before.structure,
            after.structure
        ));
    }
    check(wins >= 2, format!("{wins}/3 seeds; {}", lines.join("; ")))
}

// ---------------------------------------------------------------- 6

fn mrpo_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst_moment = 0.0f64;
    let mut worst_affine = 0.0f64;
    for _ in 0..500 {
        let g = rng.gen_range(2..=16);
        let rewards: Vec<f64> = (0..g).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mean = rewards.iter().sum::<f64>() / g as f64;
        let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / g as f64).sqrt();
        if std < 1e-3 {
            continue;
        }
        let adv = group_advantages(&rewards).map_err(err)?;
        let m = adv.iter().sum::<f64>() / g as f64;
        let v = adv.iter().map(|a| (a - m).powi(2)).sum::<f64>() / g as f64;
        // The 1e-8 stabilizer in the denominator shrinks the variance by about 2e-8 / std.
        worst_moment = worst_moment.max(m.abs()).max(((v - 1.0).abs() - 2e-8 / std).max(0.0));
        let scale = rng.gen_range(0.1..10.0);
        let shift = rng.gen_range(-5.0..5.0);
        let moved: Vec<f64> = rewards.iter().map(|r| scale * r + shift).collect();
        let adv2 = group_advantages(&moved).map_err(err)?;
        for (a, b) in adv.iter().zip(&adv2) {
            worst_affine = worst_affine.max((a - b).abs());
        }
    }
    if worst_moment > 1e-6 || worst_affine > 1e-6 {
        return Err(format!("advantage moments off by {worst_moment:.1e}, affine drift {worst_affine:.1e}"));
    }

    for _ in 0..500 {
        let n = rng.gen_range(1..20);
        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(-8.0..0.0)).collect();
        let q: Vec<f64> = p.iter().map(|x| x + rng.gen_range(1e-4..2.0) * if rng.gen() { 1.0 } else { -1.0 }).collect();
        let same = kl_estimate(&p, &p).map_err(err)?;
        let diff = kl_estimate(&p, &q).map_err(err)?;
        if same.iter().any(|&k| k != 0.0) || diff.iter().any(|&k| !(k > 0.0)) {
            return Err("kl estimate is not zero exactly at equality and positive elsewhere".into());
        }
    }

    let cfg = small_config(6);
    let corpus = toy_corpus(6, Origin::Real, 0);
    let vocab = build_vocab(&[&corpus], cfg.dpsm.max_humans);
    let (params, net) = fresh_model(&cfg, &vocab).map_err(err)?;
    let prompts = build_prompts(&corpus, &params, &net, &vocab, &cfg.dpsm, 12).map_err(err)?;
    let prompt = &prompts[0];
    let soft = prompt.soft_prompt.as_deref();
    let g = 8;
    let cands: Vec<Vec<u32>> = (0..g)
        .map(|i| sample_response(&params, &prompt.context, soft, &cfg.mrpo.sampling, vocab.im_end_id(), i))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let logp: Vec<Vec<f64>> = cands
        .iter()
        .map(|c| continuation_log_probs(&params, &prompt.context, c, soft))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let rewards: Vec<f64> = (0..g).map(|_| rng.gen_range(0.0..1.0)).collect();
    let adv = group_advantages(&rewards).map_err(err)?;
    let kl: Vec<Vec<f64>> = logp.iter().map(|l| vec![0.3; l.len()]).collect();
    let j = mrpo_objective(&logp, &logp, &adv, &kl, 0.0).map_err(err)?;
    let mut tape = Tape::new();
    let mut j_tape = 0.0;
    for (l, a) in logp.iter().zip(&adv) {
        let v = tape.constant(Tensor::from_vec(l.len(), 1, l.clone()));
        let c = candidate_objective_on_tape(&mut tape, v, l, l, *a, 0.0).map_err(err)?;
        j_tape += tape.value(c).item() / g as f64;
    }
    if j.abs() > 1e-9 || j_tape.abs() > 1e-9 {
        return Err(format!("objective at the old policy with beta 0 is {j:.2e} / {j_tape:.2e}"));
    }

    let before = params.checksum();
    let mut mcfg = cfg.mrpo.clone();
    mcfg.steps = 6;
    mcfg.lr = 1e-3;
    let (updated, trace) = run_mrpo(&params, &prompts, &vocab, &mcfg, |_| {}).map_err(err)?;
    check(
        trace.reference_checksum == before && params.checksum() == before && updated.checksum() != before,
        format!(
            "moments {worst_moment:.1e}, affine {worst_affine:.1e}, objective {j:.1e}, reference checksum {}",
            &before[..12]
        ),
    )
}

// ---------------------------------------------------------------- 7

const PIECES: [&str; 16] = [
    "[S]", "[UNK]", "[", "]", "S", "UNK", "！", "？", "!", "?", "。", ".", "，", "好", "a", " ",
];

fn random_text(rng: &mut ChaCha8Rng) -> String {
    let len = if rng.gen_bool(0.05) {
        rng.gen_range(900..1300)
    } else {
        rng.gen_range(0..40)
    };
    (0..len).map(|_| PIECES[rng.gen_range(0..PIECES.len())]).collect()
}

fn random_session(rng: &mut ChaCha8Rng, i: usize) -> Session {
    loop {
        let n = rng.gen_range(2..12);
        let turns: Vec<(SpeakerRole, String)> = (0..n)
            .map(|_| {
                let role = if rng.gen_bool(0.4) {
                    SpeakerRole::Assistant
                } else {
                    SpeakerRole::Human(rng.gen_range(1..6))
                };
                let text: String = (0..rng.gen_range(1..30))
                    .map(|_| ["早晨", "好", "a", "b", " ", "？", "!", "你", "x"][rng.gen_range(0..9)])
                    .collect();
                (role, text)
            })
            .collect();
        if let Ok(s) = build_session(&turns, &format!("gen-{i}"), Origin::Real) {
            return s;
        }
    }
}

fn data_pipeline() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let raw = random_text(&mut rng);
        let once = clean_utterance(&raw);
        if clean_utterance(&once) != once {
            return Err(format!("cleaning is not idempotent on {raw:?}"));
        }
    }
    for i in 0..100 {
        let s = random_session(&mut rng, i);
        let back = parse_serialized(&serialize_session(&s), &s.id, s.origin).map_err(err)?;
        if back != s {
            return Err(format!("round trip changed session {i}"));
        }
    }
    let scenario = ScenarioConfig::default();
    let sessions = generate_batch(&scenario, &GeneratorBackend::Template, 100);
    let valid = sessions
        .iter()
        .filter(|s| s.as_ref().is_ok_and(|s| validate_simulated(s, &scenario).passed()))
        .count();
    let examples = [
        (clean_utterance("好呀[S]好呀[UNK]！") == "好呀好呀！"),
        (clean_utterance("真係？！！") == "真係！"),
        (clean_utterance(&"x".repeat(1005)) == "x".repeat(1000)),
    ];
    check(
        valid == 100 && examples.iter().all(|&b| b),
        format!("1000 idempotent, 100 round trips, {valid}/100 simulated sessions valid, examples {examples:?}"),
    )
}

// ---------------------------------------------------------------- 8

fn schedule_and_optimizer() -> Outcome {
    let cfg = ScheduleConfig::default();
    let total = 1000;
    let warm_end = (cfg.warmup_fraction * total as f64) as u64;
    let at0 = lr_at(0, total, &cfg);
    let at_end = lr_at(warm_end, total, &cfg);
    let big = 1_000_000_000u64;
    let boundary = (cfg.warmup_fraction * big as f64) as u64;
    let jump = (lr_at(boundary, big, &cfg) - lr_at(boundary - 1, big, &cfg)).abs();
    let slope = (cfg.peak_lr - cfg.floor_lr) / boundary as f64;
    if (at0 - 1e-7).abs() > 1e-18 || (at_end - 5e-5).abs() > 1e-18 || jump > 2.0 * slope {
        return Err(format!("lr_at(0) {at0:e}, lr_at(warmup end) {at_end:e}, boundary jump {jump:e}"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (lr, wd) = (1e-2, 0.1);
    let mut opt = AdamW::new(wd);
    let mut p = Tensor::from_vec(1, 1, vec![0.7]);
    let (mut w, mut m, mut v) = (0.7f64, 0.0f64, 0.0f64);
    let mut worst = 0.0f64;
    for t in 1..=100 {
        let g: f64 = rng.gen_range(-1.0..1.0);
        opt.step(vec![&mut p], &[Tensor::from_vec(1, 1, vec![g])], &[true], lr).map_err(err)?;
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let m_hat = m / (1.0 - 0.9f64.powi(t));
        let v_hat = v / (1.0 - 0.999f64.powi(t));
        w = w * (1.0 - lr * wd) - lr * m_hat / (v_hat.sqrt() + 1e-8);
        worst = worst.max((p.data()[0] - w).abs());
    }

    let start = vec![0.3, -1.2, 2.5, 0.0];
    let mut q = Tensor::from_vec(1, 4, start.clone());
    AdamW::new(wd)
        .step(vec![&mut q], &[Tensor::zeros(1, 4)], &[true], lr)
        .map_err(err)?;
    let exact = q.data().iter().zip(&start).all(|(a, b)| *a == b * (1.0 - lr * wd));
    check(
        worst < 1e-10 && exact,
        format!("lr_at(0) {at0:e}, lr_at(warmup end) {at_end:e}, boundary jump {jump:.1e}, AdamW drift {worst:.1e}, decay-only exact {exact}"),
    )
}

// ---------------------------------------------------------------- 9

fn gcsd(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_gcsd"))
        .args(args)
        .current_dir(dir)
        .output()
        .map_err(err)?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("gcsd {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))
    }
}

fn pipeline_run(dir: &Path) -> Result<Vec<u8>, String> {
    write_workspace(dir, 9)?;
    gcsd(dir, &["prepare-data", "--in", "raw_real.jsonl", "--out", "data/real.jsonl"])?;
    gcsd(dir, &["prepare-data", "--in", "raw_test.jsonl", "--out", "data/test.jsonl"])?;
    gcsd(dir, &["simulate", "--config", "config.json", "--n", "6", "--backend", "template"])?;
    gcsd(dir, &["sft", "--config", "config.json", "--stage", "both"])?;
    gcsd(dir, &["mrpo", "--config", "config.json", "--ckpt", "runs/sft.ckpt"])?;
    gcsd(dir, &["eval", "--ckpt", "runs/mrpo.ckpt", "--test", "data/test.jsonl", "--out", "runs/report.json"])?;
    std::fs::read(dir.join("runs/report.json")).map_err(err)
}

fn end_to_end() -> Outcome {
    let a = tempfile::tempdir().map_err(err)?;
    let b = tempfile::tempdir().map_err(err)?;
    let first = pipeline_run(a.path())?;
    let second = pipeline_run(b.path())?;
    let report: serde_json::Value = serde_json::from_slice(&first).map_err(err)?;
    check(
        first == second,
        format!("report.json identical across runs ({} bytes): {report}", first.len()),
    )
}
