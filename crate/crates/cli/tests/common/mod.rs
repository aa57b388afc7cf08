#![allow(dead_code)]

use std::path::Path;

use gcsd_core::corpus::{build_session, Origin, Session, SpeakerRole};
use gcsd_core::dpsm::DpsmConfig;
use gcsd_core::model::ModelConfig;
use gcsd_core::pipeline::TrainConfig;

const OPENERS: [&str; 5] = ["hello all", "good day", "welcome back", "nice to see you", "let us begin"];
const TOPICS: [&str; 6] = ["tea", "boats", "songs", "markets", "gardens", "trams"];
const REPLIES: [&str; 4] = ["i like it", "not sure", "yes indeed", "long ago"];
const RARE: &str = "αβγδεζηθικλμνξπρστφχψω";

/// Short multi-party sessions: the assistant opens, then two or three
/// humans and the assistant take turns.
pub fn toy_corpus(n: usize, origin: Origin, salt: usize) -> Vec<Session> {
    (0..n)
        .map(|i| {
            let k = i + salt;
            let humans = 2 + (k % 2) as u32;
            let mut turns = vec![(SpeakerRole::Assistant, OPENERS[k % OPENERS.len()].to_string())];
            for r in 0..3 {
                let h = (r as u32 + k as u32) % humans + 1;
                turns.push((SpeakerRole::Human(h), REPLIES[(k + r) % REPLIES.len()].to_string()));
                turns.push((
                    SpeakerRole::Assistant,
                    format!("tell me about {}", TOPICS[(k * 3 + r) % TOPICS.len()]),
                ));
            }
            build_session(&turns, &format!("toy-{salt}-{i}"), origin).unwrap()
        })
        .collect()
}

/// Sessions whose assistant replies echo a rare symbol the human just
/// mentioned, so each reply carries a planted low-frequency keyword.
pub fn keyword_corpus(n: usize, salt: usize) -> Vec<Session> {
    let rare: Vec<char> = RARE.chars().collect();
    (0..n)
        .map(|i| {
            let k = i + salt;
            let humans = 2 + (k % 2) as u32;
            let mut turns = vec![(SpeakerRole::Assistant, OPENERS[k % OPENERS.len()].to_string())];
            for r in 0..3 {
                let h = (r as u32 + k as u32) % humans + 1;
                let sym = rare[(k * 7 + r * 3) % rare.len()];
                turns.push((SpeakerRole::Human(h), format!("i saw {sym} near the {}", TOPICS[(k + r) % TOPICS.len()])));
                turns.push((SpeakerRole::Assistant, format!("so the {sym} was there")));
            }
            build_session(&turns, &format!("kw-{salt}-{i}"), Origin::Real).unwrap()
        })
        .collect()
}

/// Desk-scale configuration.
pub fn small_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.model = ModelConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_seq: 96,
        vocab_size: 0,
        init_seed: seed,
    };
    cfg.dpsm = DpsmConfig {
        max_humans: 4,
        hidden1: 16,
        hidden2: 8,
        init_seed: seed + 100,
        ..DpsmConfig::default()
    };
    cfg.sft.grad_accum = 4;
    cfg.sft.schedule.peak_lr = 3e-3;
    cfg.mrpo.steps = 4;
    cfg.mrpo.group_size = 4;
    cfg.mrpo.sampling.max_new = 12;
    cfg.eval.sampling.max_new = 12;
    cfg.seed = seed;
    cfg
}

fn speaker_label(role: SpeakerRole) -> String {
    match role {
        SpeakerRole::Assistant => "Therapist".into(),
        SpeakerRole::Human(i) => format!("Patient_{i}"),
    }
}

/// Raw `prepare-data` input: one `{"id", "dialogue": [records]}` per line.
pub fn raw_lines(corpus: &[Session]) -> String {
    corpus
        .iter()
        .map(|s| {
            let records: Vec<serde_json::Value> = s
                .utterances
                .iter()
                .map(|u| serde_json::json!({"turn": u.turn, "speaker": speaker_label(u.speaker), "dialogue": u.text}))
                .collect();
            serde_json::json!({"id": s.id, "dialogue": records}).to_string() + "\n"
        })
        .collect()
}

/// Writes `config.json`, `raw_real.jsonl` and `raw_test.jsonl` into `dir`
/// for a small end-to-end run with every path pointing inside `dir`.
pub fn write_workspace(dir: &Path, seed: u64) -> Result<TrainConfig, String> {
    let mut cfg = small_config(seed);
    cfg.model.d_model = 32;
    cfg.model.n_heads = 4;
    cfg.model.d_ff = 64;
    cfg.model.max_seq = 128;
    cfg.dpsm.max_humans = 6;
    cfg.mrpo.steps = 20;
    cfg.eval.sampling.max_new = 24;
    cfg.mrpo.sampling.max_new = 24;
    cfg.paths.sim_corpus = dir.join("data/sim.jsonl");
    cfg.paths.real_corpus = dir.join("data/real.jsonl");
    cfg.paths.test_corpus = dir.join("data/test.jsonl");
    cfg.paths.out_dir = dir.join("runs");
    let io = |e: std::io::Error| e.to_string();
    let text = serde_json::to_string_pretty(&cfg).map_err(|e| e.to_string())?;
    std::fs::write(dir.join("config.json"), text).map_err(io)?;
    std::fs::write(dir.join("raw_real.jsonl"), raw_lines(&toy_corpus(16, Origin::Real, 0))).map_err(io)?;
    std::fs::write(dir.join("raw_test.jsonl"), raw_lines(&toy_corpus(4, Origin::Real, 40))).map_err(io)?;
    Ok(cfg)
}
