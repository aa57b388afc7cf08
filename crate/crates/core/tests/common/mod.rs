#![allow(dead_code)]

use gcsd_core::corpus::{build_session, Origin, Session, SpeakerRole};
use gcsd_core::dpsm::DpsmConfig;
use gcsd_core::model::ModelConfig;
use gcsd_core::pipeline::TrainConfig;

const OPENERS: [&str; 5] = ["hello all", "good day", "welcome back", "nice to see you", "let us begin"];
const TOPICS: [&str; 6] = ["tea", "boats", "songs", "markets", "gardens", "trams"];
const REPLIES: [&str; 4] = ["i like it", "not sure", "yes indeed", "long ago"];

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

/// Desk-scale configuration for fast tests.
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
