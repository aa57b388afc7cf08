//! End-to-end training: configuration, the two supervised stages, the
//! policy phase, checkpoints and the interactive chat loop.

mod chat;
mod checkpoint;
mod sft;

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{CorpusError, Session};
use crate::dialogue::{DialogueError, ModelResponder};
use crate::dpsm::{DpsmConfig, DpsmError, SoftPromptNetParams};
use crate::metrics::{evaluate_corpus, ExampleDetail, MetricReport, MetricsError};
use crate::model::{init_model, ModelConfig, ModelError, ModelParams, Parameters, SamplingConfig, Vocab};
use crate::mrpo::{build_prompts, run_mrpo, MRPOConfig, MrpoError, RewardRecord, RewardTrace};
use crate::objectives::{LossRecord, ObjectiveError, SFTLossWeights};
use crate::optim::{OptimError, ScheduleConfig};
use crate::pgss::{ApiConfig, ScenarioConfig};

pub use chat::{chat_repl, ChatCommand, ChatSession};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use sft::{
    keyword_attention, prompt_trace, sft_example, sft_phase, KeywordIndex, SftOutcome, SftReport,
    SftSetup,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dpsm(#[from] DpsmError),
    #[error(transparent)]
    Dialogue(#[from] DialogueError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Mrpo(#[from] MrpoError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl PipelineError {
    /// Process exit code: 2 config, 3 data, 4 numeric failure, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Model(ModelError::InvalidConfig(_)) => 2,
            Self::Mrpo(MrpoError::InvalidConfig(_) | MrpoError::GroupTooSmall(_)) => 2,
            Self::Objective(ObjectiveError::InvalidWeights(_)) => 2,
            Self::NonFinite(_) | Self::Objective(ObjectiveError::NonFinite(_)) => 4,
            Self::Mrpo(MrpoError::NonFinite(_)) => 4,
            Self::Data(_) | Self::Corpus(_) | Self::Checkpoint(_) | Self::Metrics(_) => 3,
            Self::Io(_) => 3,
            _ => 1,
        }
    }
}

/// Supervised-phase hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SftConfig {
    pub weights: SFTLossWeights,
    pub epochs_sim: usize,
    pub epochs_real: usize,
    pub micro_batch: usize,
    pub grad_accum: usize,
    pub schedule: ScheduleConfig,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub kappa: f64,
    pub k_fraction: f64,
    /// Train on real data only, without the simulated stage.
    pub skip_sim_stage: bool,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            weights: SFTLossWeights::default(),
            epochs_sim: 1,
            epochs_real: 1,
            micro_batch: 1,
            grad_accum: 16,
            schedule: ScheduleConfig::default(),
            weight_decay: 0.01,
            grad_clip: 1.0,
            kappa: 1.0,
            k_fraction: 0.2,
            skip_sim_stage: false,
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        self.weights
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        let s = &self.schedule;
        if !(s.warmup_fraction > 0.0 && s.warmup_fraction < 1.0) {
            return Err(PipelineError::Config("warmup_fraction must lie in (0, 1)".into()));
        }
        if !(s.peak_lr > 0.0 && s.floor_lr > 0.0 && s.floor_lr <= s.peak_lr) {
            return Err(PipelineError::Config(
                "learning rates must be > 0 with floor_lr <= peak_lr".into(),
            ));
        }
        if self.micro_batch != 1 {
            return Err(PipelineError::Config("micro_batch must be 1".into()));
        }
        if self.grad_accum == 0 {
            return Err(PipelineError::Config("grad_accum must be >= 1".into()));
        }
        if !(self.weight_decay >= 0.0 && self.grad_clip > 0.0) {
            return Err(PipelineError::Config(
                "weight_decay must be >= 0 and grad_clip > 0".into(),
            ));
        }
        if !(self.k_fraction > 0.0 && self.k_fraction <= 1.0) || !self.kappa.is_finite() {
            return Err(PipelineError::Config(
                "k_fraction must lie in (0, 1] and kappa must be finite".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub sampling: SamplingConfig,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            sampling: SamplingConfig::default(),
            seed: 0,
        }
    }
}

/// File locations used by the CLI. Relative paths resolve against the
/// working directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub sim_corpus: PathBuf,
    pub real_corpus: PathBuf,
    pub test_corpus: PathBuf,
    pub out_dir: PathBuf,
    /// Starting checkpoint for `--stage real`; absent means a fresh model.
    pub init_ckpt: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            sim_corpus: "data/sim.jsonl".into(),
            real_corpus: "data/real.jsonl".into(),
            test_corpus: "data/test.jsonl".into(),
            out_dir: "runs".into(),
            init_ckpt: None,
        }
    }
}

/// Every hyperparameter of a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub dpsm: DpsmConfig,
    pub sft: SftConfig,
    pub mrpo: MRPOConfig,
    pub scenario: ScenarioConfig,
    pub api: ApiConfig,
    pub eval: EvalConfig,
    pub seed: u64,
    pub paths: PathsConfig,
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.sft.validate()?;
        self.mrpo
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        let m = &self.model;
        if m.d_model == 0 || m.n_layers == 0 || m.n_heads == 0 || m.d_ff == 0 || m.max_seq < 4 {
            return Err(PipelineError::Config(
                "model dimensions must be >= 1 and max_seq >= 4".into(),
            ));
        }
        if m.d_model % m.n_heads != 0 {
            return Err(PipelineError::Config("d_model must be divisible by n_heads".into()));
        }
        if self.dpsm.max_humans == 0 || self.dpsm.hidden1 == 0 || self.dpsm.hidden2 == 0 {
            return Err(PipelineError::Config("dpsm dimensions must be >= 1".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    SimSFT,
    RealSFT,
    MRPO,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: Stage,
    pub step: u64,
    pub config_hash: String,
    pub metrics: BTreeMap<String, f64>,
    /// Every stage that produced these weights, oldest first.
    pub lineage: Vec<Stage>,
}

/// Character vocabulary over every utterance of `corpora`.
pub fn build_vocab(corpora: &[&[Session]], max_humans: u32) -> Vocab {
    Vocab::build(
        corpora
            .iter()
            .flat_map(|c| c.iter())
            .flat_map(|s| s.utterances.iter().map(|u| u.text.as_str())),
        max_humans,
    )
}

/// Seeded model and soft-prompt network sized for `vocab`.
pub fn fresh_model(
    cfg: &TrainConfig,
    vocab: &Vocab,
) -> Result<(ModelParams, SoftPromptNetParams), PipelineError> {
    if vocab.max_humans() != cfg.dpsm.max_humans {
        return Err(PipelineError::Config(format!(
            "vocabulary has {} speaker slots but dpsm.max_humans is {}",
            vocab.max_humans(),
            cfg.dpsm.max_humans
        )));
    }
    let mut mc = cfg.model.clone();
    mc.vocab_size = vocab.len();
    let mut params = init_model(&mc)?;
    let mut net = SoftPromptNetParams::init(cfg.dpsm.input_dim(mc.d_model), &cfg.dpsm, mc.d_model);
    params.snap_to_f32();
    net.snap_to_f32();
    Ok((params, net))
}

fn check_speakers(corpus: &[Session], max_humans: u32) -> Result<(), PipelineError> {
    for s in corpus {
        s.validate()?;
        if s.human_count() > max_humans {
            return Err(PipelineError::Data(format!(
                "session {} has {} human speakers, more than max_humans {}",
                s.id,
                s.human_count(),
                max_humans
            )));
        }
    }
    Ok(())
}

/// Result of one supervised stage.
pub struct StageOutcome {
    pub meta: CheckpointMeta,
    pub report: SftReport,
}

/// Runs one supervised stage and builds its checkpoint metadata.
pub fn run_stage(
    stage: Stage,
    corpus: &[Session],
    params: &mut ModelParams,
    net: &mut SoftPromptNetParams,
    vocab: &Vocab,
    cfg: &TrainConfig,
    lineage: &[Stage],
    on_step: impl FnMut(&LossRecord),
) -> Result<StageOutcome, PipelineError> {
    if corpus.is_empty() {
        return Err(PipelineError::Data(format!("{stage:?} corpus is empty")));
    }
    check_speakers(corpus, cfg.dpsm.max_humans)?;
    let (epochs, tag) = match stage {
        Stage::SimSFT => (cfg.sft.epochs_sim, 1),
        Stage::RealSFT => (cfg.sft.epochs_real, 2),
        Stage::MRPO => return Err(PipelineError::Config("MRPO is not a supervised stage".into())),
    };
    let seed = crate::model::derive_seed(cfg.seed, &[tag]);
    let report = sft_phase(corpus, params, net, vocab, &cfg.dpsm, &cfg.sft, epochs, seed, on_step)?;
    let mut metrics = BTreeMap::new();
    metrics.insert("mean_l_gen".into(), report.mean_l_gen());
    if let Some(last) = report.losses.last() {
        metrics.insert("final_l_total".into(), last.l_total);
    }
    let mut lineage = lineage.to_vec();
    lineage.push(stage);
    Ok(StageOutcome {
        meta: CheckpointMeta {
            stage,
            step: report.optimizer_steps,
            config_hash: cfg.hash(),
            metrics,
            lineage,
        },
        report,
    })
}

/// Output of [`train_two_stage`].
pub struct TwoStageOutcome {
    pub vocab: Vocab,
    pub params: ModelParams,
    pub net: SoftPromptNetParams,
    /// Checkpoint after each stage that ran, in order.
    pub checkpoints: Vec<Checkpoint>,
    pub reports: Vec<SftReport>,
}

/// Continued training on simulated sessions, then fine-tuning on real ones.
/// With `sft.skip_sim_stage` only the real stage runs. Each stage has its
/// own optimizer state and schedule horizon.
pub fn train_two_stage(
    sim: &[Session],
    real: &[Session],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(Stage, &LossRecord),
) -> Result<TwoStageOutcome, PipelineError> {
    cfg.validate()?;
    if real.is_empty() || (!cfg.sft.skip_sim_stage && sim.is_empty()) {
        return Err(PipelineError::Data("both corpora must be non-empty".into()));
    }
    let vocab = build_vocab(&[sim, real], cfg.dpsm.max_humans);
    let (mut params, mut net) = fresh_model(cfg, &vocab)?;
    let mut checkpoints = Vec::new();
    let mut reports = Vec::new();
    let mut lineage = Vec::new();
    let stages: &[(Stage, &[Session])] = if cfg.sft.skip_sim_stage {
        &[(Stage::RealSFT, real)]
    } else {
        &[(Stage::SimSFT, sim), (Stage::RealSFT, real)]
    };
    for &(stage, corpus) in stages {
        let out = run_stage(stage, corpus, &mut params, &mut net, &vocab, cfg, &lineage, |r| {
            on_step(stage, r)
        })?;
        lineage = out.meta.lineage.clone();
        checkpoints.push(Checkpoint {
            meta: out.meta,
            config: cfg.clone(),
            vocab: vocab.clone(),
            params: params.clone(),
            net: net.clone(),
        });
        reports.push(out.report);
    }
    Ok(TwoStageOutcome {
        vocab,
        params,
        net,
        checkpoints,
        reports,
    })
}

/// Policy phase starting from a supervised checkpoint. Prompts are built
/// from `corpus`; the returned checkpoint carries the updated model and the
/// unchanged soft-prompt network.
pub fn mrpo_stage(
    sft: &Checkpoint,
    corpus: &[Session],
    cfg: &TrainConfig,
    on_step: impl FnMut(&RewardRecord),
) -> Result<(Checkpoint, RewardTrace), PipelineError> {
    cfg.validate()?;
    check_speakers(corpus, cfg.dpsm.max_humans)?;
    let prompts = build_prompts(
        corpus,
        &sft.params,
        &sft.net,
        &sft.vocab,
        &cfg.dpsm,
        cfg.mrpo.sampling.max_new,
    )?;
    if prompts.is_empty() {
        return Err(PipelineError::Data("no assistant turns to build prompts from".into()));
    }
    let (mut params, trace) = run_mrpo(&sft.params, &prompts, &sft.vocab, &cfg.mrpo, on_step)?;
    params.snap_to_f32();
    let mut metrics = BTreeMap::new();
    if let Some(last) = trace.records.last() {
        metrics.insert("final_mean_total".into(), last.mean_total);
        metrics.insert("final_struct_rate".into(), last.struct_rate);
    }
    let mut lineage = sft.meta.lineage.clone();
    lineage.push(Stage::MRPO);
    Ok((
        Checkpoint {
            meta: CheckpointMeta {
                stage: Stage::MRPO,
                step: cfg.mrpo.steps,
                config_hash: cfg.hash(),
                metrics,
                lineage,
            },
            config: cfg.clone(),
            vocab: sft.vocab.clone(),
            params,
            net: sft.net.clone(),
        },
        trace,
    ))
}

/// Samples a reply for every assistant turn of `test` with the checkpoint's
/// evaluation settings and scores it against the reference.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    test: &[Session],
) -> Result<(MetricReport, Vec<ExampleDetail>), PipelineError> {
    let responder = ModelResponder {
        params: &ckpt.params,
        net: &ckpt.net,
        vocab: &ckpt.vocab,
        dpsm: &ckpt.config.dpsm,
        sampling: ckpt.config.eval.sampling.clone(),
    };
    Ok(evaluate_corpus(
        &responder,
        test,
        &ckpt.vocab,
        ckpt.params.token_embedding(),
        ckpt.config.eval.seed,
    )?)
}
