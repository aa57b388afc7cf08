use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use gcsd_core::corpus::{corpus_stats, load_corpus, parse_raw_line, save_corpus, CorpusError, Session};
use gcsd_core::metrics::{write_details, MetricReport};
use gcsd_core::pgss::{generate_batch, ApiBackend, GeneratorBackend, PgssError};
use gcsd_core::pipeline::{
    build_vocab, chat_repl, evaluate_checkpoint, fresh_model, load_checkpoint, mrpo_stage,
    run_stage, save_checkpoint, train_two_stage, Checkpoint, PipelineError, Stage, TrainConfig,
};

#[derive(Parser)]
#[command(name = "gcsd", version, about = "Multi-party cognitive-stimulation dialogue training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Sim,
    Real,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Template,
    Api,
}

#[derive(Subcommand)]
enum Command {
    /// Clean raw transcripts into a corpus JSONL file.
    PrepareData {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate simulated sessions.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, value_enum, default_value_t = BackendArg::Template)]
        backend: BackendArg,
        /// Output file; defaults to `paths.sim_corpus`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Supervised training on simulated and/or real sessions.
    Sft {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value_t = StageArg::Both)]
        stage: StageArg,
    },
    /// Policy optimization from a supervised checkpoint.
    Mrpo {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Score a checkpoint on a test corpus.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print corpus statistics as JSON.
    Stats {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Interactive chat with a checkpoint.
    Chat {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Where the transcript is appended on exit.
        #[arg(long, default_value = "chat.jsonl")]
        transcript: PathBuf,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Self::new(e.exit_code() as u8, e.to_string())
    }
}

impl From<CorpusError> for Failure {
    fn from(e: CorpusError) -> Self {
        Self::new(3, e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::new(3, e.to_string())
    }
}

impl From<PgssError> for Failure {
    fn from(e: PgssError) -> Self {
        let code = if matches!(e, PgssError::InvalidConfig(_)) { 2 } else { 3 };
        Self::new(code, e.to_string())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn read_config(path: &Path) -> Result<TrainConfig, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::new(2, format!("{}: {e}", path.display())))?;
    Ok(TrainConfig::from_json(&text)?)
}

fn read_corpus(path: &Path) -> Result<Vec<Session>, Failure> {
    load_corpus(path).map_err(|e| Failure::new(3, format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &MetricReport) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::new(1, e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(fs::File::create(path)?))
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::PrepareData { input, out } => prepare_data(&input, &out),
        Command::Simulate {
            config,
            n,
            backend,
            out,
        } => simulate(&read_config(&config)?, n, backend, out),
        Command::Sft { config, stage } => sft(&read_config(&config)?, stage),
        Command::Mrpo { config, ckpt } => mrpo(&read_config(&config)?, &ckpt),
        Command::Eval { ckpt, test, out } => eval(&ckpt, &test, &out),
        Command::Stats { corpus } => {
            let c = read_corpus(&corpus)?;
            let report = corpus_stats(&c, |t| t.chars().count());
            println!(
                "{}",
                serde_json::to_string_pretty(&report).map_err(|e| Failure::new(1, e.to_string()))?
            );
            Ok(())
        }
        Command::Chat {
            ckpt,
            seed,
            transcript,
        } => {
            let ckpt = load_checkpoint(&ckpt)?;
            println!("loaded {:?} checkpoint; /as <participant> <text>, /seed <n>, /quit", ckpt.meta.stage);
            let stdin = std::io::stdin();
            chat_repl(&ckpt, stdin.lock(), std::io::stdout(), seed, Some(&transcript))?;
            Ok(())
        }
    }
}

fn prepare_data(input: &Path, out: &Path) -> Result<(), Failure> {
    let reader = BufReader::new(
        fs::File::open(input).map_err(|e| Failure::new(3, format!("{}: {e}", input.display())))?,
    );
    let mut corpus = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let session = parse_raw_line(&line, i + 1).map_err(|e| Failure::new(3, format!("line {}: {e}", i + 1)))?;
        corpus.push(session);
    }
    if corpus.is_empty() {
        return Err(Failure::new(3, "no sessions in input"));
    }
    drop(create(out)?);
    save_corpus(out, &corpus)?;
    log::info!("wrote {} sessions to {}", corpus.len(), out.display());
    Ok(())
}

fn simulate(cfg: &TrainConfig, n: usize, backend: BackendArg, out: Option<PathBuf>) -> Result<(), Failure> {
    cfg.scenario.validate()?;
    let backend = match backend {
        BackendArg::Template => GeneratorBackend::Template,
        BackendArg::Api => {
            let api = ApiBackend::from_env(cfg.api.clone());
            log::info!("requesting {n} sessions from {} ({})", cfg.api.endpoint, cfg.api.model);
            GeneratorBackend::ExternalApi(api)
        }
    };
    let mut sessions = Vec::with_capacity(n);
    let mut failures = 0usize;
    for (i, r) in generate_batch(&cfg.scenario, &backend, n).into_iter().enumerate() {
        match r {
            Ok(s) => sessions.push(s),
            Err(e) => {
                failures += 1;
                log::error!("session {i}: {e}");
            }
        }
    }
    let out = out.unwrap_or_else(|| cfg.paths.sim_corpus.clone());
    drop(create(&out)?);
    save_corpus(&out, &sessions)?;
    log::info!("wrote {} sessions to {}", sessions.len(), out.display());
    if failures > 0 {
        return Err(Failure::new(3, format!("{failures} of {n} sessions failed")));
    }
    Ok(())
}

fn write_stage_logs(
    cfg: &TrainConfig,
    tag: &str,
    report: &gcsd_core::pipeline::SftReport,
) -> Result<(), Failure> {
    let mut w = create(&cfg.paths.out_dir.join(format!("sft_{tag}_loss.jsonl")))?;
    for r in &report.losses {
        r.write_jsonl(&mut w)?;
    }
    w.flush()?;
    let mut w = create(&cfg.paths.out_dir.join(format!("sft_{tag}_prompts.jsonl")))?;
    report.trace.write_jsonl(&mut w)?;
    w.flush()?;
    Ok(())
}

fn stage_file(stage: Stage) -> &'static str {
    match stage {
        Stage::SimSFT => "sft_sim.ckpt",
        Stage::RealSFT => "sft.ckpt",
        Stage::MRPO => "mrpo.ckpt",
    }
}

fn log_loss(stage: Stage, r: &gcsd_core::objectives::LossRecord) {
    log::info!(
        "{stage:?} step {}: l_total {:.5} (gen {:.5}, csfal {:.5}, smooth {:.5})",
        r.step,
        r.l_total,
        r.l_gen,
        r.l_csfal,
        r.l_smooth
    );
}

fn sft(cfg: &TrainConfig, stage: StageArg) -> Result<(), Failure> {
    fs::create_dir_all(&cfg.paths.out_dir)?;
    let checkpoints: Vec<Checkpoint> = match stage {
        StageArg::Both => {
            let real = read_corpus(&cfg.paths.real_corpus)?;
            let sim = if cfg.sft.skip_sim_stage {
                Vec::new()
            } else {
                read_corpus(&cfg.paths.sim_corpus)?
            };
            let out = train_two_stage(&sim, &real, cfg, log_loss)?;
            for (c, r) in out.checkpoints.iter().zip(&out.reports) {
                write_stage_logs(cfg, if c.meta.stage == Stage::SimSFT { "sim" } else { "real" }, r)?;
            }
            out.checkpoints
        }
        StageArg::Sim | StageArg::Real => {
            let (stage, path, tag) = match stage {
                StageArg::Sim => (Stage::SimSFT, &cfg.paths.sim_corpus, "sim"),
                _ => (Stage::RealSFT, &cfg.paths.real_corpus, "real"),
            };
            let corpus = read_corpus(path)?;
            let start = match (&cfg.paths.init_ckpt, stage) {
                (Some(p), Stage::RealSFT) => Some(load_checkpoint(p)?),
                _ => None,
            };
            let (vocab, mut params, mut net, lineage) = match start {
                Some(c) => (c.vocab, c.params, c.net, c.meta.lineage),
                None => {
                    let vocab = build_vocab(&[&corpus], cfg.dpsm.max_humans);
                    let (p, n) = fresh_model(cfg, &vocab)?;
                    (vocab, p, n, Vec::new())
                }
            };
            let out = run_stage(stage, &corpus, &mut params, &mut net, &vocab, cfg, &lineage, |r| {
                log_loss(stage, r)
            })?;
            write_stage_logs(cfg, tag, &out.report)?;
            vec![Checkpoint {
                meta: out.meta,
                config: cfg.clone(),
                vocab,
                params,
                net,
            }]
        }
    };
    for c in &checkpoints {
        let path = cfg.paths.out_dir.join(stage_file(c.meta.stage));
        save_checkpoint(&path, c)?;
        log::info!("saved {:?} checkpoint to {}", c.meta.stage, path.display());
    }
    Ok(())
}

fn mrpo(cfg: &TrainConfig, ckpt: &Path) -> Result<(), Failure> {
    let sft = load_checkpoint(ckpt)?;
    let corpus = read_corpus(&cfg.paths.real_corpus)?;
    fs::create_dir_all(&cfg.paths.out_dir)?;
    let (out, trace) = mrpo_stage(&sft, &corpus, cfg, |r| {
        log::info!(
            "MRPO step {}: reward {:.4} (bleu4 {:.4}, sem {:.4}, dist2 {:.4}, struct {:.2}), kl {:.5}",
            r.step,
            r.mean_total,
            r.mean_bleu4,
            r.mean_sem,
            r.mean_dist2,
            r.struct_rate,
            r.mean_kl
        )
    })?;
    let mut w = create(&cfg.paths.out_dir.join("mrpo_rewards.jsonl"))?;
    trace.write_jsonl(&mut w)?;
    w.flush()?;
    let path = cfg.paths.out_dir.join(stage_file(Stage::MRPO));
    save_checkpoint(&path, &out)?;
    log::info!("saved MRPO checkpoint to {}", path.display());
    Ok(())
}

fn eval(ckpt: &Path, test: &Path, out: &Path) -> Result<(), Failure> {
    let ckpt = load_checkpoint(ckpt)?;
    let test = read_corpus(test)?;
    let (report, details) = evaluate_checkpoint(&ckpt, &test)?;
    drop(create(out)?);
    write_json(out, &report)?;
    let details_path = out.with_file_name("details.jsonl");
    let mut w = create(&details_path)?;
    write_details(&mut w, &details)?;
    w.flush()?;
    log::info!(
        "{} examples: ROUGE-L {:.4}, BLEU-2 {:.4}, BLEU-4 {:.4}, semantic {:.4}, Distinct-2 {:.4}",
        report.n_examples,
        report.rouge_l,
        report.bleu2,
        report.bleu4,
        report.semantic,
        report.distinct2
    );
    Ok(())
}
