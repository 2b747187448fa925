use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use decay_bench::pipeline::{Experiment, ExperimentConfig, Stage, StageOutcome};
use decay_bench::synthetic::{generate_decay_study, DecayStudy};
use decay_bench::Error;

#[derive(Parser)]
#[command(name = "decay-bench", version, about = "Deepfake detector training and cross-version decay experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Parallel extraction workers.
    #[arg(long)]
    workers: Option<usize>,
    /// Global seed, overriding the config's.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample and crop faces from every manifest video into the frame cache.
    Extract(RunArgs),
    /// Train the per-frame classifier.
    TrainFrame(RunArgs),
    /// Store per-frame embeddings of every extracted video.
    Embed(RunArgs),
    /// Cross-validated training of the temporal classifier.
    TrainTemporal(RunArgs),
    /// Fine-tuning sweep on the newer dataset version.
    Finetune(RunArgs),
    /// Score every model on every test set.
    Evaluate(RunArgs),
    /// Tables and figures from the evaluation outputs.
    Report(RunArgs),
    /// Every stage in order.
    RunAll(RunArgs),
    /// Generate a two-version synthetic dataset and an experiment config for it.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 40)]
        identities: usize,
        #[arg(long, default_value_t = 6)]
        videos_per_identity: usize,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn open(args: &RunArgs) -> decay_bench::Result<Experiment> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(w) = args.workers {
        config.workers = w;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    Experiment::open(config)
}

fn stage_json(outcomes: &[StageOutcome], experiment: &Experiment) -> serde_json::Value {
    serde_json::json!({
        "config_hash": experiment.config_hash,
        "output": experiment.root(),
        "stages": outcomes,
    })
}

fn run(command: Command) -> decay_bench::Result<serde_json::Value> {
    let (args, stage) = match command {
        Command::Synth { out, identities, videos_per_identity, frames, seed } => {
            let study = DecayStudy { identities, videos_per_identity, frames, seed, ..Default::default() };
            let config = generate_decay_study(&out, &study)?;
            return Ok(serde_json::json!({ "config": config }));
        }
        Command::RunAll(args) => {
            let experiment = open(&args)?;
            let outcomes = experiment.run_all()?;
            return Ok(stage_json(&outcomes, &experiment));
        }
        Command::Extract(a) => (a, Stage::Extract),
        Command::TrainFrame(a) => (a, Stage::TrainFrame),
        Command::Embed(a) => (a, Stage::Embed),
        Command::TrainTemporal(a) => (a, Stage::TrainTemporal),
        Command::Finetune(a) => (a, Stage::Finetune),
        Command::Evaluate(a) => (a, Stage::Evaluate),
        Command::Report(a) => (a, Stage::Report),
    };
    let experiment = open(&args)?;
    let outcome = experiment.run(stage)?;
    Ok(stage_json(&[outcome], &experiment))
}

fn error_json(e: &Error) -> serde_json::Value {
    let mut v = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
    if let Error::MissingUpstream { stage, fingerprint } = e {
        v["stage"] = stage.clone().into();
        v["fingerprint"] = fingerprint.clone().into();
    }
    v
}

fn init_logging() {
    tracing_subscriber::fmt()
        .json()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
}

fn main() -> ExitCode {
    init_logging();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            tracing::error!(kind = e.kind(), error = %e, "command failed");
            println!("{}", error_json(&e));
            ExitCode::from(if matches!(e, Error::Config(_) | Error::Parse { .. }) { 2 } else { 1 })
        }
    }
}
