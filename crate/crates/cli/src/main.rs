use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use capreward_core::config::{schema, RunConfig};
use capreward_core::metrics::{format_csv, format_table};
use capreward_core::pipeline::{collect_reports, Pipeline, Stage};
use capreward_core::training::RewardKind;
use clap::{Parser, Subcommand, ValueEnum};

const DEFAULT_OUT_DIR: &str = "runs/default";

#[derive(Debug, Parser)]
#[command(name = "capreward", version, about = "Captioning with a self-trained discriminator reward")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Run directory. Overrides `out_dir` in the config.
    #[arg(long, global = true, env = "CAPREWARD_OUT_DIR")]
    out_dir: Option<PathBuf>,

    /// Worker threads for tensor kernels.
    #[arg(long, global = true, env = "CAPREWARD_THREADS")]
    threads: Option<usize>,

    /// Single-threaded execution for bitwise-reproducible artifacts.
    #[arg(long, global = true)]
    deterministic: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic dataset, vocabulary and splits.
    GenData,
    /// Run one pipeline stage.
    RunStage {
        stage: StageArg,
        /// Reward for `train-scst`.
        #[arg(long, value_enum)]
        reward: Option<RewardArg>,
    },
    /// Run every stage in order, skipping ones already complete.
    RunAll,
    /// Join the evaluation reports of one or more runs into a table.
    Report {
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Print the JSON schema of the run configuration.
    Schema,
    /// Print the default run configuration as TOML.
    DefaultConfig,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StageArg {
    TrainXe,
    PretrainEncoder,
    TrainRewardCaptioner,
    MineNegatives,
    FinetuneDiscriminator,
    TrainScst,
    Evaluate,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum RewardArg {
    Cider,
    Raw,
    Discriminator,
}

impl From<RewardArg> for RewardKind {
    fn from(r: RewardArg) -> Self {
        match r {
            RewardArg::Cider => RewardKind::Cider,
            RewardArg::Raw => RewardKind::RawScore,
            RewardArg::Discriminator => RewardKind::Discriminator,
        }
    }
}

fn stage_of(stage: StageArg, reward: Option<RewardArg>) -> anyhow::Result<Stage> {
    if reward.is_some() && !matches!(stage, StageArg::TrainScst) {
        bail!("--reward only applies to train-scst");
    }
    Ok(match stage {
        StageArg::TrainXe => Stage::TrainXe,
        StageArg::PretrainEncoder => Stage::PretrainEncoder,
        StageArg::TrainRewardCaptioner => Stage::TrainRewardCaptioner,
        StageArg::MineNegatives => Stage::MineNegatives,
        StageArg::FinetuneDiscriminator => Stage::FinetuneDiscriminator,
        StageArg::Evaluate => Stage::Evaluate,
        StageArg::TrainScst => match reward {
            Some(r) => Stage::TrainScst(r.into()),
            None => bail!("train-scst needs --reward (cider, raw or discriminator)"),
        },
    })
}

fn load_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            RunConfig::from_toml(&text).with_context(|| format!("loading {}", p.display()))
        }
    }
}

fn configure_threads(cli: &Cli) -> anyhow::Result<()> {
    let threads = if cli.deterministic { Some(1) } else { cli.threads };
    if let Some(n) = threads {
        if n == 0 {
            bail!("thread count must be positive");
        }
        // Read by the tensor backend's thread pool on first use.
        std::env::set_var("RAYON_NUM_THREADS", n.to_string());
    }
    Ok(())
}

fn open_pipeline(cli: &Cli) -> anyhow::Result<Pipeline> {
    let cfg = load_config(cli.config.as_deref())?;
    let root = cli
        .out_dir
        .clone()
        .or_else(|| cfg.out_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
    Ok(Pipeline::open(cfg, &root)?)
}

fn log_outcome(outcome: &capreward_core::pipeline::StageOutcome) {
    let verb = if outcome.ran { "completed" } else { "up to date" };
    println!("{}: {verb}", outcome.stage);
    for (path, hash) in &outcome.outputs {
        log::info!("  {path} {}", &hash[..12.min(hash.len())]);
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    configure_threads(&cli)?;
    match &cli.command {
        Command::Schema => {
            println!("{}", serde_json::to_string_pretty(&schema())?);
        }
        Command::DefaultConfig => {
            print!("{}", RunConfig::default().to_toml()?);
        }
        Command::GenData => {
            let mut p = open_pipeline(&cli)?;
            log_outcome(&p.run_stage(Stage::GenData)?);
        }
        Command::RunStage { stage, reward } => {
            let stage = stage_of(*stage, *reward)?;
            let mut p = open_pipeline(&cli)?;
            log_outcome(&p.run_stage(stage)?);
        }
        Command::RunAll => {
            let mut p = open_pipeline(&cli)?;
            for stage in Stage::full_pipeline() {
                log_outcome(&p.run_stage(stage)?);
            }
            print!("{}", format_table(&p.reports()?)?);
        }
        Command::Report { run_dirs, csv } => {
            let reports = collect_reports(run_dirs)?;
            print!("{}", format_table(&reports)?);
            if let Some(path) = csv {
                std::fs::write(path, format_csv(&reports)?).with_context(|| format!("writing {}", path.display()))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
