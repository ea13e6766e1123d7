use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use elrea_core::pipeline::{run_all, run_stage, Method, PipelineConfig, Run, Stage, Variant};
use elrea_core::Result;

#[derive(Parser)]
#[command(
    name = "elrea",
    version,
    about = "Gradient-clustered expert adapters with routed logit ensembles"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Derive every named seed from this value.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Keep only the k highest-weight experts (plus base).
    #[arg(long, global = true)]
    top_k: Option<usize>,
    #[arg(long, global = true, default_value = "elrea")]
    method: String,
}

#[derive(Subcommand)]
enum Command {
    /// Write the train/test/pretrain corpora and the vocabulary.
    Synth,
    /// Pretrain the backbone on the pretraining corpus.
    InitBackbone,
    TrainBase,
    GradFeatures,
    Cluster,
    TrainExperts,
    Route,
    Generate,
    Evaluate,
    /// Train a comparison method: mole, lora-ens or random-cluster.
    Baseline {
        name: String,
    },
    Report,
    /// Every stage, the configured baselines, evaluations and the report.
    All,
    /// Print the effective configuration.
    ShowConfig,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => {
            let mut c = PipelineConfig::default();
            if let Some(dir) = std::env::var_os(elrea_core::pipeline::OUT_DIR_ENV) {
                c.run_dir = dir.into();
            }
            c
        }
    };
    if let Some(s) = cli.seed {
        config.reseed(s);
    }
    if let Some(k) = cli.top_k {
        config.top_k = Some(k);
        config.validate()?;
    }
    let variant = Variant::new(Method::from_name(&cli.method)?, config.top_k);
    let stage = match cli.command {
        Command::Synth => Stage::Synth,
        Command::InitBackbone => Stage::InitBackbone,
        Command::TrainBase => Stage::TrainBase,
        Command::GradFeatures => Stage::GradFeatures,
        Command::Cluster => Stage::Cluster,
        Command::TrainExperts => Stage::TrainExperts,
        Command::Route => Stage::Route,
        Command::Generate => Stage::Generate(variant),
        Command::Evaluate => Stage::Evaluate(variant),
        Command::Baseline { name } => Stage::Baseline(Method::from_name(&name)?),
        Command::Report => Stage::Report,
        Command::All => return run_all(&Run::new(config), None),
        Command::ShowConfig => {
            println!(
                "{}",
                toml::to_string(&config).map_err(|e| elrea_core::Error::Config(e.to_string()))?
            );
            return Ok(());
        }
    };
    let run = Run::new(config);
    run_stage(&run, stage)?;
    eprintln!(
        "[elrea] {} done -> {}",
        stage.command(),
        run.path(stage).display()
    );
    Ok(())
}
