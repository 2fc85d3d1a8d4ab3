use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use ebclkit::config::PipelineConfig;
use ebclkit::pipeline::{self, Ctx, ModelSource};
use ebclkit::workdir::Workdir;

/// Event-based contrastive pretraining on clinical event streams.
#[derive(Debug, Parser)]
#[command(name = "ebclkit", version, about)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// Pipeline configuration (JSON). Missing sections take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config and every nested seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact directory; overrides the config.
    #[arg(long, global = true, env = "EBCLKIT_WORKDIR")]
    workdir: Option<PathBuf>,
    /// Replace existing stage outputs.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic cohort to <workdir>/data.
    Generate,
    /// Detect events, build the vocabulary and split patients.
    Preprocess,
    /// Pretrain the configured objective and export embeddings.
    Pretrain,
    /// Fine-tune a backbone on a task over several seeds.
    Finetune(ModelArg),
    /// Fit an L2-regularised logistic probe on frozen embeddings.
    Probe(ModelArg),
    /// Nearest-neighbour evaluation on frozen embeddings.
    Knn(ModelArg),
    /// Cluster embeddings and compare outcomes across clusters.
    Cluster(ModelArg),
    /// Collect evaluation reports into a comparison table.
    Report,
    /// Inspect the configuration.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
}

#[derive(Debug, Args)]
struct ModelArg {
    /// Backbone to evaluate.
    #[arg(long, value_enum, default_value = "pretrained")]
    model: ModelSource,
}

#[derive(Debug, Subcommand)]
enum ConfigAction {
    /// Print the default configuration.
    PrintDefaults,
    /// Print the effective configuration after overrides and its hash.
    Show,
}

fn load_config(g: &Global) -> Result<PipelineConfig> {
    let base = match &g.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    let config = base.resolve(g.seed, g.workdir.clone());
    config.validate()?;
    Ok(config)
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Config { action } = &cli.command {
        match action {
            ConfigAction::PrintDefaults => {
                ebclkit::emit(&(serde_json::to_string_pretty(&PipelineConfig::default())? + "\n"))?;
            }
            ConfigAction::Show => {
                let c = load_config(&cli.global)?;
                ebclkit::emit(&(serde_json::to_string_pretty(&c)? + "\n"))?;
                eprintln!("config hash {}", c.hash());
            }
        }
        return Ok(());
    }
    let config = load_config(&cli.global)?;
    let root = config.workdir()?.to_path_buf();
    let workdir = Workdir::lock(&root).with_context(|| format!("opening workdir {}", root.display()))?;
    let ctx = Ctx {
        hash: config.hash(),
        config,
        workdir,
        force: cli.global.force,
    };
    match cli.command {
        Command::Generate => pipeline::generate(&ctx),
        Command::Preprocess => pipeline::preprocess(&ctx),
        Command::Pretrain => pipeline::pretrain(&ctx),
        Command::Finetune(m) => pipeline::finetune_stage(&ctx, m.model),
        Command::Probe(m) => pipeline::probe_stage(&ctx, m.model),
        Command::Knn(m) => pipeline::knn_stage(&ctx, m.model),
        Command::Cluster(m) => pipeline::cluster_stage(&ctx, m.model),
        Command::Report => pipeline::report_stage(&ctx),
        Command::Config { .. } => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
