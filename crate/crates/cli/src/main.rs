mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::{Overrides, RunConfig, SEED_ENV};

#[derive(Parser, Debug)]
#[command(name = "tristream", version, about = "Three-stream atomistic encoder: pretraining, fine-tuning, retrieval and verification")]
struct Cli {
    /// TOML run configuration layered over the built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed; overrides the config file and the environment.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single worker unless --workers is given; echoes the full config.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Validate structure files (or generate a synthetic set) and write train/val/test splits with a manifest.
    Ingest(IngestArgs),
    /// Self-supervised pretraining; writes a checkpoint and a loss log.
    Pretrain(PretrainArgs),
    /// Supervised energy/force fine-tuning.
    Finetune(FinetuneArgs),
    /// Encode a dataset into a per-stream embedding index.
    Embed(EmbedArgs),
    /// Nearest-neighbor queries and recall@k over an index.
    Retrieve(RetrieveArgs),
    /// Train a probe on frozen embeddings.
    Probe(ProbeArgs),
    /// Run a numerical verification suite; exits 1 on any failed check.
    Verify(VerifyArgs),
    /// Summarize training logs and metrics as tables.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Synthetic {
    /// Labelled clusters from a species-dependent pair potential.
    Pair,
    /// Composition family × geometry family crystals.
    Retrieval,
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    /// Extended-XYZ files or dataset manifests.
    pub inputs: Vec<PathBuf>,
    #[arg(long, value_enum)]
    pub synthetic: Option<Synthetic>,
    /// Structures (pair) or composition families (retrieval).
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = 0.1)]
    pub test_fraction: f64,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// Structures (extended-XYZ or manifest; manifests use the train split).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Resume from or start at this checkpoint.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Conservative,
    Direct,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Evaluation set (defaults to the manifest's val split).
    #[arg(long)]
    pub held_out: Option<PathBuf>,
    /// Pretrained checkpoint to start from.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
}

#[derive(Args, Debug)]
pub struct EmbedArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// comp, struct, int or joint.
    #[arg(long, default_value = "joint")]
    pub stream: String,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Record id to query.
    #[arg(long)]
    pub query: Option<usize>,
    /// Also report recall@k for element_set or space_group.
    #[arg(long)]
    pub recall: Option<String>,
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long, default_value = "joint")]
    pub stream: String,
    /// crystal_system, majority_element, formation_energy or mean_nn_distance.
    #[arg(long)]
    pub target: String,
    #[arg(long, value_enum, default_value_t = HeadArg::Linear)]
    pub head: HeadArg,
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    /// Shuffled-label control run.
    #[arg(long)]
    pub shuffle: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum HeadArg {
    Linear,
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SuiteArg {
    /// Energy–force coupling identities, decoupling and rank bounds.
    Theory,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[arg(long, value_enum, default_value_t = SuiteArg::Theory)]
    pub suite: SuiteArg,
    #[arg(long)]
    pub trials: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Directory holding logs (defaults to the output directory).
    #[arg(long)]
    pub logs: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let flags = Overrides {
        seed: cli.seed,
        deterministic: cli.deterministic,
        workers: cli.workers,
        out: cli.out.clone(),
    };
    let env_seed = std::env::var(SEED_ENV).ok();
    let cfg = RunConfig::load(cli.config.as_deref()).and_then(|c| c.layer(env_seed.as_deref(), &flags));
    let result = cfg.and_then(|cfg| commands::run(cli.command, cfg));
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
