//! `comet`: explain, evaluate and inspect x86 basic-block cost-model
//! predictions.
//!
//! Exit codes: 0 success, 2 usage or configuration, 3 invalid input (block,
//! dataset or feature spec), 4 model or sampling failure, 5 explanation did
//! not reach the precision threshold.

mod cmd;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "comet", version, about = "Explain throughput predictions of x86 basic-block cost models")]
pub struct Cli {
    /// ISA knowledge base: a JSON file, or `bundled:core` / `bundled:tiny`.
    #[arg(long, global = true, default_value = "bundled:core")]
    pub kb: String,
    /// TOML file overriding the shipped defaults field by field.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads and concurrent model processes. Defaults to the
    /// available parallelism, capped at 4 for external models.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Record wall time in outputs. Timed outputs differ between runs.
    #[arg(long, global = true)]
    pub timing: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Explain one block's prediction.
    Explain(ExplainArgs),
    /// Batch evaluations over a dataset.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Draw perturbations of a block that preserve a feature set.
    Perturb(PerturbArgs),
    /// Estimate the size of a block's perturbation space.
    SpaceSize(SpaceSizeArgs),
    /// Dump a block's dependency graph as JSON.
    Graph(GraphArgs),
    /// Regenerate the bundled fixture dataset as JSON Lines.
    Fixtures(OutputArgs),
}

#[derive(Debug, Args)]
pub struct BlockArgs {
    /// File holding the block, one instruction per line.
    #[arg(long, required_unless_present = "asm", conflicts_with = "asm")]
    pub block: Option<PathBuf>,
    /// Inline block text; `\n` separates instructions.
    #[arg(long)]
    pub asm: Option<String>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// `crude` or `exec:<command>` for the external wire protocol.
    #[arg(long, default_value = "crude")]
    pub model: String,
    /// Microarchitecture label: picks the bundled cost table and is passed to
    /// external models as COMET_MARCH.
    #[arg(long, default_value = "hsw")]
    pub march: String,
    /// Cost table CSV for the crude model instead of the bundled one.
    #[arg(long)]
    pub table: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OutputArgs {
    /// Write to this file instead of stdout.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[command(flatten)]
    pub block: BlockArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Override the precision threshold.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Override the target interval half-width.
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    /// JSON Lines dataset, or `bundled:fixtures` / `bundled:casestudies`.
    #[arg(long, default_value = "bundled:fixtures")]
    pub dataset: String,
    /// Directory receiving the JSON and CSV reports.
    #[arg(long, default_value = "comet-out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct SeedArgs {
    /// Number of seeds; defaults to `eval.seeds` from the config.
    #[arg(long)]
    pub seeds: Option<usize>,
    /// First seed; runs use seeds `seed .. seed + seeds`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Accuracy of crude-model explanations against the ground truth, with
    /// the random and fixed baselines.
    Accuracy {
        #[command(flatten)]
        data: DatasetArgs,
        #[arg(long, default_value = "hsw")]
        march: String,
        #[arg(long)]
        table: Option<PathBuf>,
        #[command(flatten)]
        seeds: SeedArgs,
    },
    /// Average precision and coverage of a model's explanations.
    Preccov {
        #[command(flatten)]
        data: DatasetArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        seeds: SeedArgs,
    },
    /// Mean absolute percentage error against measured throughputs.
    Mape {
        #[command(flatten)]
        data: DatasetArgs,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Share of explanations containing each feature type.
    Prominence {
        #[command(flatten)]
        data: DatasetArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        seeds: SeedArgs,
        /// Reuse rows of a report written by `eval accuracy` or `eval
        /// preccov` instead of explaining the dataset again.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Report entry to read from `--report`; defaults to its only entry,
        /// or `comet`.
        #[arg(long)]
        method: Option<String>,
        /// `none`, `source` or `category`; defaults to `eval.group_by`.
        #[arg(long)]
        group_by: Option<String>,
    },
}

#[derive(Debug, Args)]
pub struct PerturbArgs {
    #[command(flatten)]
    pub block: BlockArgs,
    /// Features to preserve, e.g. `inst:4, dep:3-6:raw:rax, numinsts`.
    #[arg(long, default_value = "")]
    pub preserve: String,
    #[arg(short, long = "count", default_value_t = 10)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Emit JSON with the applied operations instead of plain blocks.
    #[arg(long)]
    pub json: bool,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct SpaceSizeArgs {
    #[command(flatten)]
    pub block: BlockArgs,
    #[arg(long, default_value = "")]
    pub preserve: String,
    #[arg(long)]
    pub json: bool,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct GraphArgs {
    #[command(flatten)]
    pub block: BlockArgs,
    /// Keep only the nearest producer per resource instead of all pairs.
    #[arg(long)]
    pub nearest: bool,
    #[command(flatten)]
    pub output: OutputArgs,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cmd::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.error);
            ExitCode::from(e.code as u8)
        }
    }
}
