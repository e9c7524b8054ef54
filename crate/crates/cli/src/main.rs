//! `platesam` command-line driver.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use platesam::data::SceneKind;
use platesam::model::ScalePreset;

use config::FormatArg;

#[derive(Debug, Parser)]
#[command(
    name = "platesam",
    version,
    about = "LoRA-adapted promptable segmentation for plate detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// JSON run config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_preset)]
    preset: Option<ScalePreset>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
struct DataArgs {
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    /// Dataset root for ufpr, ccpd and generic_json.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Number of synthetic images when the format is synth.
    #[arg(long)]
    n: Option<usize>,
    /// Seed of the synthetic images.
    #[arg(long)]
    data_seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
struct AdapterArgs {
    #[arg(long)]
    rank: Option<usize>,
    /// Which components receive adapters.
    #[arg(long, value_enum)]
    inject: Option<InjectArg>,
    /// Standard deviation of the Gaussian init of `A`.
    #[arg(long)]
    init_std: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InjectArg {
    Encoder,
    Decoder,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Plates,
    Objects,
}

impl From<KindArg> for SceneKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Plates => SceneKind::Plates,
            KindArg::Objects => SceneKind::Objects,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AxisArg {
    Rank,
    Injection,
    Refine,
    Prompt,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic plate scenes as PNGs plus annotations.json.
    SynthData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 16)]
        n: usize,
        /// Exact plate count per image.
        #[arg(long)]
        plates: Option<usize>,
        /// Trailing fraction of images tagged as the test split.
        #[arg(long)]
        test_fraction: Option<f64>,
        #[arg(long, value_enum, default_value = "plates")]
        kind: KindArg,
    },
    /// Pretrain a frozen foundation base on generic object scenes.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Stage 1 (adapters) or stage 2 (promptable) fine-tuning.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        adapter: AdapterArgs,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Base model weights; a fresh base from the preset when omitted.
        #[arg(long)]
        base: Option<PathBuf>,
        /// Stage-1 adapter checkpoint (required for stage 2).
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Predict masks and boxes for every image in a file or directory.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        adapter: Option<PathBuf>,
        /// Image file or directory of images.
        #[arg(long)]
        input: PathBuf,
        /// Mask-prompt refinement iterations; plain prediction when omitted.
        #[arg(long)]
        refine: Option<usize>,
    },
    /// Detection metrics and the PR curve on a dataset split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        adapter: Option<PathBuf>,
        #[arg(long)]
        refine: Option<usize>,
        #[arg(long)]
        iou_thresh: Option<f64>,
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
        /// Also write box overlays per image.
        #[arg(long)]
        overlays: bool,
    },
    /// Fold an adapter checkpoint into the base and save a plain model.
    ExportMerged {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        adapter: PathBuf,
    },
    /// Sweep one axis, training and evaluating per cell.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        adapter: AdapterArgs,
        #[arg(long, value_enum)]
        axis: AxisArg,
        /// Comma-separated values; the axis default when omitted.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long)]
        iou_thresh: Option<f64>,
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
    },
}

fn parse_preset(s: &str) -> Result<ScalePreset, String> {
    s.parse().map_err(|e: platesam::Error| e.to_string())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let validation = err.chain().any(|e| {
        if let Some(pe) = e.downcast_ref::<platesam::Error>() {
            match pe {
                platesam::Error::Dataset { .. } => true,
                platesam::Error::Io(io) => io.kind() == std::io::ErrorKind::NotFound,
                other => other.is_validation(),
            }
        } else if let Some(io) = e.downcast_ref::<std::io::Error>() {
            io.kind() == std::io::ErrorKind::NotFound
        } else {
            false
        }
    });
    if validation {
        2
    } else {
        3
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
