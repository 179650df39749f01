mod commands;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Skin-lesion segmentation: preprocessing, training, inference and the experiment matrix.
#[derive(Parser, Debug)]
#[command(name = "mfsnet", version, about)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,

    #[command(subcommand)]
    pub command: Command,
}

/// Overrides applied on top of the config file (or the defaults).
#[derive(Args, Debug, Clone, Default)]
pub struct GlobalArgs {
    /// TOML config file; missing keys take their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,

    /// Number of cross-validation folds.
    #[arg(long, global = true, value_name = "K")]
    pub folds: Option<usize>,

    /// Weight of the BCE part of the hybrid loss.
    #[arg(long, global = true, value_name = "X")]
    pub delta: Option<f64>,

    /// Skip hair removal.
    #[arg(long, global = true)]
    pub no_preprocess: bool,

    #[arg(long, global = true, value_enum)]
    pub backbone: Option<BackboneArg>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackboneArg {
    Toy,
    Full,
}

/// Where samples come from: a directory with `images/` and `masks/`, or generated.
#[derive(Args, Debug, Clone)]
#[group(required = true, multiple = false)]
pub struct DataArgs {
    /// Dataset root holding `images/` and `masks/`.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,

    /// Use N in-memory synthetic images instead of a dataset directory.
    #[arg(long, value_name = "N")]
    pub synthetic: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct DataOpts {
    #[command(flatten)]
    pub source: DataArgs,

    /// Dataset tag: ph2, isic2017, ham10000, synthetic or custom.
    #[arg(long, default_value = "custom")]
    pub tag: String,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayoutArg {
    /// BA/RA placement per level.
    Orientation,
    /// Component combinations.
    Components,
    Both,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Resize and remove hair from every image in a directory.
    Preprocess {
        #[arg(long = "in", value_name = "DIR")]
        input: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Blackhat threshold on 8-bit intensities.
        #[arg(long)]
        threshold: Option<u8>,
        /// Side of the cross-shaped structuring element (odd).
        #[arg(long)]
        kernel: Option<usize>,
        /// Inpainting neighbourhood radius.
        #[arg(long)]
        radius: Option<usize>,
        /// Resize to side×side before hair removal.
        #[arg(long, default_value_t = 256)]
        side: usize,
        /// Also write every intermediate stage per image.
        #[arg(long)]
        dump_stages: bool,
    },
    /// Write a synthetic dataset of lesions with hair strokes.
    Synth {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 128)]
        side: usize,
        /// Leave out the hair strokes.
        #[arg(long)]
        no_hair: bool,
    },
    /// Train on a whole dataset and save a checkpoint.
    Train {
        #[command(flatten)]
        data: DataOpts,
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Per-step loss CSV.
        #[arg(long, value_name = "FILE")]
        losses: Option<PathBuf>,
    },
    /// Segment every image in a directory with a trained checkpoint.
    Infer {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long = "in", value_name = "DIR")]
        input: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[command(flatten)]
        data: DataOpts,
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// k-fold cross-validation with per-fold rows and a mean±std row.
    Cv {
        #[command(flatten)]
        data: DataOpts,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Run with and without hair removal and write the side-by-side table.
        #[arg(long)]
        compare_preprocessing: bool,
    },
    /// Cross-validate the ablation rows under identical folds and seeds.
    Ablate {
        #[command(flatten)]
        data: DataOpts,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        layout: LayoutArg,
    },
    /// Cross-validate over a grid of δ values.
    SweepDelta {
        #[command(flatten)]
        data: DataOpts,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Comma-separated δ values.
        #[arg(long, value_delimiter = ',', default_values_t = mfsnet::harness::DEFAULT_DELTAS.to_vec())]
        deltas: Vec<f64>,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = commands::run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
