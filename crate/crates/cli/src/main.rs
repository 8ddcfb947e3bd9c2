mod commands;
mod manifest;
mod status;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "robustmap", version, about = "Adversarial robustness and attribution coverage for small CNN classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
pub struct Common {
    /// Run manifest (TOML); command-line flags override its fields.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Seed for every random stream of the run.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Standard,
    Adversarial,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Standard => "standard",
            Mode::Adversarial => "adversarial",
        }
    }
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic fracture dataset with point annotations.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Number of images; must be even (fractured and healthy pairs).
        #[arg(long, default_value_t = 800, value_parser = parse_even)]
        n: usize,
        /// 1 for grayscale, 3 for RGB copies.
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=3))]
        channels: u8,
    },
    /// Train a model with standard or PGD adversarial minibatches.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Mode::Standard)]
        mode: Mode,
        /// Start from these weights instead of a fresh initialization.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Base name of the written weight and metrics files (default: the mode).
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        /// PGD radius for adversarial mode, in pixel units.
        #[arg(long)]
        epsilon: Option<f64>,
    },
    /// Clean and PGD accuracy for each model, ranked.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Manifest model ids or weight file paths (default: every manifest model).
        #[arg(long, value_delimiter = ',')]
        models: Vec<String>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        random_start: bool,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Write attribution heatmaps for selected images.
    Attribute {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Manifest model id or weight file path.
        #[arg(long)]
        model: String,
        /// saliency, occlusion, deeplift, integrated_gradients.
        #[arg(long, value_delimiter = ',')]
        methods: Vec<String>,
        /// Image ids (default: the annotated images of the test split).
        #[arg(long, value_delimiter = ',')]
        images: Vec<String>,
        /// fracture, predicted or a class index.
        #[arg(long)]
        target: Option<String>,
    },
    /// Point coverage of thresholded maps against fracture annotations.
    Coverage {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Annotation file (default: the dataset's own annotations).
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        models: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        methods: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        percentiles: Vec<f64>,
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        target: Option<String>,
    },
}

fn parse_even(s: &str) -> Result<usize, String> {
    let n: usize = s.parse().map_err(|e| format!("{e}"))?;
    if n == 0 || n % 2 == 1 {
        return Err(format!("{n} is not a positive even number"));
    }
    Ok(n)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
