//! `mitoloc` command-line interface.
//!
//! Exit codes: 0 success, 2 usage error, 3 invalid configuration, 4 data or
//! I/O error, 5 numeric failure.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mitoloc::config::RunConfig;

use crate::error::{code, CliError};

#[derive(Debug, Parser)]
#[command(name = "mitoloc", version, about = "Weakly-supervised mitosis localization")]
struct Cli {
    /// Repeat for more log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the synthetic patch dataset.
    Synth(SynthArgs),
    /// Macenko-normalize a directory of images.
    Stainnorm(StainArgs),
    /// Train a model; writes metrics.csv, last.ckpt and best.ckpt.
    Train(TrainArgs),
    /// Detect mitoses with a trained checkpoint.
    Infer(InferArgs),
    /// Score a detections CSV against a manifest.
    Eval(EvalArgs),
    /// Train and compare head or depth variants.
    Ablate(AblateArgs),
    /// Draw matched, missed and false detections on an image.
    Overlay(OverlayArgs),
}

/// Run configuration: a `key=value` file plus overrides. Any config key can
/// also be given directly as a flag, e.g. `--head.aggregator mean`.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override {o:?} is not KEY=VALUE")))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    #[arg(long, default_value_t = 64)]
    pub size: u32,
    #[arg(long, default_value_t = 0.3)]
    pub positive_fraction: f64,
    #[arg(long, default_value_t = 20)]
    pub patients: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct StainArgs {
    pub input: PathBuf,
    pub output: PathBuf,
    /// Reference image; the built-in profile is used otherwise.
    #[arg(long)]
    pub target: Option<PathBuf>,
    /// Estimate a profile per image instead of pooling the directory.
    #[arg(long)]
    pub per_image: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Run directory (overrides `paths.output_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from `last.ckpt` in the run directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// An image or a directory of images, normalized as one stain group.
    #[arg(long, required_unless_present = "manifest")]
    pub input: Option<PathBuf>,
    /// Read the images of a manifest split instead, normalized per patient.
    #[arg(long, conflicts_with = "input")]
    pub manifest: Option<PathBuf>,
    /// Manifest split: train, val, test or all.
    #[arg(long, default_value = "test", requires = "manifest")]
    pub split: String,
    /// Detections CSV (`image_id,row,col,score`).
    #[arg(long)]
    pub out: PathBuf,
    /// Also write full-resolution probability maps as grayscale PNGs.
    #[arg(long)]
    pub maps: Option<PathBuf>,
    /// Also write image-level scores (`image_id,score`).
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Replace the checkpoint's threshold.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub min_area: Option<usize>,
    /// Skip stain normalization even if the model was trained with it.
    #[arg(long)]
    pub no_stain_normalize: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub detections: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// train, val, test or all.
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = mitoloc::evaluation::DEFAULT_RADIUS, allow_negative_numbers = true)]
    pub radius: f64,
    /// Image-level scores for AUC; the highest detection score is used otherwise.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// JSON report path.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Compare backbone depths (with the configured head) instead of the five heads.
    #[arg(long, value_delimiter = ',')]
    pub stages: Vec<usize>,
    /// Table CSV path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OverlayArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Detections CSV; rows whose image_id matches are drawn.
    #[arg(long)]
    pub detections: Option<PathBuf>,
    /// Defaults to the image file stem.
    #[arg(long)]
    pub image_id: Option<String>,
    /// Annotations as `r;c|r;c`.
    #[arg(long)]
    pub annotations: Option<String>,
    /// Take annotations from the manifest record with the same id.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value_t = mitoloc::evaluation::DEFAULT_RADIUS)]
    pub radius: f64,
}

/// Rewrites `--a.b v` and `--a.b=v` for known config keys into `--set a.b=v`.
fn expand_config_flags(args: impl IntoIterator<Item = String>) -> Vec<String> {
    let mut out = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--") else {
            out.push(a);
            continue;
        };
        let (key, inline) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        if !(RunConfig::KEYS.contains(&key.as_str()) || key == "paths.output_dir") {
            out.push(a);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().unwrap_or_default(),
        };
        out.push("--set".into());
        out.push(format!("{key}={value}"));
    }
    out
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse_from(expand_config_flags(std::env::args())) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { code::USAGE as u8 } else { code::SUCCESS as u8 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Stainnorm(a) => commands::stainnorm(&a),
        Command::Train(a) => commands::train(&a),
        Command::Infer(a) => commands::infer(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Ablate(a) => commands::ablate(&a),
        Command::Overlay(a) => commands::overlay(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
