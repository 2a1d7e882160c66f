mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Aligned real/fake dataset construction, detector training and evaluation.
///
/// Settings come from built-in defaults, then the `--config` TOML file,
/// then command-line flags; later sources win. Every output directory gets
/// a `run_config.toml` with the effective settings.
#[derive(Debug, Parser)]
#[command(name = "fakeprint", version)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Global seed; every randomized step derives its seed from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Catalog a directory of images into a manifest.
    Ingest(commands::IngestArgs),
    /// Render procedural textures to use as real images.
    GenTextures(commands::GenTexturesArgs),
    /// Train the toy autoencoder on a manifest of images.
    TrainAe(commands::TrainAeArgs),
    /// Reconstruct every real image through an autoencoder.
    Reconstruct(commands::ReconstructArgs),
    /// Partition a manifest into seeded, pair-preserving splits.
    Split(commands::SplitArgs),
    /// Train a detector.
    Train(commands::TrainArgs),
    /// Pick the accuracy-maximizing threshold on a validation manifest.
    Calibrate(commands::CalibrateArgs),
    /// Score a manifest and report accuracy, AP and TPR at a fixed FPR.
    Eval(commands::EvalArgs),
    /// Score a manifest under one perturbation at increasing strength.
    Sweep(commands::SweepArgs),
    /// Build a randomly post-processed copy of a manifest.
    Postprocess(commands::PostprocessArgs),
    /// Multiply-accumulate cost of denoising versus reconstruction.
    Macs(commands::MacsArgs),
    /// Train per dataset size and batch variant and tabulate TPR.
    Recipe(commands::RecipeArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.global.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            if e.is_user_error() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
