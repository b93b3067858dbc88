//! Single binary exposing training, figure generation, and every analysis
//! procedure as subcommands. Results go to files under a run directory
//! (created under `runs/` or `$DCGAN_RUN_ROOT`, unless --out names one);
//! the run directory path is the only line printed to stdout, diagnostics
//! go to stderr.

mod cmd_analysis;
mod cmd_check;
mod cmd_dedup;
mod cmd_figures;
mod cmd_nnc;
mod cmd_train;
mod util;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "dcgan", version, about = "Train, sample, and analyze deep convolutional GANs on the CPU")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoints, loss log, and per-epoch grids
    Train(cmd_train::TrainArgs),
    /// Draw samples from a checkpoint into a PNG grid
    Sample(cmd_figures::SampleArgs),
    /// Interpolate between random latent points, one row per segment
    Interpolate(cmd_figures::InterpolateArgs),
    /// Latent vector arithmetic: average(a) - average(minus) + average(plus)
    Arith(cmd_figures::ArithArgs),
    /// Sweep samples along the axis between two averaged concepts
    Turn(cmd_figures::TurnArgs),
    /// Guided-backpropagation saliency grids for discriminator features
    Guidedbp(cmd_analysis::GuidedArgs),
    /// Extract pooled discriminator features for external use
    Features(cmd_analysis::FeatureArgs),
    /// Linear classification over discriminator features (or raw pixels)
    Svm(cmd_analysis::SvmArgs),
    /// Identify window-responsive generator filters and ablate them
    Dropfilters(cmd_analysis::DropArgs),
    /// Near-duplicate detection with a semantic-hash autoencoder
    Dedup(cmd_dedup::DedupArgs),
    /// Nearest-neighbor classification score for conditional generators
    Nnc(cmd_nnc::NncArgs),
    /// Run the built-in gradient and adjoint verification suites
    Gradcheck(cmd_check::GradcheckArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train::run(a),
        Command::Sample(a) => cmd_figures::sample(a),
        Command::Interpolate(a) => cmd_figures::interpolate_cmd(a),
        Command::Arith(a) => cmd_figures::arith(a),
        Command::Turn(a) => cmd_figures::turn(a),
        Command::Guidedbp(a) => cmd_analysis::guidedbp(a),
        Command::Features(a) => cmd_analysis::features(a),
        Command::Svm(a) => cmd_analysis::svm(a),
        Command::Dropfilters(a) => cmd_analysis::dropfilters(a),
        Command::Dedup(a) => cmd_dedup::run(a),
        Command::Nnc(a) => cmd_nnc::run(a),
        Command::Gradcheck(a) => cmd_check::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
