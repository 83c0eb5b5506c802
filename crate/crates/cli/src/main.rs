use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod manifest;

#[derive(Parser, Debug)]
#[command(name = "dictolearn", version, about = "Dictionary learning and dictionary-regularized low-dose CT")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; every random stream is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (falls back to DICTOLEARN_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Extra configuration entries, `key=value`, overriding the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render Shepp-Logan or random ellipse phantoms.
    Phantom(commands::PhantomArgs),
    /// Project an image and draw Poisson counts.
    Simulate(commands::SimulateArgs),
    /// Learn a dictionary from a directory of images.
    Train(commands::TrainArgs),
    /// Reconstruct an image from a linearized sinogram.
    Reconstruct(commands::ReconstructArgs),
    /// PSNR and SSIM of a reconstruction against ground truth.
    Evaluate(commands::EvaluateArgs),
    /// Reconstruct over a grid of (lambda1, lambda2).
    Sweep(commands::SweepArgs),
    /// Check the ELBO lower bound on image patches.
    VerifyElbo(commands::VerifyElboArgs),
    /// Significance-ordered atom montage.
    Atoms(commands::AtomsArgs),
}

fn exit_code(category: &str) -> u8 {
    match category {
        "config" => 2,
        "io" => 3,
        "format" => 4,
        "contract" => 5,
        "numerical" => 6,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = commands::setup_threads(&cli.global).and_then(|threads| {
        let ctx = commands::Context::new(&cli.global, threads)?;
        match cli.command {
            Command::Phantom(a) => commands::cmd_phantom(&ctx, &a),
            Command::Simulate(a) => commands::cmd_simulate(&ctx, &a),
            Command::Train(a) => commands::cmd_train(&ctx, &a),
            Command::Reconstruct(a) => commands::cmd_reconstruct(&ctx, &a),
            Command::Evaluate(a) => commands::cmd_evaluate(&ctx, &a),
            Command::Sweep(a) => commands::cmd_sweep(&ctx, &a),
            Command::VerifyElbo(a) => commands::cmd_verify_elbo(&ctx, &a),
            Command::Atoms(a) => commands::cmd_atoms(&ctx, &a),
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = e.category();
            eprintln!("error[{category}]: {e}");
            ExitCode::from(exit_code(category))
        }
    }
}
