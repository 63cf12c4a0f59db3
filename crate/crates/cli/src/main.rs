//! `tomo`: low-dose CT simulation, self-supervised denoiser training and
//! verification from the command line.
//!
//! Exit codes: 0 success, 1 verification gate failed, 2 usage or config error.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tomo_denoise::Precision;

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments, configs or inputs.
    Usage(String),
    /// A verification gate failed.
    Gate(String),
}

impl CliError {
    pub fn io(e: std::io::Error) -> Self {
        Self::Usage(format!("i/o error: {e}"))
    }

    fn exit_code(&self) -> u8 {
        match self {
            Self::Gate(_) => 1,
            Self::Usage(_) => 2,
        }
    }
}

impl From<tomo_denoise::Error> for CliError {
    fn from(e: tomo_denoise::Error) -> Self {
        Self::Usage(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "tomo", version, about = "Low-dose CT simulation and rotation-augmented self-supervised denoising")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the seed of the relevant config section.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Caps the number of worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true, default_value = "f32")]
    pub precision: Precision,
    /// Output directory (or file, for `reconstruct` and `evaluate`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate phantoms, sinograms, noisy counts, splits and sub-reconstructions.
    Simulate,
    /// Train a denoiser on a simulated dataset.
    Train {
        /// Dataset directory written by `simulate`.
        #[arg(long)]
        data: PathBuf,
    },
    /// Denoise one sinogram with a trained checkpoint.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sinogram: PathBuf,
    },
    /// Score reconstructions against references (PSNR, SSIM).
    Evaluate {
        /// Directory of reconstructions; repeat to compare methods.
        #[arg(long = "recon", required = true)]
        recon: Vec<PathBuf>,
        #[arg(long)]
        reference: PathBuf,
    },
    /// Rotation-count sweep or cross-geometry protocol.
    Sweep,
    /// Run the adjoint, gradient and statistical oracles.
    Verify {
        /// Monte-Carlo trials for the decomposition check.
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(t) = cli.global.threads {
        if t == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot configure threads: {e}")))?;
    }
    let g = &cli.global;
    match cli.command {
        Command::Simulate => commands::simulate(g),
        Command::Train { data } => commands::train(g, &data),
        Command::Reconstruct { checkpoint, sinogram } => commands::reconstruct(g, &checkpoint, &sinogram),
        Command::Evaluate { recon, reference } => commands::evaluate(g, &recon, &reference),
        Command::Sweep => commands::sweep(g),
        Command::Verify { trials } => commands::verify(g, trials),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Usage(m) => eprintln!("error: {m}"),
                CliError::Gate(m) => eprintln!("gate failed: {m}"),
            }
            ExitCode::from(e.exit_code())
        }
    }
}
