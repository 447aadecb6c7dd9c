//! `rhythm-ssm`: analysis, training, sampling and verification commands.
//!
//! Exit codes: 0 success, 1 a check failed, 2 invalid input.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rhythm_ssm::ps_mamba::SsmDims;

use commands::{SynthArgs, SynthKind};
use config::CliConfig;
use error::CliError;

const THREADS_ENV: &str = "RHYTHM_SSM_THREADS";

#[derive(Parser)]
#[command(name = "rhythm-ssm", version, about = "Rhythm-aware motion sequence modelling")]
struct Cli {
    /// TOML configuration file; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Keyframe weights and periodicity report for a motion file.
    Analyze {
        input: PathBuf,
        /// Number of equal DPC segments (default: one per 32 frames).
        #[arg(long)]
        segments: Option<usize>,
        /// Report path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic motion file (.csv or .mbin).
    Synth {
        #[arg(long, value_enum, default_value = "periodic")]
        kind: SynthKind,
        #[arg(long, default_value_t = 128)]
        len: usize,
        #[arg(long, default_value_t = 8)]
        dims: usize,
        #[arg(long, default_value_t = 16)]
        period: usize,
        #[arg(long, default_value_t = 1.0)]
        amp: f64,
        /// Gaussian noise standard deviation.
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the toy denoiser and write a checkpoint directory.
    Train {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate a motion sequence from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Prompt class; unconditional when omitted.
        #[arg(long)]
        class: Option<u64>,
        #[arg(long, default_value_t = 64)]
        len: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long, default_value = "all", value_parser = ["all", "ssm", "pdcam", "model"])]
        module: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Median forward time of one block per sequence length (csv).
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "128,256,512,1024")]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Autocorrelation of the channel-mean signal (csv).
    Acf {
        input: PathBuf,
        #[arg(long, conflicts_with = "fft")]
        naive: bool,
        #[arg(long)]
        fft: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::input(format!("{THREADS_ENV} must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::input(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    let mut cfg = CliConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Analyze { input, segments, out } => {
            if segments == Some(0) {
                return Err(CliError::input("--segments must be at least 1"));
            }
            commands::analyze(&cfg, &input, segments, out.as_deref())
        }
        Command::Synth { kind, len, dims, period, amp, noise, seed, out } => {
            commands::synth(&SynthArgs { kind, len, dims, period, amp, noise, seed }, &out)
        }
        Command::Train { out, steps, lr, batch_size, layers, seed } => {
            if let Some(v) = steps {
                cfg.train.steps = v;
            }
            if let Some(v) = lr {
                cfg.train.lr = v;
            }
            if let Some(v) = batch_size {
                cfg.train.batch_size = v;
            }
            if let Some(v) = layers {
                cfg.diffusion.layers = v;
            }
            if let Some(v) = seed {
                cfg.diffusion.seed = v;
            }
            cfg.validate()?;
            commands::train(&cfg, &out).map(|_| ())
        }
        Command::Sample { checkpoint, class, len, seed, out } => commands::sample_cmd(&checkpoint, class, len, seed, &out),
        Command::Gradcheck { module, seed } => commands::gradcheck(&module, seed),
        Command::Bench { lengths, repeats, seed } => {
            let dims: SsmDims = cfg.model.ssm_dims();
            commands::bench(&lengths, &dims, repeats, seed)
        }
        Command::Acf { input, naive, fft: _, out } => commands::acf(&input, naive, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
