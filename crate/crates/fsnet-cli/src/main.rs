//! Command line frontend: train the reference network, attack it, render
//! feature-response maps, and score images with the entropy detector. One
//! JSON config document drives every subcommand; `--set` overrides single
//! fields without editing the file.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use config::ExperimentConfig;
use std::path::PathBuf;
use std::process::ExitCode;

const AFTER_HELP: &str = "\
Exit codes: 0 success (or a clean verdict), 1 attacked verdict (detect only),
2 usage or config error, 3 numeric failure, 4 I/O failure.
Seed: the config `seed` field, falling back to the FS_SEED environment variable.";

#[derive(Parser)]
#[command(name = "fsnet", version, about = "Adversarial attacks on a small CNN and an entropy detector for them", after_help = AFTER_HELP)]
struct Cli {
    /// Experiment config file (JSON); built-in defaults apply when omitted
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one config field by dotted path, e.g. --set detector.bins=16
    /// or --set attacks.0.epsilon=0.2; repeatable
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Worker threads for per-image parallelism; all cores when omitted
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the reference network and save its weights
    Train,
    /// Attack held-out images and write the per-sample outcomes CSV
    Attack {
        /// Also dump original/difference/adversarial PGM triplets for
        /// every successful attack
        #[arg(long)]
        dump_images: bool,
    },
    /// Render the feature response and local entropy of one image as PGMs
    Featmap {
        /// Input image (binary PGM/PPM)
        #[arg(value_name = "FILE")]
        image: PathBuf,
        /// Destination directory; the config output_dir when omitted
        #[arg(long, value_name = "DIR")]
        out_dir: Option<PathBuf>,
    },
    /// Score one image and print an attacked/clean verdict
    Detect {
        /// Input image (binary PGM/PPM)
        #[arg(value_name = "FILE")]
        image: PathBuf,
        /// Decision threshold, overriding detector.tau
        #[arg(long, value_name = "SCORE", allow_hyphen_values = true)]
        tau: Option<f64>,
    },
    /// Run the full experiment and write outcome, summary, histogram and
    /// ROC files
    Eval,
    /// Regenerate summary, histogram and ROC files from an outcomes CSV
    Report {
        /// Outcomes CSV written by `attack` or `eval`
        #[arg(value_name = "FILE")]
        outcomes: PathBuf,
    },
    /// Print the effective configuration as JSON
    Config {
        /// Print the built-in defaults instead, ignoring --config and --set
        #[arg(long)]
        print_defaults: bool,
    },
}

/// Terminal failure: the process exit code and the message for stderr.
#[derive(Debug)]
pub(crate) struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    /// Usage or configuration problem (exit 2).
    pub fn config(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<fsnet::Error> for Failure {
    fn from(err: fsnet::Error) -> Self {
        use fsnet::Error::*;
        let code = match &err {
            InvalidArgument(_) | ShapeMismatch { .. } | UnsupportedArchitecture(_) => 2,
            Numeric(_)
            | DegenerateGradient(_)
            | DegenerateGeometry(_)
            | Initialization(_)
            | Aborted(_) => 3,
            Io(_) | Format { .. } | UnsupportedFormat(_) => 4,
        };
        Failure {
            code,
            message: err.to_string(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(failure) => {
            eprintln!("fsnet: {}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}

fn run(cli: Cli) -> Result<u8, Failure> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(Failure::config("--jobs must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Failure::config(format!("--jobs: {e}")))?;
    }

    if let Command::Config {
        print_defaults: true,
    } = cli.command
    {
        println!("{}", config::render(&ExperimentConfig::default())?);
        return Ok(0);
    }

    let config = config::load(cli.config.as_deref(), &cli.set)?;
    match cli.command {
        Command::Train => commands::train(&config),
        Command::Attack { dump_images } => commands::attack(&config, dump_images),
        Command::Featmap { image, out_dir } => {
            commands::featmap(&config, &image, out_dir.as_deref())
        }
        Command::Detect { image, tau } => commands::detect(&config, &image, tau),
        Command::Eval => commands::eval(&config),
        Command::Report { outcomes } => commands::report(&config, &outcomes),
        Command::Config { .. } => {
            println!("{}", config::render(&config)?);
            Ok(0)
        }
    }
}
