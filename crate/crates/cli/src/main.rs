//! `arq`: data generation, training, certification and quantization search.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::OnceLock;

use clap::{Parser, Subcommand};

/// Outcome classes, one exit code each.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Config(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Self::Usage(_) => 1,
            Self::Config(_) => 2,
            Self::Runtime(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Self::Usage(m) | Self::Config(m) | Self::Runtime(m) => m,
        }
    }
}

impl From<arq_core::Error> for Failure {
    fn from(e: arq_core::Error) -> Self {
        match e {
            arq_core::Error::Config(_) => Self::Config(e.to_string()),
            other => Self::Runtime(other.to_string()),
        }
    }
}

fn version_text() -> &'static str {
    static TEXT: OnceLock<String> = OnceLock::new();
    TEXT.get_or_init(|| {
        format!(
            "{} (file format v{}: ARQNET, ARQDATA, ARQCACHE, ARQDDPG)",
            arq_core::VERSION,
            arq_core::format::FORMAT_VERSION
        )
    })
}

#[derive(Debug, Parser)]
#[command(name = "arq", version = version_text(), about = "Certified-robustness-aware mixed-precision quantization search")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for the run; overrides `ARQ_SEED` and the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for certification (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic train/cert/eval splits.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a TinyConvNet with Gaussian augmentation.
    Train {
        /// Dataset directory written by `gen-data`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Certify a model with randomized smoothing.
    Certify {
        #[arg(long)]
        model: PathBuf,
        /// Dataset directory, `.arqdata` file or `.csv` file.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Search a mixed-precision policy.
    Search {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune and fully certify a policy on the evaluation split.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tabulate certified accuracy against radius for records files.
    Report {
        #[arg(long, required = true, num_args = 1..)]
        records: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(k) = cli.threads {
        if k == 0 {
            return Err(Failure::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build_global()
            .map_err(|e| Failure::Runtime(format!("thread pool: {e}")))?;
    }
    let cfg = config::RunConfig::load(cli.config.as_deref(), cli.seed)?;
    match cli.command {
        Command::GenData { out } => commands::gen_data(&cfg, &out),
        Command::Train { data, out } => commands::train(&cfg, &data, &out),
        Command::Certify { model, data, out } => commands::certify(&cfg, &model, &data, &out),
        Command::Search { model, data, out } => commands::search(&cfg, &model, &data, &out),
        Command::Evaluate {
            model,
            data,
            policy,
            out,
        } => commands::evaluate(&cfg, &model, &data, &policy, &out),
        Command::Report { records, out } => commands::report(&cfg, &records, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let line = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("arq: {}", line.trim_start_matches("error: "));
            return ExitCode::from(1);
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("arq: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
