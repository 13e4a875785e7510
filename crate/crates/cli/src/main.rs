//! `pathcodes`: ingest pathology reports, curate tiered instruction datasets,
//! serve a mock model, evaluate an endpoint and render result tables.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::PipelineConfig;

/// Error carrying the process exit status.
#[derive(Debug)]
pub struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }

    pub fn endpoint(message: impl Into<String>) -> Self {
        Failure {
            code: 3,
            message: message.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

#[derive(Debug, Parser)]
#[command(name = "pathcodes", version, about = "Cancer-code prediction pipeline for pathology reports")]
struct Cli {
    /// Pipeline config file (TOML). Command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for curation and the mock oracle.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load a raw corpus, report counts and write the normalized cache.
    Ingest(IngestArgs),
    /// Build the tiered train/test datasets in both formats.
    Curate(CurateArgs),
    /// Run the mock chat-completions server until shut down.
    ServeMock(ServeMockArgs),
    /// Query an endpoint over a tier's test split and score the answers.
    Evaluate(EvaluateArgs),
    /// Render result tables from stored runs.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Corpus file; defaults to `corpus` from the config.
    pub input: Option<PathBuf>,
    /// Abort on the first malformed row.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Args)]
pub struct CurateArgs {
    /// Normalized corpus cache; defaults to `<out>/corpus.jsonl`.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Comma-separated subset of configured tiers.
    #[arg(long, value_delimiter = ',')]
    pub tiers: Vec<String>,
    #[arg(long)]
    pub min_combo_count: Option<usize>,
    #[arg(long)]
    pub test_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ServeMockArgs {
    /// Instruction-format file holding the gold codes to answer from.
    #[arg(long)]
    pub gold: PathBuf,
    /// perfect, dropout, hallucinate, corrupt-format or empty.
    #[arg(long)]
    pub mode: Option<pathcodes_net::OracleMode>,
    #[arg(long)]
    pub dropout_p: Option<f64>,
    #[arg(long)]
    pub hallucinate_p: Option<f64>,
    /// Comma-separated codes that hallucinations are drawn from.
    #[arg(long, value_delimiter = ',')]
    pub extra_codes: Vec<String>,
    #[arg(long)]
    pub latency_ms: Option<u64>,
    #[arg(long, default_value = "127.0.0.1:8089")]
    pub bind: std::net::SocketAddr,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Tier whose test split is evaluated.
    #[arg(long, default_value = "large")]
    pub tier: String,
    /// Directory holding curated datasets; defaults to `<out>/datasets`.
    #[arg(long)]
    pub datasets: Option<PathBuf>,
    #[arg(long)]
    pub base_url: Option<String>,
    #[arg(long)]
    pub model_name: Option<String>,
    /// Label used in reports; defaults to the model name.
    #[arg(long)]
    pub model_label: Option<String>,
    #[arg(long)]
    pub epochs: Option<u32>,
    /// Defaults to `<label>-<tier>[-e<epochs>]`.
    #[arg(long)]
    pub run_id: Option<String>,
    #[arg(long)]
    pub max_in_flight: Option<usize>,
    #[arg(long)]
    pub retries: Option<u32>,
    #[arg(long)]
    pub timeout_secs: Option<f64>,
    /// Write raw request/response pairs to `<run>.transcript.jsonl`.
    #[arg(long)]
    pub transcript: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory of `*.metrics.json` files; defaults to `<out>/runs`.
    #[arg(long)]
    pub runs: Option<PathBuf>,
    /// Name of the run set, used in the output file names.
    #[arg(long, default_value = "all")]
    pub id: String,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, Failure> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.curation.seed = seed;
        config.mock.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out = out.clone();
    }
    if let Ok(key) = std::env::var(config::API_KEY_VAR) {
        if !key.is_empty() {
            config.endpoint.api_key = Some(key);
        }
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let config = load_config(&cli)?;
    match cli.command {
        Command::Ingest(args) => commands::ingest(config, args),
        Command::Curate(args) => commands::curate(config, args),
        Command::ServeMock(args) => commands::serve_mock(config, args),
        Command::Evaluate(args) => commands::evaluate(config, args),
        Command::Report(args) => commands::report(config, args),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = if cli.verbose { tracing::Level::DEBUG } else { tracing::Level::WARN };
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .init();

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
