mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vicor_core::domain::{ClueSource, Strategy};

use config::{ConfigError, Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "vicor", version, about = "Confidence-gated LLM/VLM reasoning over multiple-choice visual questions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one strategy over the configured datasets.
    Run(RunArgs),
    /// Run several strategies over the same sample and aggregate them.
    Ablate(RunArgs),
    /// Rebuild the accuracy report from trace files.
    Report {
        /// Trace JSONL files.
        #[arg(required = true)]
        traces: Vec<PathBuf>,
        /// Write report.csv and report.json here instead of printing CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Strategy name; repeat or comma-separate for `ablate`.
    #[arg(long, value_delimiter = ',')]
    strategy: Vec<Strategy>,
    #[arg(long)]
    clue_source: Option<ClueSource>,
    /// KIND:PATH, e.g. VCR:data/vcr.jsonl. Repeatable.
    #[arg(long)]
    dataset: Vec<String>,
    #[arg(long)]
    sample_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    /// `http` or `fixtures:PATH`.
    #[arg(long)]
    backend: Option<String>,
    #[arg(long, env = "VICOR_LLM_ENDPOINT")]
    llm_endpoint: Option<String>,
    #[arg(long, env = "VICOR_GATEWAY_ENDPOINT")]
    gateway_endpoint: Option<String>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Exit non-zero when any problem ends in an error.
    #[arg(long)]
    strict: bool,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, ConfigError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        cfg.apply(&Overrides {
            datasets: self.dataset.clone(),
            strategies: self.strategy.clone(),
            clue_source: self.clue_source,
            sample_size: self.sample_size,
            seed: self.seed,
            workers: self.workers,
            backend: self.backend.clone(),
            llm_endpoint: self.llm_endpoint.clone(),
            gateway_endpoint: self.gateway_endpoint.clone(),
            cache_dir: self.cache_dir.clone(),
            out_dir: self.out.clone(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

const EXIT_PROBLEM_ERRORS: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_FAILURE: u8 = 3;

async fn run_command(args: &RunArgs, ablate: bool) -> ExitCode {
    let cfg = match args.resolve() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let strategies = if ablate { cfg.strategies.clone() } else { vec![cfg.strategy] };
    match commands::execute(&cfg, &strategies).await {
        Ok(outcome) if args.strict && outcome.errors > 0 => {
            eprintln!("{} problem(s) failed", outcome.errors);
            ExitCode::from(EXIT_PROBLEM_ERRORS)
        }
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<ConfigError>() {
                Some(_) => ExitCode::from(EXIT_CONFIG),
                None => ExitCode::from(EXIT_FAILURE),
            }
        }
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("VICOR_LOG").unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Run(args) => run_command(args, false).await,
        Command::Ablate(args) => run_command(args, true).await,
        Command::Report { traces, out } => match commands::report(traces, out.as_deref()) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e:#}");
                ExitCode::from(EXIT_FAILURE)
            }
        },
    }
}
