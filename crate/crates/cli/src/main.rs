use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use textate_cli::{execute, Command, Overrides, ProviderKind};

#[derive(Parser)]
#[command(name = "textate", version, about = "Estimate treatment effects from free-text reports")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
    /// Run configuration (TOML).
    #[arg(long, global = true, default_value = "textate.toml")]
    config: PathBuf,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel stages; defaults to the number of cores.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true, value_enum)]
    provider: Option<ProviderArg>,
    /// Artifact directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy)]
enum Sub {
    /// Render a synthetic corpus and its ground truth.
    Simulate,
    /// Rule, relevance, treatment/outcome and inclusion filters.
    Filter,
    /// Impute covariates the reports leave unknown.
    Extract,
    /// Score per-report conditional distributions.
    Score,
    /// Run the configured estimators.
    Estimate,
    /// Convergence curves, covariate balance and plots.
    Diagnose,
    /// simulate, filter, extract, score and estimate in order.
    All,
}

#[derive(ValueEnum, Clone, Copy)]
enum ProviderArg {
    Oracle,
    NoisyOracle,
    Stub,
    Remote,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let command = match cli.command {
        Sub::Simulate => Command::Simulate,
        Sub::Filter => Command::Filter,
        Sub::Extract => Command::Extract,
        Sub::Score => Command::Score,
        Sub::Estimate => Command::Estimate,
        Sub::Diagnose => Command::Diagnose,
        Sub::All => Command::All,
    };
    let provider = cli.provider.map(|p| match p {
        ProviderArg::Oracle => ProviderKind::Oracle,
        ProviderArg::NoisyOracle => ProviderKind::NoisyOracle,
        ProviderArg::Stub => ProviderKind::Stub,
        ProviderArg::Remote => ProviderKind::Remote,
    });
    let overrides = Overrides { seed: cli.seed, workers: cli.workers, provider, out: cli.out };
    match execute(command, &cli.config, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
