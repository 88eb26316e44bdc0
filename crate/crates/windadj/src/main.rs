use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use windadj::commands::{self, Runtime};
use windadj::config::RunConfig;
use windadj::core::adjustment::Mode;
use windadj::{log, parallel, CliResult};

#[derive(Parser)]
#[command(name = "windadj", version, about = "Distributional adjustment of simulated wind fields")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker thread cap (overrides the config).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Operator form (overrides the config).
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    /// Only log errors.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    AsWritten,
    Anomaly,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Fit mean, AR, transformation and spatial models; write a fit bundle.
    Fit,
    /// Adjust a future simulation with one of M, MV, MC, MN, T1, TC.
    Adjust,
    /// Run the skew-t / GLG simulation study.
    Validate,
    /// k-nearest-neighbour divergence between two fields.
    Kl,
    /// Hub-height power and revenue change between two periods.
    Energy,
}

fn run(cli: &Cli) -> CliResult<()> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| windadj::CliError::Config("--config <path> is required".into()))?;
    let cfg = RunConfig::load(path)?;
    let mode = cli.mode.map(|m| match m {
        ModeArg::AsWritten => Mode::AsWritten,
        ModeArg::Anomaly => Mode::Anomaly,
    });
    let rt = Runtime::from_config(&cfg, cli.seed, cli.threads, mode)?;
    let pool = parallel::pool(rt.threads)?;
    pool.install(|| match cli.command {
        Command::Fit => commands::fit(&cfg, rt),
        Command::Adjust => commands::adjust(&cfg, rt),
        Command::Validate => commands::validate(&cfg, rt),
        Command::Kl => commands::kl(&cfg, rt),
        Command::Energy => commands::energy(&cfg, rt),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    log::set_quiet(cli.quiet);
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.exit_code();
            log::emit("error", "failed", json!({"message": e.to_string(), "exit_code": code}));
            eprintln!("error: {e}");
            ExitCode::from(code as u8)
        }
    }
}
