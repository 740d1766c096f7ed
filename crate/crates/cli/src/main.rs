use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use parametrix_core::config::{load_config, Suite};
use parametrix_core::runner::run;

#[derive(Parser)]
#[command(name = "parametrix", version, about = "Numerical checks for degenerate Kolmogorov chain diffusions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the suites listed in a JSON config and write report.csv and summary.txt
    Run {
        config: PathBuf,
        /// output directory (overrides the config's output_dir)
        #[arg(long)]
        out: Option<PathBuf>,
        /// base seed (overrides the config's seed)
        #[arg(long)]
        seed: Option<u64>,
        /// suite to run; repeat to run several (overrides the config's checks)
        #[arg(long = "suite", value_name = "NAME")]
        suites: Vec<String>,
    },
}

fn main() -> ExitCode {
    let Command::Run { config, out, seed, suites } = Cli::parse().command;
    let mut cfg = match load_config(&config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if !suites.is_empty() {
        match suites.iter().map(|s| Suite::parse(s)).collect::<Result<Vec<_>, _>>() {
            Ok(s) => cfg.checks = s,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
        }
    }
    match run(&cfg, out.as_deref()) {
        Ok(outcome) => {
            println!("{} rows, {} failed", outcome.rows.len(), outcome.failed);
            if outcome.success() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
