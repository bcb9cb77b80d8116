use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::LevelFilter;

use osal_core::cli::{cmd_compare, cmd_run, cmd_selftest, parse_seeds, parse_strategies, CompareArgs, RunArgs};
use osal_core::config::render_config;
use osal_core::harness::ExperimentConfig;

#[derive(Parser)]
#[command(
    name = "osal",
    version,
    about = "Open-set active learning simulator",
    after_help = config_help()
)]
struct Cli {
    /// Number of seeds to run in parallel.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write a results CSV.
    Run {
        config: PathBuf,
        #[arg(long, default_value = "results.csv")]
        out: PathBuf,
        /// Comma-separated seeds replacing the config's `seeds`.
        #[arg(long)]
        seed_override: Option<String>,
        #[arg(long)]
        strategy_override: Option<String>,
    },
    /// Run several strategies under identical settings.
    Compare {
        config: PathBuf,
        #[arg(long, default_value = "random,uncertainty,certainty,coreset,bald,lfosa")]
        strategies: String,
        #[arg(long, default_value = "compare_out")]
        out: PathBuf,
        #[arg(long)]
        seed_override: Option<String>,
    },
    /// Run the fast invariant suite.
    Selftest {
        /// Negative control: check a deliberately wrong gradient.
        #[arg(long, hide = true)]
        perturb_gradient: bool,
    },
}

fn config_help() -> String {
    format!(
        "Config files hold one `key = value` per line (`#` comments). Keys and defaults:\n\n{}\n\
         Setting train_csv and test_csv (header f0,...,f{{d-1}},label) replaces the synthetic data keys.\n\
         Logging: OSAL_LOG=quiet|info|debug (default info).",
        render_config(&ExperimentConfig::default())
    )
}

fn init_logging() {
    let level = match std::env::var("OSAL_LOG").as_deref() {
        Ok("quiet") => LevelFilter::Error,
        Ok("debug") => LevelFilter::Debug,
        _ => LevelFilter::Info,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
}

fn main() -> ExitCode {
    init_logging();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run {
            config,
            out,
            seed_override,
            strategy_override,
        } => (|| {
            let args = RunArgs {
                config,
                out,
                seed_override: seed_override.as_deref().map(parse_seeds).transpose()?,
                strategy_override: strategy_override
                    .as_deref()
                    .map(|s| s.parse().map_err(anyhow::Error::msg))
                    .transpose()?,
                jobs: cli.jobs,
            };
            cmd_run(&args)
        })(),
        Command::Compare {
            config,
            strategies,
            out,
            seed_override,
        } => (|| {
            let args = CompareArgs {
                config,
                strategies: parse_strategies(&strategies)?,
                out_dir: out,
                seed_override: seed_override.as_deref().map(parse_seeds).transpose()?,
                jobs: cli.jobs,
            };
            cmd_compare(&args)
        })(),
        Command::Selftest { perturb_gradient } => {
            let (text, passed) = cmd_selftest(perturb_gradient);
            print!("{text}");
            return if passed { ExitCode::SUCCESS } else { ExitCode::FAILURE };
        }
    };
    match outcome {
        Ok(summary) => {
            print!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
