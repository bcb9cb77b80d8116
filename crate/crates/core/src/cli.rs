//! Command implementations behind the `osal` binary.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use crate::config::load_config;
use crate::harness::{run_experiment_jobs, ExperimentConfig, ExperimentResult};
use crate::report::{results_csv_string, summary_table};
use crate::samplers::Strategy;
use crate::selftest;

#[derive(Debug, Clone)]
pub struct RunArgs {
    pub config: PathBuf,
    pub out: PathBuf,
    pub seed_override: Option<Vec<u64>>,
    pub strategy_override: Option<Strategy>,
    pub jobs: usize,
}

#[derive(Debug, Clone)]
pub struct CompareArgs {
    pub config: PathBuf,
    pub strategies: Vec<Strategy>,
    pub out_dir: PathBuf,
    pub seed_override: Option<Vec<u64>>,
    pub jobs: usize,
}

fn prepare(config: &Path, seeds: &Option<Vec<u64>>) -> Result<ExperimentConfig> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seeds {
        cfg.seeds = s.clone();
    }
    cfg.validate().with_context(|| format!("config {}", config.display()))?;
    Ok(cfg)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

/// Runs one experiment, writes the results CSV and returns the summary table.
pub fn cmd_run(args: &RunArgs) -> Result<String> {
    let mut cfg = prepare(&args.config, &args.seed_override)?;
    if let Some(s) = args.strategy_override {
        cfg.strategy = s;
    }
    let result = run_experiment_jobs(&cfg, args.jobs)?;
    write_file(&args.out, &results_csv_string(&[&result]))?;
    Ok(summary_table(&result))
}

/// Runs every strategy under the same config and seeds. Writes
/// `<strategy>.csv` per strategy and `merged.csv` with all rows.
pub fn cmd_compare(args: &CompareArgs) -> Result<String> {
    if args.strategies.is_empty() {
        bail!("no strategies given");
    }
    let base = prepare(&args.config, &args.seed_override)?;
    fs::create_dir_all(&args.out_dir).with_context(|| format!("cannot create {}", args.out_dir.display()))?;
    let mut results: Vec<ExperimentResult> = Vec::with_capacity(args.strategies.len());
    let mut summary = String::new();
    for &strategy in &args.strategies {
        let cfg = ExperimentConfig { strategy, ..base.clone() };
        let result = run_experiment_jobs(&cfg, args.jobs)?;
        write_file(&args.out_dir.join(format!("{strategy}.csv")), &results_csv_string(&[&result]))?;
        summary.push_str(&summary_table(&result));
        summary.push('\n');
        results.push(result);
    }
    let all: Vec<&ExperimentResult> = results.iter().collect();
    write_file(&args.out_dir.join("merged.csv"), &results_csv_string(&all))?;
    Ok(summary)
}

/// Runs the invariant suite. Returns the report text and whether it passed.
pub fn cmd_selftest(perturb_gradient: bool) -> (String, bool) {
    let hooks = if perturb_gradient {
        selftest::Hooks {
            grad: selftest::perturbed_grad,
        }
    } else {
        selftest::Hooks::default()
    };
    let report = selftest::run(hooks);
    let mut text = String::new();
    for c in &report.checks {
        text.push_str(&format!("[{}] {}: {}\n", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail));
    }
    (text, report.passed())
}

/// Parses `a,b,c` into strategies.
pub fn parse_strategies(list: &str) -> Result<Vec<Strategy>> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.parse::<Strategy>().map_err(anyhow::Error::msg))
        .collect()
}

pub fn parse_seeds(list: &str) -> Result<Vec<u64>> {
    list.split(',')
        .map(|s| s.trim().parse::<u64>().with_context(|| format!("bad seed `{s}`")))
        .collect()
}
