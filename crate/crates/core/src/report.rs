//! Results CSV and the human-readable summary table.

use std::fmt::Write as _;
use std::io::Write;

use crate::harness::{aggregate, ExperimentResult};

pub const RESULTS_HEADER: &str = "seed,round,strategy,ablation,k_i,l_i,recall,precision,accuracy,macro_precision,macro_recall,macro_f1";

/// One row per (seed, round), reals with 6 decimals.
pub fn write_results_csv<W: Write>(mut w: W, results: &[&ExperimentResult]) -> std::io::Result<()> {
    writeln!(w, "{RESULTS_HEADER}")?;
    for res in results {
        for run in &res.runs {
            for m in &run.rounds {
                writeln!(
                    w,
                    "{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                    run.seed,
                    m.round,
                    res.strategy,
                    res.ablation,
                    m.k_i,
                    m.l_i,
                    m.recall,
                    m.precision,
                    m.test_accuracy,
                    m.macro_precision,
                    m.macro_recall,
                    m.macro_f1
                )?;
            }
        }
    }
    Ok(())
}

pub fn results_csv_string(results: &[&ExperimentResult]) -> String {
    let mut buf = Vec::new();
    write_results_csv(&mut buf, results).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("csv is ascii")
}

/// Per-round mean ± std over seeds.
pub fn summary_table(res: &ExperimentResult) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "strategy={} ablation={} seeds={}", res.strategy, res.ablation, res.runs.len());
    let _ = writeln!(
        out,
        "{:>5} {:>3} {:>8} {:>8} {:>17} {:>17} {:>17} {:>17}",
        "round", "n", "k_i", "l_i", "recall", "precision", "accuracy", "macro_f1"
    );
    for s in aggregate(res) {
        let pm = |j: usize| format!("{:.4}±{:.4}", s.mean[j], s.std[j]);
        let _ = writeln!(
            out,
            "{:>5} {:>3} {:>8.1} {:>8.1} {:>17} {:>17} {:>17} {:>17}",
            s.round,
            s.n,
            s.mean[0],
            s.mean[1],
            pm(2),
            pm(3),
            pm(4),
            pm(7)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{Ablation, RoundMetrics, SeedRun};
    use crate::samplers::Strategy;

    fn result() -> ExperimentResult {
        let m = |round| RoundMetrics {
            round,
            k_i: 3,
            l_i: 7,
            recall: 1.0 / 3.0,
            precision: 0.3,
            test_accuracy: 0.5,
            macro_precision: 0.25,
            macro_recall: 0.5,
            macro_f1: 2.0 / 3.0,
        };
        ExperimentResult {
            strategy: Strategy::Random,
            ablation: Ablation::Full,
            runs: vec![
                SeedRun {
                    seed: 1,
                    rounds: vec![m(1), m(2)],
                },
                SeedRun {
                    seed: 2,
                    rounds: vec![m(1), m(2)],
                },
            ],
        }
    }

    #[test]
    fn csv_layout() {
        let text = results_csv_string(&[&result()]);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 4);
        assert_eq!(lines[0], RESULTS_HEADER);
        assert_eq!(
            lines[1],
            "1,1,random,full,3,7,0.333333,0.300000,0.500000,0.250000,0.500000,0.666667"
        );
    }

    #[test]
    fn summary_has_a_line_per_round() {
        let s = summary_table(&result());
        assert_eq!(s.lines().count(), 2 + 2);
        assert!(s.contains("0.3000±0.0000"));
    }
}
