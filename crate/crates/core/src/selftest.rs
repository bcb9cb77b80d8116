//! Fast invariant checks run by `osal selftest`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::gmm::{fit_gmm2_traced, EmOptions};
use crate::harness::{classification_metrics, selection_precision, selection_recall};
use crate::nn::{argmax, ce_loss_t, loss_grad_logits, softmax_t, NetParams, NetSpec};

pub type GradFn = fn(&[f64], usize, f64) -> Vec<f64>;

/// Injection points for negative controls.
#[derive(Debug, Clone, Copy)]
pub struct Hooks {
    pub grad: GradFn,
}

impl Default for Hooks {
    fn default() -> Self {
        Hooks { grad: loss_grad_logits }
    }
}

/// Gradient with a deliberate error, used to confirm the selftest can fail.
pub fn perturbed_grad(logits: &[f64], target: usize, temperature: f64) -> Vec<f64> {
    let mut g = loss_grad_logits(logits, target, temperature);
    g[0] += 1e-3;
    g
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub checks: Vec<CheckResult>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

pub fn run(hooks: Hooks) -> Report {
    let checks = vec![
        gradient_identity(hooks.grad),
        softmax_properties(),
        backprop_check(),
        em_monotone(),
        metric_recount(),
    ];
    Report { checks }
}

fn check(name: &'static str, failures: usize, total: usize, worst: f64) -> CheckResult {
    CheckResult {
        name,
        passed: failures == 0,
        detail: format!("{failures}/{total} failures, worst deviation {worst:.3e}"),
    }
}

/// Largest relative deviation of `grad` from central differences of the loss.
pub fn max_gradient_error(grad: GradFn, trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let k = rng.random_range(2..8);
        let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-5.0..5.0)).collect();
        let target = rng.random_range(0..k);
        let t = [0.5, 1.0, 2.0][rng.random_range(0..3)];
        let g = grad(&logits, target, t);
        for c in 0..k {
            let fd = central_difference(&logits, c, |a| ce_loss_t(a, target, t));
            let err = (fd - g[c]).abs() / fd.abs().max(g[c].abs()).max(1e-3);
            worst = worst.max(err);
        }
    }
    worst
}

/// Five-point central difference of `f` along coordinate `c`.
pub fn central_difference<F: Fn(&[f64]) -> f64>(x: &[f64], c: usize, f: F) -> f64 {
    let h = 1e-3;
    let at = |d: f64| {
        let mut y = x.to_vec();
        y[c] += d;
        f(&y)
    };
    (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h)
}

fn gradient_identity(grad: GradFn) -> CheckResult {
    let worst = max_gradient_error(grad, 100, 11);
    check("gradient identity", usize::from(worst >= 1e-6), 100, worst)
}

fn softmax_properties() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut failures = 0;
    for _ in 0..1000 {
        let k = rng.random_range(2..10);
        let a: Vec<f64> = (0..k).map(|_| rng.random_range(-5.0..5.0)).collect();
        let q: Vec<Vec<f64>> = [0.5, 1.0, 2.0].iter().map(|&t| softmax_t(&a, t)).collect();
        let maxes: Vec<f64> = q.iter().map(|v| v.iter().cloned().fold(0.0, f64::max)).collect();
        let ok = q
            .iter()
            .all(|v| argmax(v) == argmax(&a) && (v.iter().sum::<f64>() - 1.0).abs() < 1e-9)
            && maxes[0] >= maxes[1]
            && maxes[1] >= maxes[2];
        failures += usize::from(!ok);
    }
    check("softmax sharpening/argmax", failures, 1000, 0.0)
}

fn backprop_check() -> CheckResult {
    let spec = NetSpec::new(2, vec![3], 2, 0.0).expect("valid spec");
    let mut p = NetParams::init(&spec, 5).expect("valid spec");
    for (i, b) in p.layers_mut()[0].bias.iter_mut().enumerate() {
        *b = 0.05 * (i as f64 + 1.0);
    }
    let x = [0.4, -0.9];
    let (_, grads) = p.loss_and_grad(&x, 0, 0.5).expect("valid input");
    let loss = |q: &NetParams| q.loss_and_grad(&x, 0, 0.5).expect("valid input").0;
    let mut worst: f64 = 0.0;
    let mut total = 0;
    let h = 1e-6;
    for l in 0..p.layers().len() {
        let n_w = p.layers()[l].weights.len();
        for j in 0..n_w + p.layers()[l].bias.len() {
            let bump = |q: &mut NetParams, d: f64| {
                let layer = &mut q.layers_mut()[l];
                if j < n_w {
                    layer.weights[j] += d;
                } else {
                    layer.bias[j - n_w] += d;
                }
            };
            let (mut plus, mut minus) = (p.clone(), p.clone());
            bump(&mut plus, h);
            bump(&mut minus, -h);
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let an = if j < n_w { grads[l].weights[j] } else { grads[l].bias[j - n_w] };
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            worst = worst.max(err);
            total += 1;
        }
    }
    check("backprop finite differences", usize::from(worst >= 1e-4), total, worst)
}

fn em_monotone() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut failures = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let n = rng.random_range(10..200);
        let a = Normal::new(rng.random_range(-3.0..3.0), rng.random_range(0.1..2.0)).expect("valid normal");
        let values: Vec<f64> = (0..n)
            .map(|_| a.sample(&mut rng) + if rng.random::<bool>() { 4.0 } else { 0.0 })
            .collect();
        let fit = fit_gmm2_traced(&values, EmOptions { max_iter: 200, tol: 1e-10 }).expect("non-degenerate");
        for w in fit.log_likelihoods.windows(2) {
            let drop = w[0] - w[1];
            worst = worst.max(drop);
            if drop > 1e-9 * w[0].abs().max(1.0) {
                failures += 1;
            }
        }
    }
    check("EM monotonicity", failures, 20, worst.max(0.0))
}

fn metric_recount() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut failures = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let k = rng.random_range(2..6);
        let n = rng.random_range(1..60);
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let m = classification_metrics(&truth, &pred, k);
        // confusion matrix recount
        let mut cm = vec![vec![0usize; k]; k];
        for (&t, &p) in truth.iter().zip(&pred) {
            cm[t][p] += 1;
        }
        let mut acc = 0.0;
        let (mut mp, mut mr, mut mf) = (0.0, 0.0, 0.0);
        for c in 0..k {
            acc += cm[c][c] as f64;
            let col: usize = (0..k).map(|r| cm[r][c]).sum();
            let row: usize = cm[c].iter().sum();
            let p = if col > 0 { cm[c][c] as f64 / col as f64 } else { 0.0 };
            let r = if row > 0 { cm[c][c] as f64 / row as f64 } else { 0.0 };
            mp += p;
            mr += r;
            mf += if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        }
        let expect = [acc / n as f64, mp / k as f64, mr / k as f64, mf / k as f64];
        let got = [m.accuracy, m.macro_precision, m.macro_recall, m.macro_f1];
        let ks: Vec<usize> = (0..rng.random_range(1..6)).map(|_| rng.random_range(0..20)).collect();
        let ls: Vec<usize> = ks.iter().map(|_| rng.random_range(0..20)).collect();
        let n_kno = ks.iter().sum::<usize>() + rng.random_range(1..50);
        let mut sum = 0usize;
        for &k in &ks {
            sum += k;
        }
        let last = ks.len() - 1;
        let expect_sel = [
            sum as f64 / n_kno as f64,
            if ks[last] + ls[last] == 0 {
                0.0
            } else {
                ks[last] as f64 / (ks[last] + ls[last]) as f64
            },
        ];
        let got_sel = [selection_recall(&ks, n_kno), selection_precision(ks[last], ls[last])];
        let dev = expect
            .iter()
            .zip(&got)
            .chain(expect_sel.iter().zip(&got_sel))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst = worst.max(dev);
        failures += usize::from(dev > 1e-12);
    }
    check("metric recount", failures, 200, worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pristine_passes() {
        let report = run(Hooks::default());
        for c in &report.checks {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }

    #[test]
    fn perturbed_gradient_fails() {
        let report = run(Hooks { grad: perturbed_grad });
        assert!(!report.passed());
        assert!(!report.checks[0].passed);
    }
}
