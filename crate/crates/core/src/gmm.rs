//! Two-component univariate Gaussian mixture fitted by EM.
//!
//! Components are stored sorted by mean, so component 1 is always the
//! larger-mean ("known") component.

use std::f64::consts::PI;

use thiserror::Error;

pub const VARIANCE_FLOOR: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum GmmError {
    #[error("need at least 2 values to fit a mixture, got {0}")]
    TooFewValues(usize),
    #[error("all values are identical")]
    Degenerate,
    #[error("values must be finite")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gmm1d {
    pub weights: [f64; 2],
    pub means: [f64; 2],
    pub variances: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmOptions {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for EmOptions {
    fn default() -> Self {
        EmOptions {
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmFit {
    pub gmm: Gmm1d,
    /// Log-likelihood at the initial parameters followed by one entry per EM iteration.
    pub log_likelihoods: Vec<f64>,
}

fn log_normal(v: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * PI * var).ln() + (v - mean).powi(2) / var)
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

impl Gmm1d {
    /// Per-component `log(w_k) + log N(v; μ_k, σ_k²)`.
    fn joint_log(&self, v: f64) -> [f64; 2] {
        [0, 1].map(|k| self.weights[k].ln() + log_normal(v, self.means[k], self.variances[k]))
    }

    pub fn log_likelihood(&self, values: &[f64]) -> f64 {
        values
            .iter()
            .map(|&v| {
                let [a, b] = self.joint_log(v);
                log_add_exp(a, b)
            })
            .sum()
    }

    /// Posterior of the larger-mean component, computed in log space.
    pub fn posterior_known(&self, v: f64) -> f64 {
        let [a, b] = self.joint_log(v);
        let p = (b - log_add_exp(a, b)).exp();
        if p.is_nan() {
            0.5
        } else {
            p.clamp(0.0, 1.0)
        }
    }

    /// Posterior of the smaller-mean component.
    pub fn posterior_other(&self, v: f64) -> f64 {
        let [a, b] = self.joint_log(v);
        let p = (a - log_add_exp(a, b)).exp();
        if p.is_nan() {
            0.5
        } else {
            p.clamp(0.0, 1.0)
        }
    }

    fn sorted(mut self) -> Self {
        if self.means[0] > self.means[1] {
            self.weights.swap(0, 1);
            self.means.swap(0, 1);
            self.variances.swap(0, 1);
        }
        self
    }
}

/// Linear-interpolation percentile of sorted data, `q` in `[0, 1]`.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn fit_gmm2(values: &[f64], opts: EmOptions) -> Result<Gmm1d, GmmError> {
    fit_gmm2_traced(values, opts).map(|f| f.gmm)
}

/// EM with deterministic initialization: means at the 25th and 75th
/// percentiles, both variances equal to the (population) variance of the data,
/// equal weights. Stops when the log-likelihood gain drops below `tol` or after
/// `max_iter` iterations.
pub fn fit_gmm2_traced(values: &[f64], opts: EmOptions) -> Result<EmFit, GmmError> {
    if values.len() < 2 {
        return Err(GmmError::TooFewValues(values.len()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(GmmError::NonFinite);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted[0] == sorted[sorted.len() - 1] {
        return Err(GmmError::Degenerate);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).max(VARIANCE_FLOOR);

    let mut gmm = Gmm1d {
        weights: [0.5, 0.5],
        means: [percentile(&sorted, 0.25), percentile(&sorted, 0.75)],
        variances: [var, var],
    };
    let mut ll = gmm.log_likelihood(values);
    let mut trace = vec![ll];
    let mut resp = vec![0.0; values.len()];

    for _ in 0..opts.max_iter {
        // E-step: responsibility of component 1
        for (r, &v) in resp.iter_mut().zip(values) {
            let [a, b] = gmm.joint_log(v);
            *r = (b - log_add_exp(a, b)).exp();
        }
        // M-step
        let n1: f64 = resp.iter().sum();
        let n0 = n - n1;
        let mut next = gmm;
        for (k, nk) in [(0usize, n0), (1usize, n1)] {
            let w = |r: f64| if k == 1 { r } else { 1.0 - r };
            if nk <= f64::MIN_POSITIVE {
                next.weights[k] = 0.0;
                continue;
            }
            let mu = resp.iter().zip(values).map(|(&r, &v)| w(r) * v).sum::<f64>() / nk;
            let s2 = resp.iter().zip(values).map(|(&r, &v)| w(r) * (v - mu).powi(2)).sum::<f64>() / nk;
            next.weights[k] = nk / n;
            next.means[k] = mu;
            next.variances[k] = s2.max(VARIANCE_FLOOR);
        }
        let total = next.weights[0] + next.weights[1];
        next.weights = next.weights.map(|w| w / total);
        gmm = next;
        let new_ll = gmm.log_likelihood(values);
        trace.push(new_ll);
        let gain = new_ll - ll;
        ll = new_ll;
        if gain < opts.tol {
            break;
        }
    }
    Ok(EmFit {
        gmm: gmm.sorted(),
        log_likelihoods: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn two_clusters(seed: u64, n: usize, a: (f64, f64), b: (f64, f64)) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let na = Normal::new(a.0, a.1).unwrap();
        let nb = Normal::new(b.0, b.1).unwrap();
        let mut v: Vec<f64> = (0..n).map(|_| na.sample(&mut rng)).collect();
        v.extend((0..n).map(|_| nb.sample(&mut rng)));
        v
    }

    #[test]
    fn recovers_separated_mixture() {
        let values = two_clusters(17, 500, (0.0, 1.0), (5.0, 1.0));
        let g = fit_gmm2(&values, EmOptions::default()).unwrap();
        assert!((g.means[0] - 0.0).abs() < 0.2, "{g:?}");
        assert!((g.means[1] - 5.0).abs() < 0.2, "{g:?}");
        assert!((g.weights[0] - 0.5).abs() < 0.05);
        assert!((g.weights[1] - 0.5).abs() < 0.05);
    }

    #[test]
    fn six_points_hit_variance_floor() {
        let g = fit_gmm2(&[0.0, 0.0, 0.0, 1.0, 1.0, 1.0], EmOptions::default()).unwrap();
        assert!(g.means[0].abs() < 1e-9 && (g.means[1] - 1.0).abs() < 1e-9, "{g:?}");
        assert_eq!(g.variances, [VARIANCE_FLOOR; 2]);
        assert!((g.weights[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn degenerate_inputs() {
        assert_eq!(fit_gmm2(&[1.0], EmOptions::default()), Err(GmmError::TooFewValues(1)));
        assert_eq!(fit_gmm2(&[], EmOptions::default()), Err(GmmError::TooFewValues(0)));
        assert_eq!(fit_gmm2(&[2.0; 7], EmOptions::default()), Err(GmmError::Degenerate));
        assert_eq!(fit_gmm2(&[1.0, f64::NAN], EmOptions::default()), Err(GmmError::NonFinite));
    }

    #[test]
    fn percentile_interpolates() {
        let s = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&s, 0.25), 1.0);
        assert_eq!(percentile(&[0.0, 10.0], 0.75), 7.5);
    }

    #[test]
    fn posterior_examples() {
        let g = Gmm1d {
            weights: [0.5, 0.5],
            means: [1.0, 3.0],
            variances: [0.5, 0.5],
        };
        assert!((g.posterior_known(2.0) - 0.5).abs() < 1e-15);
        assert!(g.posterior_known(3.0 + 10.0 * 0.5f64.sqrt()) > 0.999);
        assert!(g.posterior_known(-1e6) < 1e-12);
        assert_eq!(g.posterior_known(1e6), 1.0);
    }

    #[test]
    fn affine_shift_moves_means() {
        let values = two_clusters(3, 200, (0.0, 1.0), (4.0, 0.5));
        let shifted: Vec<f64> = values.iter().map(|v| v + 7.25).collect();
        let a = fit_gmm2(&values, EmOptions::default()).unwrap();
        let b = fit_gmm2(&shifted, EmOptions::default()).unwrap();
        let scaled_by_one: Vec<f64> = values.iter().map(|v| v * 1.0 + 0.0).collect();
        assert_eq!(a, fit_gmm2(&scaled_by_one, EmOptions::default()).unwrap());
        for k in 0..2 {
            assert!((b.means[k] - a.means[k] - 7.25).abs() < 1e-6);
            assert!((b.variances[k] - a.variances[k]).abs() < 1e-6);
        }
        for &v in &values {
            assert!((a.posterior_known(v) - b.posterior_known(v + 7.25)).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn em_log_likelihood_is_monotone(values in prop::collection::vec(-20.0f64..20.0, 2..80)) {
            prop_assume!(values.iter().any(|&v| v != values[0]));
            let fit = fit_gmm2_traced(&values, EmOptions { max_iter: 200, tol: 1e-10 }).unwrap();
            for w in fit.log_likelihoods.windows(2) {
                prop_assert!(w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0), "{} -> {}", w[0], w[1]);
            }
            let g = fit.gmm;
            prop_assert!((g.weights[0] + g.weights[1] - 1.0).abs() < 1e-9);
            prop_assert!(g.means[0] <= g.means[1]);
            prop_assert!(g.variances.iter().all(|&v| v >= VARIANCE_FLOOR));
        }

        #[test]
        fn posteriors_sum_to_one(v in -100.0f64..100.0, m0 in -5.0f64..5.0, gap in 0.0f64..5.0, s0 in 0.01f64..4.0, s1 in 0.01f64..4.0, w in 0.01f64..0.99) {
            let g = Gmm1d { weights: [w, 1.0 - w], means: [m0, m0 + gap], variances: [s0, s1] };
            let p = g.posterior_known(v);
            prop_assert!((0.0..=1.0).contains(&p));
            prop_assert!((p + g.posterior_other(v) - 1.0).abs() < 1e-9);
        }

        #[test]
        fn equal_variance_posterior_is_monotone(a in -50.0f64..50.0, d in 0.0f64..10.0, m0 in -5.0f64..5.0, gap in 0.01f64..5.0, s in 0.05f64..4.0, w in 0.01f64..0.99) {
            let g = Gmm1d { weights: [w, 1.0 - w], means: [m0, m0 + gap], variances: [s, s] };
            prop_assert!(g.posterior_known(a + d) >= g.posterior_known(a));
        }
    }
}
