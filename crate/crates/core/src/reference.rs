//! Naive reference implementations and the comparison suites built on them.
//!
//! Everything here deliberately avoids the fast paths used by the rest of the
//! crate: Gram matrices are evaluated pair by pair from explicit differences,
//! posterior moments come from a dense matrix inverse instead of a Cholesky
//! solve, the linear-kernel mean is recomputed in weight space, and window
//! gathering walks plain index loops. The suites fit the production path and
//! the reference path on the same random instances and report the worst
//! disagreement; the self-test command runs them at reduced size and the
//! acceptance suite at full size.
//!
//! `perturbation` is added to one production-path output before comparison.
//! It exists so the self-test's failure-injection mode can prove the suites
//! actually detect errors; honest runs pass 0.0.

use nalgebra::DMatrix;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::cov_features::extract_cov_window;
use crate::gp::fit;
use crate::kernels::{KernelConfig, KernelKind};

/// Gram matrix evaluated one pair at a time from explicit coordinate
/// differences, with no shared-term expansion.
pub fn gram_by_pairs(cfg: &KernelConfig, x: &DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
    let ell = cfg.length_sq.sqrt();
    DMatrix::from_fn(x.nrows(), y.nrows(), |m, n| {
        let xi = x.row(m);
        let yj = y.row(n);
        match cfg.kind {
            KernelKind::Linear => xi.dot(&yj),
            KernelKind::Exponential => {
                let d2: f64 = (0..x.ncols()).map(|k| (xi[k] - yj[k]).powi(2)).sum();
                (-d2.sqrt() / ell).exp()
            }
            KernelKind::SquaredExponential => {
                let d2: f64 = (0..x.ncols()).map(|k| (xi[k] - yj[k]).powi(2)).sum();
                cfg.sigma_f_sq * (-d2 / (2.0 * cfg.length_sq)).exp()
            }
        }
    })
}

/// Posterior mean and covariance through the explicit inverse of the
/// noise-augmented support Gram matrix. Returns `None` when the inverse does
/// not exist.
pub fn posterior_by_inverse(
    x_s: &DMatrix<f64>,
    y_s: &DMatrix<f64>,
    x_q: &DMatrix<f64>,
    cfg: &KernelConfig,
) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
    let s = x_s.nrows();
    let mut k_ss = gram_by_pairs(cfg, x_s, x_s);
    for i in 0..s {
        k_ss[(i, i)] += cfg.noise_sq;
    }
    let inv = k_ss.try_inverse()?;
    let k_sq = gram_by_pairs(cfg, x_s, x_q);
    let k_qq = gram_by_pairs(cfg, x_q, x_q);
    let mean = k_sq.transpose() * &inv * y_s;
    let cov = k_qq - k_sq.transpose() * &inv * &k_sq;
    Some((mean, cov))
}

/// Linear-kernel posterior mean recomputed in weight space:
/// ridge weights (X_s^T X_s + noise I) w = X_s^T y_s applied to the queries.
pub fn ridge_mean_by_inverse(
    x_s: &DMatrix<f64>,
    y_s: &DMatrix<f64>,
    x_q: &DMatrix<f64>,
    noise_sq: f64,
) -> Option<DMatrix<f64>> {
    let d = x_s.ncols();
    let mut gram_d = x_s.transpose() * x_s;
    for i in 0..d {
        gram_d[(i, i)] += noise_sq;
    }
    let inv = gram_d.try_inverse()?;
    Some(x_q * inv * x_s.transpose() * y_s)
}

/// Covariance windows gathered by plain index loops, returned in the same
/// row-major pixel-then-channel order as the production extractor.
pub fn windows_by_loops(
    sigma: &DMatrix<f64>,
    height: usize,
    width: usize,
    window: usize,
    pad: f64,
) -> Vec<f64> {
    let r = (window as isize - 1) / 2;
    let mut out = Vec::with_capacity(height * width * window * window);
    for k in 0..height as isize {
        for l in 0..width as isize {
            for i in -r..=r {
                for j in -r..=r {
                    let (ni, nj) = (k + i, l + j);
                    if ni < 0 || nj < 0 || ni >= height as isize || nj >= width as isize {
                        out.push(pad);
                    } else {
                        let q = (k as usize) * width + l as usize;
                        let p = (ni as usize) * width + nj as usize;
                        out.push(sigma[(q, p)]);
                    }
                }
            }
        }
    }
    out
}

/// Outcome of one comparison suite.
#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub name: &'static str,
    pub cases: usize,
    pub failures: usize,
    pub max_err: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Largest entry difference scaled by the reference's largest magnitude,
/// floored at one so near-zero references are compared absolutely.
fn relative_err(ours: &DMatrix<f64>, oracle: &DMatrix<f64>) -> f64 {
    let scale = oracle.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    ours.iter()
        .zip(oracle.iter())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
        / scale
}

/// One random regression instance: support, targets, queries, and a kernel
/// configuration with moderate noise so both solution paths are well posed.
pub struct RandomInstance {
    pub x_s: DMatrix<f64>,
    pub y_s: DMatrix<f64>,
    pub x_q: DMatrix<f64>,
    pub config: KernelConfig,
}

pub fn random_instance(rng: &mut ChaCha8Rng, kind: KernelKind) -> RandomInstance {
    let s = rng.random_range(1..=32);
    let q = rng.random_range(1..=32);
    let d = rng.random_range(1..=8);
    let e = rng.random_range(1..=4);
    let x_s = DMatrix::from_fn(s, d, |_, _| rng.random_range(-2.0..2.0));
    let y_s = DMatrix::from_fn(s, e, |_, _| rng.random_range(-2.0..2.0));
    let x_q = DMatrix::from_fn(q, d, |_, _| rng.random_range(-2.0..2.0));
    let config = KernelConfig {
        kind,
        sigma_f_sq: rng.random_range(0.5..2.0),
        length_sq: (d as f64).sqrt() * rng.random_range(0.5..2.0),
        noise_sq: rng.random_range(0.05..0.5),
    };
    RandomInstance {
        x_s,
        y_s,
        x_q,
        config,
    }
}

/// Compares fitted posterior moments against the explicit-inverse path on
/// `cases` random instances per kernel.
pub fn conditioning_suite(cases: usize, seed: u64, tol: f64, perturbation: f64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SuiteReport {
        name: "posterior-vs-inverse",
        cases: 0,
        failures: 0,
        max_err: 0.0,
    };
    for kind in [
        KernelKind::Linear,
        KernelKind::Exponential,
        KernelKind::SquaredExponential,
    ] {
        for _ in 0..cases {
            report.cases += 1;
            let inst = random_instance(&mut rng, kind);
            let Some((oracle_mean, oracle_cov)) =
                posterior_by_inverse(&inst.x_s, &inst.y_s, &inst.x_q, &inst.config)
            else {
                report.failures += 1;
                continue;
            };
            let post = match fit(&inst.x_s, &inst.y_s, &inst.config)
                .and_then(|g| g.predict(&inst.x_q, true))
            {
                Ok(p) => p,
                Err(_) => {
                    report.failures += 1;
                    continue;
                }
            };
            let mut mean = post.mean;
            mean[(0, 0)] += perturbation;
            let err = relative_err(&mean, &oracle_mean)
                .max(relative_err(post.covariance.as_ref().unwrap(), &oracle_cov));
            report.max_err = report.max_err.max(err);
            if err.is_nan() || err > tol {
                report.failures += 1;
            }
        }
    }
    report
}

/// Compares the linear-kernel posterior mean against the weight-space ridge
/// solution on `cases` random instances.
pub fn ridge_suite(cases: usize, seed: u64, tol: f64, perturbation: f64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SuiteReport {
        name: "linear-vs-ridge",
        cases,
        failures: 0,
        max_err: 0.0,
    };
    for _ in 0..cases {
        let inst = random_instance(&mut rng, KernelKind::Linear);
        let Some(oracle) =
            ridge_mean_by_inverse(&inst.x_s, &inst.y_s, &inst.x_q, inst.config.noise_sq)
        else {
            report.failures += 1;
            continue;
        };
        let post = match fit(&inst.x_s, &inst.y_s, &inst.config)
            .and_then(|g| g.predict(&inst.x_q, false))
        {
            Ok(p) => p,
            Err(_) => {
                report.failures += 1;
                continue;
            }
        };
        let mut mean = post.mean;
        mean[(0, 0)] += perturbation;
        let err = relative_err(&mean, &oracle);
        report.max_err = report.max_err.max(err);
        if err.is_nan() || err > tol {
            report.failures += 1;
        }
    }
    report
}

/// Compares window extraction against the index-loop gather on `grids`
/// random symmetric matrices per grid shape, demanding exact equality.
pub fn window_suite(grids: usize, seed: u64, perturbation: f64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SuiteReport {
        name: "window-vs-loops",
        cases: 0,
        failures: 0,
        max_err: 0.0,
    };
    for _ in 0..grids {
        let height = rng.random_range(1..=8);
        let width = rng.random_range(1..=8);
        let q = height * width;
        let half = DMatrix::from_fn(q, q, |_, _| rng.random_range(-1.0..1.0));
        let sigma = (&half + half.transpose()) * 0.5;
        for window in [1usize, 3, 5, 7] {
            report.cases += 1;
            let map = match extract_cov_window(&sigma, height, width, window, 0.0) {
                Ok(m) => m,
                Err(_) => {
                    report.failures += 1;
                    continue;
                }
            };
            let oracle = windows_by_loops(&sigma, height, width, window, 0.0);
            let mut ours = map.data().to_vec();
            ours[0] += perturbation;
            let equal = ours.len() == oracle.len()
                && ours.iter().zip(oracle.iter()).all(|(a, b)| a == b);
            let err = ours
                .iter()
                .zip(oracle.iter())
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            report.max_err = report.max_err.max(err);
            if !equal {
                report.failures += 1;
            }
        }
    }
    report
}
