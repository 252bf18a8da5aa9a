//! Exact Gaussian-process regression with multi-channel targets.
//!
//! Fitting factorizes the noise-augmented support Gram matrix with a Cholesky
//! decomposition and pre-solves the weight matrix; prediction reduces to one
//! cross-Gram product for the mean and one triangular solve for the
//! covariance. The covariance of the regularized system is never inverted
//! explicitly. Targets with several channels share a single factorization and
//! a single query covariance because the channels are modeled as independent
//! scalar processes over the same inputs.

use nalgebra::{Cholesky, DMatrix, Dyn};
use thiserror::Error;

use crate::kernels::{gram, KernelConfig, KernelError};

/// Error raised by GP fitting or prediction.
#[derive(Debug, Error)]
pub enum GpError {
    #[error("support set is empty")]
    EmptySupport,
    #[error("target channel count is zero")]
    EmptyTargets,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(
        "covariance factorization failed at leading minor {leading_minor} of {size}; \
         the noise-augmented Gram matrix is not positive definite"
    )]
    NotPositiveDefinite { leading_minor: usize, size: usize },
    #[error("{what} contain non-finite values")]
    NonFinite { what: &'static str },
    #[error("level {level}: {source}")]
    AtLevel { level: usize, source: Box<GpError> },
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

/// Posterior moments over a query set: mean is Q x E, covariance is the
/// Q x Q matrix shared by all channels, present only when requested.
#[derive(Debug, Clone)]
pub struct GpPosterior {
    pub mean: DMatrix<f64>,
    pub covariance: Option<DMatrix<f64>>,
}

impl GpPosterior {
    /// Per-query posterior variances (the covariance diagonal), if the
    /// covariance was computed.
    pub fn variances(&self) -> Option<Vec<f64>> {
        self.covariance
            .as_ref()
            .map(|c| c.diagonal().iter().copied().collect())
    }
}

/// A fitted GP: support inputs, the lower Cholesky factor of the
/// noise-augmented support Gram matrix, and the pre-solved weights.
#[derive(Debug, Clone)]
pub struct FittedGp {
    support: DMatrix<f64>,
    chol: DMatrix<f64>,
    alpha: DMatrix<f64>,
    config: KernelConfig,
}

/// One level of a multi-level problem: support inputs and targets, query
/// inputs, and the kernel to use.
#[derive(Debug, Clone)]
pub struct LevelProblem {
    pub x_s: DMatrix<f64>,
    pub y_s: DMatrix<f64>,
    pub x_q: DMatrix<f64>,
    pub config: KernelConfig,
}

/// Runs the naive unblocked factorization to find the first non-positive
/// pivot. Only called after the fast path has already failed, so the cubic
/// cost is paid on small or degenerate systems. Returns the 1-based order of
/// the offending leading minor.
fn locate_cholesky_failure(k: &DMatrix<f64>) -> usize {
    let n = k.nrows();
    let mut a = k.clone_owned();
    for j in 0..n {
        let mut d = a[(j, j)];
        for p in 0..j {
            d -= a[(j, p)] * a[(j, p)];
        }
        if !d.is_finite() || d <= 0.0 {
            return j + 1;
        }
        let d = d.sqrt();
        a[(j, j)] = d;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for p in 0..j {
                s -= a[(i, p)] * a[(j, p)];
            }
            a[(i, j)] = s / d;
        }
    }
    n
}

fn cholesky_or_locate(k: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>, GpError> {
    Cholesky::new(k.clone_owned()).ok_or_else(|| GpError::NotPositiveDefinite {
        leading_minor: locate_cholesky_failure(k),
        size: k.nrows(),
    })
}

/// Fits an exact GP posterior on `x_s` (S x D) with targets `y_s` (S x E).
///
/// The factorized system is the support Gram matrix plus `config.noise_sq` on
/// the diagonal. When the noise is exactly zero and factorization fails, one
/// retry adds a jitter of 1e-8 times the mean Gram diagonal; a second failure
/// is reported with the offending leading minor.
pub fn fit(
    x_s: &DMatrix<f64>,
    y_s: &DMatrix<f64>,
    config: &KernelConfig,
) -> Result<FittedGp, GpError> {
    config.validate()?;
    if x_s.nrows() == 0 {
        return Err(GpError::EmptySupport);
    }
    if y_s.ncols() == 0 {
        return Err(GpError::EmptyTargets);
    }
    if y_s.nrows() != x_s.nrows() {
        return Err(GpError::ShapeMismatch(format!(
            "support has {} rows but targets have {}",
            x_s.nrows(),
            y_s.nrows()
        )));
    }

    if x_s.iter().any(|v| !v.is_finite()) {
        return Err(GpError::NonFinite {
            what: "support features",
        });
    }
    if y_s.iter().any(|v| !v.is_finite()) {
        return Err(GpError::NonFinite {
            what: "support targets",
        });
    }

    let s = x_s.nrows();
    let mut k = gram(config, x_s, x_s)?;
    for i in 0..s {
        k[(i, i)] += config.noise_sq;
    }

    let chol = match cholesky_or_locate(&k) {
        Ok(c) => c,
        Err(first_failure) if config.noise_sq == 0.0 => {
            let jitter = 1e-8 * k.diagonal().mean();
            log::warn!(
                "noise-free Gram factorization failed, retrying with jitter {jitter:.3e}"
            );
            for i in 0..s {
                k[(i, i)] += jitter;
            }
            cholesky_or_locate(&k).map_err(|_| first_failure)?
        }
        Err(e) => return Err(e),
    };

    let alpha = chol.solve(y_s);
    Ok(FittedGp {
        support: x_s.clone_owned(),
        chol: chol.unpack(),
        alpha,
        config: *config,
    })
}

impl FittedGp {
    pub fn support_size(&self) -> usize {
        self.support.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.support.ncols()
    }

    pub fn channels(&self) -> usize {
        self.alpha.ncols()
    }

    pub fn config(&self) -> &KernelConfig {
        &self.config
    }

    /// Lower Cholesky factor of the noise-augmented support Gram matrix.
    pub fn chol_factor(&self) -> &DMatrix<f64> {
        &self.chol
    }

    /// Pre-solved weights: (K_ss + noise I) alpha = y_s.
    pub fn alpha(&self) -> &DMatrix<f64> {
        &self.alpha
    }

    /// Posterior moments at `x_q` (Q x D). The mean is the cross-Gram applied
    /// to the pre-solved weights; the covariance subtracts the squared
    /// triangular solve of the cross-Gram from the query Gram and is skipped
    /// unless `want_cov`. Covariance diagonal entries are clamped at zero.
    pub fn predict(&self, x_q: &DMatrix<f64>, want_cov: bool) -> Result<GpPosterior, GpError> {
        if x_q.ncols() != self.support.ncols() {
            return Err(GpError::ShapeMismatch(format!(
                "query feature dimension {} does not match support dimension {}",
                x_q.ncols(),
                self.support.ncols()
            )));
        }
        if x_q.iter().any(|v| !v.is_finite()) {
            return Err(GpError::NonFinite {
                what: "query features",
            });
        }
        let k_sq = gram(&self.config, &self.support, x_q)?;
        let mean = k_sq.tr_mul(&self.alpha);
        let covariance = if want_cov {
            let k_qq = gram(&self.config, x_q, x_q)?;
            let v = self
                .chol
                .solve_lower_triangular(&k_sq)
                .expect("cholesky factor has positive diagonal");
            let mut cov = k_qq - v.tr_mul(&v);
            for i in 0..cov.nrows() {
                debug_assert!(
                    cov[(i, i)] >= -1e-9,
                    "posterior variance {} at query {i} below tolerance",
                    cov[(i, i)]
                );
                if cov[(i, i)] < 0.0 {
                    cov[(i, i)] = 0.0;
                }
            }
            Some(cov)
        } else {
            None
        };
        Ok(GpPosterior { mean, covariance })
    }
}

/// Fits and predicts each level independently; an error on level `a` is
/// wrapped so the failing level is identifiable.
pub fn fit_predict_multilevel(
    levels: &[LevelProblem],
    want_cov: bool,
) -> Result<Vec<GpPosterior>, GpError> {
    levels
        .iter()
        .enumerate()
        .map(|(level, p)| {
            fit(&p.x_s, &p.y_s, &p.config)
                .and_then(|g| g.predict(&p.x_q, want_cov))
                .map_err(|source| GpError::AtLevel {
                    level,
                    source: Box::new(source),
                })
        })
        .collect()
}
