//! Kernel functions and Gram matrix evaluation over row-stacked feature sets.
//!
//! Three kernels are supported: a bias-free linear kernel, an exponential
//! kernel, and a squared-exponential kernel. Pairwise squared distances are
//! computed through the expansion |x|^2 + |y|^2 - 2 x.y so the dominant cost
//! is a single matrix product; negative values produced by cancellation are
//! clamped to zero. When both arguments are the same allocation the diagonal
//! self-distance is forced to exactly zero, so stationary kernels report their
//! full scale on the diagonal.

use nalgebra::DMatrix;
use thiserror::Error;

/// Kernel family selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    /// Plain dot product, no bias and no scale parameters.
    Linear,
    /// exp(-|x - y| / l) with l = sqrt(length_sq).
    Exponential,
    /// sigma_f_sq * exp(-|x - y|^2 / (2 * length_sq)).
    SquaredExponential,
}

impl std::fmt::Display for KernelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            KernelKind::Linear => "linear",
            KernelKind::Exponential => "exponential",
            KernelKind::SquaredExponential => "se",
        };
        write!(f, "{name}")
    }
}

impl std::str::FromStr for KernelKind {
    type Err = KernelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(KernelKind::Linear),
            "exponential" => Ok(KernelKind::Exponential),
            "se" => Ok(KernelKind::SquaredExponential),
            _ => Err(KernelError::UnknownKind(s.to_string())),
        }
    }
}

/// Error raised by kernel configuration or Gram evaluation.
#[derive(Debug, Error)]
pub enum KernelError {
    #[error("unknown kernel kind {0:?}, expected one of: linear, exponential, se")]
    UnknownKind(String),
    #[error("invalid kernel config: {0}")]
    InvalidConfig(String),
    #[error("feature dimension mismatch: left has {left}, right has {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("feature dimension must be at least 1")]
    EmptyDimension,
}

/// Kernel selection plus its scale, length, and observation-noise parameters.
///
/// `sigma_f_sq` scales the squared-exponential kernel only; the linear and
/// exponential kernels take no scale factor. `noise_sq` is consumed by GP
/// fitting, not by Gram evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelConfig {
    pub kind: KernelKind,
    pub sigma_f_sq: f64,
    pub length_sq: f64,
    pub noise_sq: f64,
}

impl KernelConfig {
    /// Defaults for features of dimension `dim`: unit signal variance,
    /// squared length scale sqrt(dim), observation noise 0.1.
    pub fn default_for_dim(kind: KernelKind, dim: usize) -> Self {
        assert!(dim >= 1, "feature dimension must be at least 1");
        Self {
            kind,
            sigma_f_sq: 1.0,
            length_sq: (dim as f64).sqrt(),
            noise_sq: 0.1,
        }
    }

    /// Checks parameter ranges: positive scale and length, non-negative noise,
    /// all finite.
    pub fn validate(&self) -> Result<(), KernelError> {
        if !self.sigma_f_sq.is_finite() || self.sigma_f_sq <= 0.0 {
            return Err(KernelError::InvalidConfig(format!(
                "sigma_f_sq must be finite and positive, got {}",
                self.sigma_f_sq
            )));
        }
        if !self.length_sq.is_finite() || self.length_sq <= 0.0 {
            return Err(KernelError::InvalidConfig(format!(
                "length_sq must be finite and positive, got {}",
                self.length_sq
            )));
        }
        if !self.noise_sq.is_finite() || self.noise_sq < 0.0 {
            return Err(KernelError::InvalidConfig(format!(
                "noise_sq must be finite and non-negative, got {}",
                self.noise_sq
            )));
        }
        Ok(())
    }
}

/// Pairwise squared distances between the rows of `x` and the rows of `y`,
/// clamped at zero. When `x` and `y` are the same allocation the diagonal is
/// exactly zero.
fn squared_distances(x: &DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
    let x_norms: Vec<f64> = x.row_iter().map(|r| r.norm_squared()).collect();
    let y_norms: Vec<f64> = if std::ptr::eq(x, y) {
        x_norms.clone()
    } else {
        y.row_iter().map(|r| r.norm_squared()).collect()
    };
    let self_gram = std::ptr::eq(x, y);
    let mut d2 = x * y.transpose();
    for n in 0..d2.ncols() {
        for m in 0..d2.nrows() {
            let v = if self_gram && m == n {
                0.0
            } else {
                x_norms[m] + y_norms[n] - 2.0 * d2[(m, n)]
            };
            d2[(m, n)] = v.max(0.0);
        }
    }
    d2
}

/// Gram matrix with entry (m, n) = kernel(x_m, y_n); `x` is N x D and `y` is
/// M x D, the result N x M.
pub fn gram(
    cfg: &KernelConfig,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
) -> Result<DMatrix<f64>, KernelError> {
    cfg.validate()?;
    if x.ncols() != y.ncols() {
        return Err(KernelError::DimensionMismatch {
            left: x.ncols(),
            right: y.ncols(),
        });
    }
    if x.ncols() == 0 {
        return Err(KernelError::EmptyDimension);
    }
    match cfg.kind {
        KernelKind::Linear => Ok(x * y.transpose()),
        KernelKind::Exponential => {
            let inv_len = 1.0 / cfg.length_sq.sqrt();
            let mut g = squared_distances(x, y);
            g.apply(|v| *v = (-v.sqrt() * inv_len).exp());
            Ok(g)
        }
        KernelKind::SquaredExponential => {
            let inv_two_len_sq = 1.0 / (2.0 * cfg.length_sq);
            let scale = cfg.sigma_f_sq;
            let mut g = squared_distances(x, y);
            g.apply(|v| *v = scale * (-*v * inv_two_len_sq).exp());
            Ok(g)
        }
    }
}
