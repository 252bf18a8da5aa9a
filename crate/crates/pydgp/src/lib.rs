//! Python bindings for the dense GP regression engine.
//!
//! Matrices cross the boundary as nested lists of floats (rows of equal
//! length); tensors as a flat value list plus a shape. Invalid inputs raise
//! `ValueError`, I/O problems `OSError`, and numerical failures such as a
//! non-positive-definite system `RuntimeError`.

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use dgp_core::eval::{run_synthetic_episodes, PipelineOptions, SyntheticEpisodeSpec};
use dgp_core::{
    extract_cov_window as core_extract_cov_window, fit as core_fit, gram as core_gram,
    load_tensor as core_load_tensor, save_tensor as core_save_tensor, DenseTensor, FittedGp,
    GpError, KernelConfig, KernelKind, MaskEncoding, PipelineError,
};
use dgp_core::eval::EvalError;

mod convert;

use convert::{matrix_from_rows, rows_from_matrix};

/// Matrix as equal-length rows, the form nested Python lists arrive in.
type MatrixRows = Vec<Vec<f64>>;

fn parse_kind(kernel: &str) -> PyResult<KernelKind> {
    kernel
        .parse()
        .map_err(|e: dgp_core::KernelError| PyValueError::new_err(e.to_string()))
}

/// Builds a config from per-dimension defaults plus any explicit overrides.
fn build_config(
    kernel: &str,
    dim: usize,
    sigma_f_sq: Option<f64>,
    length_sq: Option<f64>,
    noise_sq: Option<f64>,
) -> PyResult<KernelConfig> {
    if dim == 0 {
        return Err(PyValueError::new_err("feature dimension must be at least 1"));
    }
    let mut config = KernelConfig::default_for_dim(parse_kind(kernel)?, dim);
    if let Some(v) = sigma_f_sq {
        config.sigma_f_sq = v;
    }
    if let Some(v) = length_sq {
        config.length_sq = v;
    }
    if let Some(v) = noise_sq {
        config.noise_sq = v;
    }
    config
        .validate()
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(config)
}

fn gp_is_numerical(e: &GpError) -> bool {
    match e {
        GpError::NotPositiveDefinite { .. } => true,
        GpError::AtLevel { source, .. } => gp_is_numerical(source),
        _ => false,
    }
}

fn gp_err(e: GpError) -> PyErr {
    if gp_is_numerical(&e) {
        PyRuntimeError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn eval_err(e: EvalError) -> PyErr {
    match &e {
        EvalError::Pipeline(PipelineError::Gp(g)) if gp_is_numerical(g) => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn tensor_err(e: dgp_core::TensorError) -> PyErr {
    match &e {
        dgp_core::TensorError::Io(_) => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Exact GP posterior fitted once and queried many times.
#[pyclass]
struct Gp {
    fitted: FittedGp,
}

#[pymethods]
impl Gp {
    /// Fits on support rows `x_s` (S x D) and targets `y_s` (S x E).
    #[new]
    #[pyo3(signature = (x_s, y_s, kernel = "se", sigma_f_sq = None, length_sq = None, noise_sq = None))]
    fn new(
        x_s: Vec<Vec<f64>>,
        y_s: Vec<Vec<f64>>,
        kernel: &str,
        sigma_f_sq: Option<f64>,
        length_sq: Option<f64>,
        noise_sq: Option<f64>,
    ) -> PyResult<Self> {
        let x = matrix_from_rows("x_s", &x_s).map_err(PyValueError::new_err)?;
        let y = matrix_from_rows("y_s", &y_s).map_err(PyValueError::new_err)?;
        let config = build_config(kernel, x.ncols(), sigma_f_sq, length_sq, noise_sq)?;
        let fitted = core_fit(&x, &y, &config).map_err(gp_err)?;
        Ok(Self { fitted })
    }

    /// Posterior mean (Q x E) and, when `want_cov`, the shared Q x Q
    /// covariance.
    #[pyo3(signature = (x_q, want_cov = false))]
    fn predict(
        &self,
        x_q: Vec<Vec<f64>>,
        want_cov: bool,
    ) -> PyResult<(MatrixRows, Option<MatrixRows>)> {
        let q = matrix_from_rows("x_q", &x_q).map_err(PyValueError::new_err)?;
        let posterior = self.fitted.predict(&q, want_cov).map_err(gp_err)?;
        let mean = rows_from_matrix(&posterior.mean);
        let cov = posterior.covariance.as_ref().map(rows_from_matrix);
        Ok((mean, cov))
    }

    #[getter]
    fn support_size(&self) -> usize {
        self.fitted.support_size()
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.fitted.feature_dim()
    }

    #[getter]
    fn channels(&self) -> usize {
        self.fitted.channels()
    }
}

/// Gram matrix with entry (m, n) = kernel(x_m, y_n).
#[pyfunction]
#[pyo3(signature = (x, y, kernel = "se", sigma_f_sq = None, length_sq = None, noise_sq = None))]
fn gram(
    x: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
    kernel: &str,
    sigma_f_sq: Option<f64>,
    length_sq: Option<f64>,
    noise_sq: Option<f64>,
) -> PyResult<Vec<Vec<f64>>> {
    let xm = matrix_from_rows("x", &x).map_err(PyValueError::new_err)?;
    let ym = matrix_from_rows("y", &y).map_err(PyValueError::new_err)?;
    let config = build_config(kernel, xm.ncols(), sigma_f_sq, length_sq, noise_sq)?;
    let k = core_gram(&config, &xm, &ym).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(rows_from_matrix(&k))
}

/// Per-pixel covariance windows from a (height * width) square covariance.
///
/// Returns a height x width x window^2 nested list; channel
/// (di + r) * window + (dj + r) with r = (window - 1) / 2 holds the
/// covariance with the neighbor at offset (di, dj), `pad` where the
/// neighbor falls outside the grid.
#[pyfunction]
#[pyo3(signature = (cov, height, width, window, pad = 0.0))]
fn extract_cov_window(
    cov: Vec<Vec<f64>>,
    height: usize,
    width: usize,
    window: usize,
    pad: f64,
) -> PyResult<Vec<Vec<Vec<f64>>>> {
    let sigma = matrix_from_rows("cov", &cov).map_err(PyValueError::new_err)?;
    let map = core_extract_cov_window(&sigma, height, width, window, pad)
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    let channels = window * window;
    let mut out = Vec::with_capacity(height);
    for row in 0..height {
        let mut cells = Vec::with_capacity(width);
        for col in 0..width {
            let mut values = Vec::with_capacity(channels);
            for ch in 0..channels {
                values.push(map.get(row, col, ch));
            }
            cells.push(values);
        }
        out.push(cells);
    }
    Ok(out)
}

/// Writes `values` (row-major, flat) with `shape` to the dense tensor
/// container at `path`; `dtype` is "f32" or "f64".
#[pyfunction]
#[pyo3(signature = (path, shape, values, dtype = "f64"))]
fn save_tensor(path: &str, shape: Vec<usize>, values: Vec<f64>, dtype: &str) -> PyResult<()> {
    let tensor = match dtype {
        "f64" => DenseTensor::from_f64(shape, values),
        "f32" => DenseTensor::from_f32(shape, values.into_iter().map(|v| v as f32).collect()),
        other => {
            return Err(PyValueError::new_err(format!(
                "dtype must be \"f32\" or \"f64\", got \"{other}\""
            )))
        }
    }
    .map_err(tensor_err)?;
    core_save_tensor(&tensor, path).map_err(tensor_err)
}

/// Reads a dense tensor container; returns a dict with "shape", "dtype",
/// and the flat row-major "values" widened to f64.
#[pyfunction]
fn load_tensor<'py>(py: Python<'py>, path: &str) -> PyResult<Bound<'py, PyDict>> {
    let tensor = core_load_tensor(path).map_err(tensor_err)?;
    let out = PyDict::new(py);
    out.set_item("shape", tensor.shape().to_vec())?;
    out.set_item("dtype", tensor.dtype().to_string())?;
    out.set_item("values", tensor.to_f64_vec())?;
    Ok(out)
}

/// Generates one synthetic episode and runs the full pipeline on it.
///
/// `layout` is "standard" (clustered features, disjoint class regions) or
/// "antipodal" (sign-symmetric features that defeat a linear kernel).
/// Returns a dict with the achieved "iou", overlap counts, and foreground
/// sizes.
#[pyfunction]
#[pyo3(signature = (seed, layout = "standard", shots = 1, kernel = "se", window = 5, encode_channels = 1, noise_sq = None, length_scale_factor = 1.0))]
#[allow(clippy::too_many_arguments)]
fn run_synthetic_episode<'py>(
    py: Python<'py>,
    seed: u64,
    layout: &str,
    shots: usize,
    kernel: &str,
    window: usize,
    encode_channels: usize,
    noise_sq: Option<f64>,
    length_scale_factor: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let spec = match layout {
        "standard" => SyntheticEpisodeSpec::standard(seed),
        "antipodal" => SyntheticEpisodeSpec::antipodal(seed),
        other => {
            return Err(PyValueError::new_err(format!(
                "layout must be \"standard\" or \"antipodal\", got \"{other}\""
            )))
        }
    }
    .with_shots(shots);
    let mut options = PipelineOptions::new(parse_kind(kernel)?);
    options.window = window;
    options.length_scale_factor = length_scale_factor;
    if let Some(v) = noise_sq {
        options.noise_sq = v;
    }
    if encode_channels > 1 {
        options.encoding = MaskEncoding::Channels {
            count: encode_channels,
            seed,
        };
    }
    let results = run_synthetic_episodes(&spec, &options, 1).map_err(eval_err)?;
    let r = results[0];
    let out = PyDict::new(py);
    out.set_item("seed", r.seed)?;
    out.set_item("class_id", r.class_id)?;
    out.set_item("iou", r.iou)?;
    out.set_item("intersection", r.intersection)?;
    out.set_item("union", r.union)?;
    out.set_item("predicted_foreground", r.predicted_foreground)?;
    out.set_item("true_foreground", r.true_foreground)?;
    Ok(out)
}

#[pymodule]
fn pydgp(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<Gp>()?;
    m.add_function(wrap_pyfunction!(gram, m)?)?;
    m.add_function(wrap_pyfunction!(extract_cov_window, m)?)?;
    m.add_function(wrap_pyfunction!(save_tensor, m)?)?;
    m.add_function(wrap_pyfunction!(load_tensor, m)?)?;
    m.add_function(wrap_pyfunction!(run_synthetic_episode, m)?)?;
    Ok(())
}
