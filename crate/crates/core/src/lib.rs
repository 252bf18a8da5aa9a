//! Dense Gaussian-process regression over feature grids, plus the episode
//! harness that turns per-pixel posteriors into segmentation masks.
//!
//! The crate is organized bottom-up: [`tensor_io`] reads and writes the dense
//! tensor container, [`kernels`] evaluates Gram matrices, [`gp`] fits exact GP
//! posteriors through Cholesky factorization, [`cov_features`] reshapes
//! posterior moments into spatial maps, [`pipeline`] runs a full few-shot
//! episode, and [`eval`] holds metrics, synthetic episode generation, sweeps,
//! and runtime benchmarks. [`reference`] contains deliberately naive
//! re-implementations used as oracles by the self-test command and the
//! acceptance suite.

pub mod cov_features;
pub mod eval;
pub mod gp;
pub mod kernels;
pub mod pipeline;
pub mod reference;
pub mod tensor_io;

pub use cov_features::{extract_cov_window, unflatten_mean, CovFeatureError, CovWindowMap, MeanMap};
pub use gp::{fit, fit_predict_multilevel, FittedGp, GpError, GpPosterior};
pub use kernels::{gram, KernelConfig, KernelError, KernelKind};
pub use pipeline::{
    run_episode, Episode, EpisodeOutput, FeatureMap, Mask, MaskEncoding, PipelineConfig,
    PipelineError, SupportExample,
};
pub use tensor_io::{load_tensor, save_tensor, DenseTensor, Dtype, TensorError};
