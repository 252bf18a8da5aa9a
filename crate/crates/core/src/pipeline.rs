//! Few-shot episode execution over per-level feature grids.
//!
//! An episode carries one or more support examples (feature maps plus a
//! binary mask at the original resolution) and one query. Per level, support
//! masks are area-averaged down to the feature grid and mapped to [-1, 1],
//! the support grid is subsampled to a common effective stride, and an exact
//! GP is fitted and evaluated on the query grid. Posterior means are restored
//! to spatial maps, upsampled to the original resolution with corner-aligned
//! bilinear interpolation, fused across levels by arithmetic mean, and
//! thresholded into the predicted mask. Ties at the threshold go to
//! background.

use nalgebra::DMatrix;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::cov_features::{extract_cov_window, unflatten_mean, CovFeatureError, CovWindowMap, MeanMap};
use crate::gp::{fit_predict_multilevel, GpError, GpPosterior, LevelProblem};
use crate::kernels::{KernelConfig, KernelKind};
use crate::tensor_io::{DenseTensor, Dtype};

/// Error raised while validating or running an episode.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid mask: {0}")]
    InvalidMask(String),
    #[error("invalid feature map: {0}")]
    InvalidFeatures(String),
    #[error("{what} {value} is not divisible by {divisor}")]
    NonDivisible {
        what: &'static str,
        value: usize,
        divisor: usize,
    },
    #[error("subsampling a {height}x{width} grid by factor {factor} leaves no cells")]
    DegenerateSubsample {
        height: usize,
        width: usize,
        factor: usize,
    },
    #[error("inconsistent episode: {0}")]
    Inconsistent(String),
    #[error("invalid encoding: {0}")]
    InvalidEncoding(String),
    #[error("invalid pipeline config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    CovFeature(#[from] CovFeatureError),
}

/// A dense per-pixel feature grid, kept as one row per pixel in row-major
/// scan order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    dim: usize,
    matrix: DMatrix<f64>,
}

impl FeatureMap {
    /// Builds from row-major height x width x dim data.
    pub fn new(
        height: usize,
        width: usize,
        dim: usize,
        data: Vec<f64>,
    ) -> Result<Self, PipelineError> {
        if height == 0 || width == 0 || dim == 0 {
            return Err(PipelineError::InvalidFeatures(format!(
                "extents must be positive, got {height}x{width}x{dim}"
            )));
        }
        if data.len() != height * width * dim {
            return Err(PipelineError::InvalidFeatures(format!(
                "expected {} values for {height}x{width}x{dim}, got {}",
                height * width * dim,
                data.len()
            )));
        }
        let matrix = DMatrix::from_row_slice(height * width, dim, &data);
        Ok(Self {
            height,
            width,
            dim,
            matrix,
        })
    }

    /// Interprets a 3-dimensional tensor as height x width x dim.
    pub fn from_tensor(t: &DenseTensor) -> Result<Self, PipelineError> {
        let shape = t.shape();
        if shape.len() != 3 {
            return Err(PipelineError::InvalidFeatures(format!(
                "expected 3 dimensions, got shape {shape:?}"
            )));
        }
        Self::new(shape[0], shape[1], shape[2], t.to_f64_vec())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Pixel-major view: (height * width) x dim.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }
}

/// A binary segmentation mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self, PipelineError> {
        if height == 0 || width == 0 {
            return Err(PipelineError::InvalidMask(format!(
                "extents must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width {
            return Err(PipelineError::InvalidMask(format!(
                "expected {} values for {height}x{width}, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Interprets a 2-dimensional f32 tensor whose values are exactly 0.0 or
    /// 1.0.
    pub fn from_tensor(t: &DenseTensor) -> Result<Self, PipelineError> {
        let shape = t.shape();
        if shape.len() != 2 {
            return Err(PipelineError::InvalidMask(format!(
                "expected 2 dimensions, got shape {shape:?}"
            )));
        }
        if t.dtype() != Dtype::F32 {
            return Err(PipelineError::InvalidMask(format!(
                "expected f32 storage, got {}",
                t.dtype()
            )));
        }
        let values = t.as_f32().unwrap();
        let mut data = Vec::with_capacity(values.len());
        for (i, &v) in values.iter().enumerate() {
            if v == 0.0 {
                data.push(false);
            } else if v == 1.0 {
                data.push(true);
            } else {
                return Err(PipelineError::InvalidMask(format!(
                    "value {v} at flat index {i} is neither 0.0 nor 1.0"
                )));
            }
        }
        Self::new(shape[0], shape[1], data)
    }

    /// Stores as an f32 tensor of zeros and ones.
    pub fn to_tensor(&self) -> DenseTensor {
        let data: Vec<f32> = self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        DenseTensor::from_f32(vec![self.height, self.width], data)
            .expect("mask extents are positive")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// How support masks become GP regression targets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskEncoding {
    /// One channel: area-averaged coverage mapped to [-1, 1].
    PlusMinusOne,
    /// `count` channels: channel 0 as above, later channels multiply it by a
    /// smooth cosine of normalized grid position whose frequencies and phase
    /// are drawn deterministically from `seed`.
    Channels { count: usize, seed: u64 },
}

impl MaskEncoding {
    pub fn channels(&self) -> usize {
        match self {
            MaskEncoding::PlusMinusOne => 1,
            MaskEncoding::Channels { count, .. } => *count,
        }
    }
}

/// One support example: per-level feature maps plus the full-resolution mask.
#[derive(Debug, Clone)]
pub struct SupportExample {
    pub features: Vec<FeatureMap>,
    pub mask: Mask,
}

/// A complete few-shot episode.
#[derive(Debug, Clone)]
pub struct Episode {
    pub support: Vec<SupportExample>,
    pub query_features: Vec<FeatureMap>,
    pub query_mask: Mask,
    pub class_id: u32,
    pub level_strides: Vec<usize>,
}

impl Episode {
    /// Checks internal consistency: at least one shot, matching level counts
    /// and feature dimensions everywhere, masks at the common original
    /// resolution, and feature grids that equal that resolution divided by
    /// their level stride.
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.support.is_empty() {
            return Err(PipelineError::Inconsistent("no support examples".into()));
        }
        let levels = self.level_strides.len();
        if levels == 0 {
            return Err(PipelineError::Inconsistent("no levels".into()));
        }
        if self.query_features.len() != levels {
            return Err(PipelineError::Inconsistent(format!(
                "{} query levels but {} strides",
                self.query_features.len(),
                levels
            )));
        }
        let (h0, w0) = (self.query_mask.height(), self.query_mask.width());
        for (a, (&stride, qf)) in self
            .level_strides
            .iter()
            .zip(&self.query_features)
            .enumerate()
        {
            if stride == 0 {
                return Err(PipelineError::Inconsistent(format!("level {a} stride is 0")));
            }
            if h0 % stride != 0 || w0 % stride != 0 {
                return Err(PipelineError::NonDivisible {
                    what: "mask resolution",
                    value: h0.max(w0),
                    divisor: stride,
                });
            }
            if qf.height() != h0 / stride || qf.width() != w0 / stride {
                return Err(PipelineError::Inconsistent(format!(
                    "level {a} query grid is {}x{}, expected {}x{} for stride {stride}",
                    qf.height(),
                    qf.width(),
                    h0 / stride,
                    w0 / stride
                )));
            }
        }
        for (k, shot) in self.support.iter().enumerate() {
            if shot.features.len() != levels {
                return Err(PipelineError::Inconsistent(format!(
                    "shot {k} has {} levels, expected {levels}",
                    shot.features.len()
                )));
            }
            if shot.mask.height() != h0 || shot.mask.width() != w0 {
                return Err(PipelineError::Inconsistent(format!(
                    "shot {k} mask is {}x{}, expected {h0}x{w0}",
                    shot.mask.height(),
                    shot.mask.width()
                )));
            }
            for (a, f) in shot.features.iter().enumerate() {
                let qf = &self.query_features[a];
                if f.height() != qf.height() || f.width() != qf.width() || f.dim() != qf.dim() {
                    return Err(PipelineError::Inconsistent(format!(
                        "shot {k} level {a} features are {}x{}x{}, query has {}x{}x{}",
                        f.height(),
                        f.width(),
                        f.dim(),
                        qf.height(),
                        qf.width(),
                        qf.dim()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.level_strides.len()
    }

    pub fn shots(&self) -> usize {
        self.support.len()
    }
}

/// Pipeline parameters: one kernel per level, the covariance window size, the
/// effective support stride after subsampling, the mask encoding, and the
/// readout threshold.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub kernels: Vec<KernelConfig>,
    pub window: usize,
    pub support_stride_target: usize,
    pub encoding: MaskEncoding,
    pub threshold: f64,
}

impl PipelineConfig {
    /// Per-level kernel defaults for `episode`, window 5, effective support
    /// stride 32, single-channel encoding, threshold at zero.
    pub fn default_for(episode: &Episode, kind: KernelKind) -> Self {
        let kernels = episode
            .query_features
            .iter()
            .map(|f| KernelConfig::default_for_dim(kind, f.dim()))
            .collect();
        Self {
            kernels,
            window: 5,
            support_stride_target: 32,
            encoding: MaskEncoding::PlusMinusOne,
            threshold: 0.0,
        }
    }

    fn validate(&self, episode: &Episode) -> Result<(), PipelineError> {
        if self.kernels.len() != episode.levels() {
            return Err(PipelineError::InvalidConfig(format!(
                "{} kernels for {} levels",
                self.kernels.len(),
                episode.levels()
            )));
        }
        if self.window == 0 || self.window.is_multiple_of(2) {
            return Err(PipelineError::InvalidConfig(format!(
                "window {} must be odd and positive",
                self.window
            )));
        }
        if self.encoding.channels() == 0 {
            return Err(PipelineError::InvalidEncoding(
                "channel count must be at least 1".into(),
            ));
        }
        if self.support_stride_target == 0 {
            return Err(PipelineError::InvalidConfig(
                "support stride target must be positive".into(),
            ));
        }
        if !self.threshold.is_finite() {
            return Err(PipelineError::InvalidConfig("threshold must be finite".into()));
        }
        Ok(())
    }
}

/// Everything produced by one episode run.
#[derive(Debug, Clone)]
pub struct EpisodeOutput {
    pub predicted_mask: Mask,
    pub fused: MeanMap,
    pub posteriors: Vec<GpPosterior>,
    pub mean_maps: Vec<MeanMap>,
    pub cov_windows: Vec<CovWindowMap>,
}

/// Area-averages `mask` onto the grid implied by `stride` and maps coverage
/// to [-1, 1]; extra channels under the multi-channel encoding modulate the
/// first channel with seeded smooth cosines of normalized position.
pub fn encode_mask(
    mask: &Mask,
    stride: usize,
    encoding: &MaskEncoding,
) -> Result<DMatrix<f64>, PipelineError> {
    if stride == 0 {
        return Err(PipelineError::NonDivisible {
            what: "mask resolution",
            value: mask.height(),
            divisor: 0,
        });
    }
    if !mask.height().is_multiple_of(stride) {
        return Err(PipelineError::NonDivisible {
            what: "mask height",
            value: mask.height(),
            divisor: stride,
        });
    }
    if !mask.width().is_multiple_of(stride) {
        return Err(PipelineError::NonDivisible {
            what: "mask width",
            value: mask.width(),
            divisor: stride,
        });
    }
    let channels = encoding.channels();
    if channels == 0 {
        return Err(PipelineError::InvalidEncoding(
            "channel count must be at least 1".into(),
        ));
    }

    let (h, w) = (mask.height() / stride, mask.width() / stride);
    let cell_area = (stride * stride) as f64;
    let mut base = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let mut covered = 0usize;
            for dr in 0..stride {
                for dc in 0..stride {
                    if mask.get(r * stride + dr, c * stride + dc) {
                        covered += 1;
                    }
                }
            }
            base.push(2.0 * (covered as f64 / cell_area) - 1.0);
        }
    }

    let mut out = DMatrix::zeros(h * w, channels);
    for (p, &v) in base.iter().enumerate() {
        out[(p, 0)] = v;
    }
    if let MaskEncoding::Channels { seed, .. } = encoding {
        let mut rng = ChaCha8Rng::seed_from_u64(*seed);
        for e in 1..channels {
            let f_h: f64 = rng.random_range(0.5..2.5);
            let f_w: f64 = rng.random_range(0.5..2.5);
            let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            for r in 0..h {
                for c in 0..w {
                    let pos = f_h * ((r as f64 + 0.5) / h as f64)
                        + f_w * ((c as f64 + 0.5) / w as f64);
                    let basis = (std::f64::consts::TAU * pos + phase).cos();
                    let p = r * w + c;
                    out[(p, e)] = base[p] * basis;
                }
            }
        }
    }
    Ok(out)
}

/// Keeps every `factor`-th row and column starting at offset `factor / 2`,
/// preserving scan order; `targets` must have one row per grid cell.
pub fn grid_subsample(
    features: &FeatureMap,
    targets: &DMatrix<f64>,
    factor: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>), PipelineError> {
    let (h, w) = (features.height(), features.width());
    if targets.nrows() != h * w {
        return Err(PipelineError::Inconsistent(format!(
            "{} target rows for a {h}x{w} grid",
            targets.nrows()
        )));
    }
    if factor == 0 {
        return Err(PipelineError::DegenerateSubsample {
            height: h,
            width: w,
            factor,
        });
    }
    let offset = factor / 2;
    if offset >= h || offset >= w {
        return Err(PipelineError::DegenerateSubsample {
            height: h,
            width: w,
            factor,
        });
    }
    let rows: Vec<usize> = (offset..h).step_by(factor).collect();
    let cols: Vec<usize> = (offset..w).step_by(factor).collect();
    let picked: Vec<usize> = rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| r * w + c))
        .collect();
    let xs = DMatrix::from_fn(picked.len(), features.dim(), |i, j| {
        features.matrix()[(picked[i], j)]
    });
    let ys = DMatrix::from_fn(picked.len(), targets.ncols(), |i, j| targets[(picked[i], j)]);
    Ok((xs, ys))
}

/// Corner-aligned bilinear upsampling of every channel to `out_h` x `out_w`.
/// When an output axis has a single cell it reads coordinate zero.
pub fn upsample_bilinear(map: &MeanMap, out_h: usize, out_w: usize) -> MeanMap {
    let (h, w, e) = (map.height(), map.width(), map.channels());
    assert!(out_h > 0 && out_w > 0);
    let scale_r = if out_h > 1 {
        (h - 1) as f64 / (out_h - 1) as f64
    } else {
        0.0
    };
    let scale_c = if out_w > 1 {
        (w - 1) as f64 / (out_w - 1) as f64
    } else {
        0.0
    };
    let mut data = Vec::with_capacity(out_h * out_w * e);
    for i in 0..out_h {
        let src_r = i as f64 * scale_r;
        let r0 = src_r.floor() as usize;
        let r1 = (r0 + 1).min(h - 1);
        let fr = src_r - r0 as f64;
        for j in 0..out_w {
            let src_c = j as f64 * scale_c;
            let c0 = src_c.floor() as usize;
            let c1 = (c0 + 1).min(w - 1);
            let fc = src_c - c0 as f64;
            for ch in 0..e {
                let v00 = map.get(r0, c0, ch);
                let v01 = map.get(r0, c1, ch);
                let v10 = map.get(r1, c0, ch);
                let v11 = map.get(r1, c1, ch);
                let top = v00 + (v01 - v00) * fc;
                let bottom = v10 + (v11 - v10) * fc;
                data.push(top + (bottom - top) * fr);
            }
        }
    }
    MeanMap::new(out_h, out_w, e, data)
}

/// Averages channel 0 of the per-level maps at the output resolution and
/// thresholds the result; values strictly above `threshold` become
/// foreground.
pub fn fuse_and_threshold(
    level_means: &[MeanMap],
    out_h: usize,
    out_w: usize,
    threshold: f64,
) -> Result<(MeanMap, Mask), PipelineError> {
    if level_means.is_empty() {
        return Err(PipelineError::Inconsistent("no levels to fuse".into()));
    }
    let mut fused = vec![0.0f64; out_h * out_w];
    for map in level_means {
        let up = upsample_bilinear(&map.channel(0), out_h, out_w);
        for (acc, v) in fused.iter_mut().zip(up.data()) {
            *acc += v;
        }
    }
    let scale = 1.0 / level_means.len() as f64;
    for v in fused.iter_mut() {
        *v *= scale;
    }
    let mask_data: Vec<bool> = fused.iter().map(|&v| v > threshold).collect();
    let fused_map = MeanMap::new(out_h, out_w, 1, fused);
    let mask = Mask::new(out_h, out_w, mask_data)?;
    Ok((fused_map, mask))
}

/// Builds the stacked GP problem for one level: encodes and subsamples every
/// support shot, stacks them, and pairs them with the level's query grid.
pub fn prepare_level_problem(
    episode: &Episode,
    config: &PipelineConfig,
    level: usize,
) -> Result<LevelProblem, PipelineError> {
    let stride = episode.level_strides[level];
    if !config.support_stride_target.is_multiple_of(stride) {
        return Err(PipelineError::NonDivisible {
            what: "support stride target",
            value: config.support_stride_target,
            divisor: stride,
        });
    }
    let factor = config.support_stride_target / stride;

    let mut xs_parts: Vec<DMatrix<f64>> = Vec::with_capacity(episode.shots());
    let mut ys_parts: Vec<DMatrix<f64>> = Vec::with_capacity(episode.shots());
    for shot in &episode.support {
        let targets = encode_mask(&shot.mask, stride, &config.encoding)?;
        let (xs, ys) = grid_subsample(&shot.features[level], &targets, factor)?;
        xs_parts.push(xs);
        ys_parts.push(ys);
    }
    let total: usize = xs_parts.iter().map(|m| m.nrows()).sum();
    let dim = episode.query_features[level].dim();
    let channels = config.encoding.channels();
    let mut x_s = DMatrix::zeros(total, dim);
    let mut y_s = DMatrix::zeros(total, channels);
    let mut row = 0;
    for (xs, ys) in xs_parts.iter().zip(&ys_parts) {
        x_s.rows_mut(row, xs.nrows()).copy_from(xs);
        y_s.rows_mut(row, ys.nrows()).copy_from(ys);
        row += xs.nrows();
    }

    Ok(LevelProblem {
        x_s,
        y_s,
        x_q: episode.query_features[level].matrix().clone(),
        config: config.kernels[level],
    })
}

/// Runs the full pipeline on one episode.
pub fn run_episode(
    episode: &Episode,
    config: &PipelineConfig,
) -> Result<EpisodeOutput, PipelineError> {
    episode.validate()?;
    config.validate(episode)?;

    let problems: Vec<LevelProblem> = (0..episode.levels())
        .map(|a| prepare_level_problem(episode, config, a))
        .collect::<Result<_, _>>()?;
    let posteriors = fit_predict_multilevel(&problems, true)?;

    let mut mean_maps = Vec::with_capacity(posteriors.len());
    let mut cov_windows = Vec::with_capacity(posteriors.len());
    for (a, post) in posteriors.iter().enumerate() {
        let qf = &episode.query_features[a];
        let z_mu = unflatten_mean(&post.mean, qf.height(), qf.width())?;
        let sigma = post
            .covariance
            .as_ref()
            .expect("covariance requested for every level");
        let z_sigma = extract_cov_window(sigma, qf.height(), qf.width(), config.window, 0.0)?;
        mean_maps.push(z_mu);
        cov_windows.push(z_sigma);
    }

    let (h0, w0) = (episode.query_mask.height(), episode.query_mask.width());
    let (fused, predicted_mask) = fuse_and_threshold(&mean_maps, h0, w0, config.threshold)?;

    Ok(EpisodeOutput {
        predicted_mask,
        fused,
        posteriors,
        mean_maps,
        cov_windows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn mask_from_rows(rows: &[&[u8]]) -> Mask {
        let h = rows.len();
        let w = rows[0].len();
        let data = rows
            .iter()
            .flat_map(|r| r.iter().map(|&v| v != 0))
            .collect();
        Mask::new(h, w, data).unwrap()
    }

    fn constant_features(height: usize, width: usize, dim: usize, value: f64) -> FeatureMap {
        FeatureMap::new(height, width, dim, vec![value; height * width * dim]).unwrap()
    }

    #[test]
    fn mask_tensor_round_trip_and_validation() {
        let m = mask_from_rows(&[&[1, 0], &[0, 1]]);
        let t = m.to_tensor();
        assert_eq!(Mask::from_tensor(&t).unwrap(), m);

        let bad = DenseTensor::from_f32(vec![2, 2], vec![0.0, 1.0, 0.5, 0.0]).unwrap();
        assert!(matches!(
            Mask::from_tensor(&bad),
            Err(PipelineError::InvalidMask(_))
        ));
        let f64_mask = DenseTensor::from_f64(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert!(matches!(
            Mask::from_tensor(&f64_mask),
            Err(PipelineError::InvalidMask(_))
        ));
        let wrong_rank = DenseTensor::from_f32(vec![4], vec![0.0; 4]).unwrap();
        assert!(matches!(
            Mask::from_tensor(&wrong_rank),
            Err(PipelineError::InvalidMask(_))
        ));
    }

    #[test]
    fn encoding_maps_coverage_linearly() {
        let mask = mask_from_rows(&[
            &[1, 1, 0, 0],
            &[1, 1, 0, 0],
            &[1, 0, 0, 0],
            &[0, 0, 0, 0],
        ]);
        let y = encode_mask(&mask, 2, &MaskEncoding::PlusMinusOne).unwrap();
        assert_eq!(y.ncols(), 1);
        assert_eq!(y[(0, 0)], 1.0);
        assert_eq!(y[(1, 0)], -1.0);
        assert_eq!(y[(2, 0)], -0.5);
        assert_eq!(y[(3, 0)], -1.0);
    }

    #[test]
    fn encoding_rejects_non_divisible_resolution() {
        let mask = mask_from_rows(&[&[1, 0, 1], &[0, 1, 0]]);
        assert!(matches!(
            encode_mask(&mask, 2, &MaskEncoding::PlusMinusOne),
            Err(PipelineError::NonDivisible { .. })
        ));
    }

    #[test]
    fn multi_channel_encoding_is_seeded_and_bounded() {
        let mask = mask_from_rows(&[
            &[1, 1, 0, 0],
            &[1, 1, 0, 0],
            &[0, 0, 1, 1],
            &[0, 0, 1, 1],
        ]);
        let enc = MaskEncoding::Channels { count: 3, seed: 7 };
        let a = encode_mask(&mask, 2, &enc).unwrap();
        let b = encode_mask(&mask, 2, &enc).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.ncols(), 3);

        let plain = encode_mask(&mask, 2, &MaskEncoding::PlusMinusOne).unwrap();
        for p in 0..4 {
            assert_eq!(a[(p, 0)], plain[(p, 0)]);
            for e in 1..3 {
                assert!(a[(p, e)].abs() <= a[(p, 0)].abs() + 1e-12);
            }
        }

        let other = encode_mask(&mask, 2, &MaskEncoding::Channels { count: 3, seed: 8 }).unwrap();
        assert_ne!(a, other);

        assert!(matches!(
            encode_mask(&mask, 2, &MaskEncoding::Channels { count: 0, seed: 7 }),
            Err(PipelineError::InvalidEncoding(_))
        ));
    }

    #[test]
    fn subsampling_keeps_centered_rows() {
        let feats = FeatureMap::new(4, 4, 1, (0..16).map(|v| v as f64).collect()).unwrap();
        let targets = DMatrix::from_fn(16, 1, |p, _| p as f64);
        let (xs, ys) = grid_subsample(&feats, &targets, 2).unwrap();
        let picked: Vec<f64> = xs.column(0).iter().copied().collect();
        assert_eq!(picked, vec![5.0, 7.0, 13.0, 15.0]);
        assert_eq!(ys.column(0).iter().copied().collect::<Vec<_>>(), picked);

        let feats8 = FeatureMap::new(8, 8, 1, (0..64).map(|v| v as f64).collect()).unwrap();
        let targets8 = DMatrix::from_fn(64, 1, |p, _| p as f64);
        let (xs8, _) = grid_subsample(&feats8, &targets8, 3).unwrap();
        let rows: Vec<usize> = xs8.column(0).iter().map(|&v| v as usize / 8).collect();
        assert_eq!(rows, vec![1, 1, 1, 4, 4, 4, 7, 7, 7]);

        let (id_x, id_y) = grid_subsample(&feats, &targets, 1).unwrap();
        assert_eq!(id_x.nrows(), 16);
        assert_eq!(id_y, targets);
    }

    #[test]
    fn subsampling_rejects_empty_selections() {
        let feats = constant_features(2, 2, 1, 0.0);
        let targets = DMatrix::zeros(4, 1);
        assert!(matches!(
            grid_subsample(&feats, &targets, 9),
            Err(PipelineError::DegenerateSubsample { .. })
        ));
    }

    #[test]
    fn upsampling_at_native_resolution_is_identity() {
        let map = MeanMap::new(3, 4, 2, (0..24).map(|v| v as f64 * 0.37).collect());
        let up = upsample_bilinear(&map, 3, 4);
        for (a, b) in up.data().iter().zip(map.data()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
        }
    }

    #[test]
    fn upsampling_two_by_two_hits_corners_and_midpoints() {
        let map = MeanMap::new(2, 2, 1, vec![0.0, 1.0, 2.0, 3.0]);
        let up = upsample_bilinear(&map, 4, 4);
        assert_eq!(up.get(0, 0, 0), 0.0);
        assert_eq!(up.get(0, 3, 0), 1.0);
        assert_eq!(up.get(3, 0, 0), 2.0);
        assert_eq!(up.get(3, 3, 0), 3.0);
        assert_abs_diff_eq!(up.get(0, 1, 0), 1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(up.get(1, 0, 0), 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(up.get(2, 2, 0), 2.0 * (2.0 / 3.0) + 2.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn upsampling_single_cell_broadcasts() {
        let map = MeanMap::new(1, 1, 1, vec![0.75]);
        let up = upsample_bilinear(&map, 3, 3);
        assert!(up.data().iter().all(|&v| v == 0.75));
    }

    fn separable_episode(shots: usize) -> Episode {
        let mask = mask_from_rows(&[
            &[1, 1, 1, 1, 0, 0, 0, 0],
            &[1, 1, 1, 1, 0, 0, 0, 0],
            &[1, 1, 1, 1, 0, 0, 0, 0],
            &[1, 1, 1, 1, 0, 0, 0, 0],
            &[1, 1, 1, 1, 0, 0, 0, 0],
            &[1, 1, 1, 1, 0, 0, 0, 0],
            &[1, 1, 1, 1, 0, 0, 0, 0],
            &[1, 1, 1, 1, 0, 0, 0, 0],
        ]);
        let features = FeatureMap::new(
            2,
            2,
            2,
            vec![3.0, 3.0, -3.0, -3.0, 3.0, 3.0, -3.0, -3.0],
        )
        .unwrap();
        let shot = SupportExample {
            features: vec![features.clone()],
            mask: mask.clone(),
        };
        Episode {
            support: vec![shot; shots],
            query_features: vec![features],
            query_mask: mask,
            class_id: 3,
            level_strides: vec![4],
        }
    }

    #[test]
    fn separable_episode_is_segmented_exactly() {
        let ep = separable_episode(1);
        let mut cfg = PipelineConfig::default_for(&ep, KernelKind::SquaredExponential);
        cfg.support_stride_target = 4;
        let out = run_episode(&ep, &cfg).unwrap();
        assert_eq!(out.predicted_mask, ep.query_mask);
        assert_eq!(out.mean_maps.len(), 1);
        assert_eq!(out.cov_windows.len(), 1);
        assert_eq!(out.cov_windows[0].window(), 5);
        assert_eq!(out.fused.height(), 8);
        assert_eq!(out.fused.width(), 8);
    }

    // When the query is the support image itself and noise is near zero, the
    // posterior interpolates the encoded targets, so the grid-level readout
    // reproduces the cell labels for any kernel whose support Gram stays
    // positive definite; the linear kernel needs feature dim >= support size
    // for that.
    #[test]
    fn identical_support_and_query_recover_cell_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let mask = Mask::new(
            16,
            16,
            (0..256)
                .map(|i| {
                    let (r, c) = (i / 16 % 16, i % 16);
                    (4..12).contains(&r) && (8..16).contains(&c)
                })
                .collect(),
        )
        .unwrap();
        let features = FeatureMap::new(
            4,
            4,
            20,
            (0..4 * 4 * 20).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        for kind in [KernelKind::Linear, KernelKind::SquaredExponential] {
            let ep = Episode {
                support: vec![SupportExample {
                    features: vec![features.clone()],
                    mask: mask.clone(),
                }],
                query_features: vec![features.clone()],
                query_mask: mask.clone(),
                class_id: 0,
                level_strides: vec![4],
            };
            let mut cfg = PipelineConfig::default_for(&ep, kind);
            cfg.support_stride_target = 4;
            cfg.kernels[0].noise_sq = 1e-10;
            let out = run_episode(&ep, &cfg).unwrap();
            let grid = &out.mean_maps[0];
            for r in 0..4 {
                for c in 0..4 {
                    // Cells are fully inside or outside the rectangle, so the
                    // encoded target is exactly +1 or -1.
                    let covered = ep.query_mask.get(r * 4 + 2, c * 4 + 2);
                    let mean = grid.get(r, c, 0);
                    assert_eq!(
                        mean > 0.0,
                        covered,
                        "{kind}: cell ({r}, {c}) mean {mean}"
                    );
                }
            }
        }
    }

    #[test]
    fn all_background_support_predicts_all_background() {
        let mut ep = separable_episode(1);
        let empty = Mask::new(8, 8, vec![false; 64]).unwrap();
        ep.support[0].mask = empty;
        let mut cfg = PipelineConfig::default_for(&ep, KernelKind::SquaredExponential);
        cfg.support_stride_target = 4;
        let out = run_episode(&ep, &cfg).unwrap();
        assert_eq!(out.predicted_mask.foreground_count(), 0);
        assert!(out.fused.data().iter().all(|&v| v <= 0.0));
    }

    #[test]
    fn episode_runs_are_deterministic() {
        let ep = separable_episode(2);
        let mut cfg = PipelineConfig::default_for(&ep, KernelKind::SquaredExponential);
        cfg.support_stride_target = 4;
        cfg.encoding = MaskEncoding::Channels { count: 4, seed: 123 };
        let a = run_episode(&ep, &cfg).unwrap();
        let b = run_episode(&ep, &cfg).unwrap();
        assert_eq!(a.predicted_mask, b.predicted_mask);
        assert_eq!(a.fused.data(), b.fused.data());
        assert_eq!(a.posteriors[0].mean, b.posteriors[0].mean);
        assert_eq!(a.posteriors[0].mean.ncols(), 4);
    }

    #[test]
    fn validation_catches_inconsistencies() {
        let mut ep = separable_episode(1);
        ep.support.clear();
        assert!(matches!(
            ep.validate(),
            Err(PipelineError::Inconsistent(_))
        ));

        let mut ep = separable_episode(1);
        ep.level_strides = vec![3];
        assert!(matches!(
            ep.validate(),
            Err(PipelineError::NonDivisible { .. })
        ));

        let mut ep = separable_episode(1);
        ep.support[0].features[0] = constant_features(2, 2, 5, 0.0);
        assert!(matches!(ep.validate(), Err(PipelineError::Inconsistent(_))));

        let ep = separable_episode(1);
        let mut cfg = PipelineConfig::default_for(&ep, KernelKind::SquaredExponential);
        cfg.support_stride_target = 4;
        cfg.window = 4;
        assert!(matches!(
            run_episode(&ep, &cfg),
            Err(PipelineError::InvalidConfig(_))
        ));
        cfg.window = 5;
        cfg.support_stride_target = 6;
        assert!(matches!(
            run_episode(&ep, &cfg),
            Err(PipelineError::NonDivisible { .. })
        ));
    }

    #[test]
    fn stride_target_controls_support_density() {
        let ep = separable_episode(3);
        let mut cfg = PipelineConfig::default_for(&ep, KernelKind::SquaredExponential);
        cfg.support_stride_target = 8;
        let problem = prepare_level_problem(&ep, &cfg, 0).unwrap();
        assert_eq!(problem.x_s.nrows(), 3);
        assert_eq!(problem.y_s.nrows(), 3);

        cfg.support_stride_target = 4;
        let dense = prepare_level_problem(&ep, &cfg, 0).unwrap();
        assert_eq!(dense.x_s.nrows(), 12);
        assert_eq!(dense.x_q.nrows(), 4);
    }
}
