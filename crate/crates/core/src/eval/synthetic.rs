//! Seeded synthetic episodes with multimodal feature clusters.
//!
//! Foreground classes and the background each own a set of cluster centers in
//! feature space; an episode draws rectangular foreground blobs on the grid,
//! assigns each blob to one foreground cluster, and samples every cell's
//! feature vector around its cluster center. Class centers depend only on the
//! class, the level, and the feature dimension, so all episodes of one class
//! share geometry; everything else is derived from the episode seed, and the
//! query is drawn from its own stream so it stays fixed while the shot count
//! varies.
//!
//! The antipodal layout places foreground centers in opposing pairs `+u, -u`
//! with background pairs along directions orthogonal to every foreground
//! direction. No linear score can accept both members of an opposing pair
//! while rejecting the background, which makes the layout a stress test that
//! separates stationary kernels from the linear one.

use nalgebra::DVector;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::metrics::EvalError;
use crate::pipeline::{Episode, FeatureMap, Mask, SupportExample};

/// Parameters of the synthetic episode distribution.
#[derive(Debug, Clone)]
pub struct SyntheticEpisodeSpec {
    pub seed: u64,
    /// Mask resolution; feature grids are this divided by each level stride.
    pub mask_height: usize,
    pub mask_width: usize,
    pub level_strides: Vec<usize>,
    /// Feature dimension per level.
    pub level_dims: Vec<usize>,
    pub shots: usize,
    pub num_classes: usize,
    pub clusters_per_class: usize,
    pub background_clusters: usize,
    /// Distance of cluster centers from the origin.
    pub separation: f64,
    /// Standard deviation of per-cell feature noise around the center.
    pub spread: f64,
    /// Rectangular foreground blobs per layout.
    pub blob_count: usize,
    /// Blob extents in coarsest-aligned grid cells (cells of the first
    /// level's grid).
    pub blob_min_cells: usize,
    pub blob_max_cells: usize,
    /// Opposing-pair cluster layout instead of independent random centers.
    pub antipodal: bool,
}

impl SyntheticEpisodeSpec {
    /// Two-level spec with well-separated random clusters; the workhorse for
    /// shot-count sweeps and kernel comparisons on easy geometry.
    pub fn standard(seed: u64) -> Self {
        Self {
            seed,
            mask_height: 256,
            mask_width: 256,
            level_strides: vec![16, 32],
            level_dims: vec![16, 16],
            shots: 1,
            num_classes: 5,
            clusters_per_class: 3,
            background_clusters: 4,
            separation: 3.5,
            // Intra-cluster squared distance is about 2 * spread^2 * dim and
            // must stay small against the default squared length sqrt(dim),
            // or the kernel cannot resolve the cluster structure.
            spread: 0.2,
            blob_count: 2,
            blob_min_cells: 3,
            blob_max_cells: 6,
            antipodal: false,
        }
    }

    /// Single-level spec with opposing-pair clusters.
    pub fn antipodal(seed: u64) -> Self {
        Self {
            seed,
            mask_height: 128,
            mask_width: 128,
            level_strides: vec![16],
            level_dims: vec![16],
            shots: 1,
            num_classes: 5,
            clusters_per_class: 2,
            background_clusters: 2,
            separation: 3.0,
            spread: 0.4,
            blob_count: 3,
            blob_min_cells: 2,
            blob_max_cells: 4,
            antipodal: true,
        }
    }

    /// Single-level spec sized so the support count equals
    /// `shots * (mask_height / stride)^2` when the subsampling factor is one;
    /// used by the runtime benchmarks.
    pub fn bench(seed: u64) -> Self {
        Self {
            seed,
            mask_height: 256,
            mask_width: 256,
            level_strides: vec![16],
            level_dims: vec![16],
            shots: 1,
            num_classes: 1,
            clusters_per_class: 2,
            background_clusters: 2,
            separation: 3.0,
            spread: 0.5,
            blob_count: 2,
            blob_min_cells: 3,
            blob_max_cells: 6,
            antipodal: false,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_shots(mut self, shots: usize) -> Self {
        self.shots = shots;
        self
    }

    fn validate(&self) -> Result<(), EvalError> {
        if self.level_strides.is_empty() {
            return Err(EvalError::BadSpec("no levels".into()));
        }
        if self.level_strides.len() != self.level_dims.len() {
            return Err(EvalError::BadSpec(format!(
                "{} strides but {} feature dims",
                self.level_strides.len(),
                self.level_dims.len()
            )));
        }
        for (&stride, &dim) in self.level_strides.iter().zip(&self.level_dims) {
            if stride == 0 || dim == 0 {
                return Err(EvalError::BadSpec("zero stride or dimension".into()));
            }
            if !self.mask_height.is_multiple_of(stride) || !self.mask_width.is_multiple_of(stride) {
                return Err(EvalError::BadSpec(format!(
                    "mask {}x{} not divisible by stride {stride}",
                    self.mask_height, self.mask_width
                )));
            }
        }
        if self.shots == 0 {
            return Err(EvalError::BadSpec("shot count must be at least 1".into()));
        }
        if self.num_classes == 0 || self.clusters_per_class == 0 || self.background_clusters == 0 {
            return Err(EvalError::BadSpec(
                "class and cluster counts must be at least 1".into(),
            ));
        }
        if self.blob_count == 0 {
            return Err(EvalError::BadSpec("blob count must be at least 1".into()));
        }
        if self.blob_min_cells == 0 || self.blob_min_cells > self.blob_max_cells {
            return Err(EvalError::BadSpec(format!(
                "blob extent range {}..={} is empty",
                self.blob_min_cells, self.blob_max_cells
            )));
        }
        let grid_h = self.mask_height / self.level_strides[0];
        let grid_w = self.mask_width / self.level_strides[0];
        if self.blob_max_cells > grid_h || self.blob_max_cells > grid_w {
            return Err(EvalError::BadSpec(format!(
                "blob extent {} exceeds the {grid_h}x{grid_w} base grid",
                self.blob_max_cells
            )));
        }
        if self.antipodal
            && (!self.clusters_per_class.is_multiple_of(2) || !self.background_clusters.is_multiple_of(2))
        {
            return Err(EvalError::BadSpec(
                "antipodal layout needs even cluster counts".into(),
            ));
        }
        if !self.separation.is_finite() || !self.spread.is_finite() || self.spread < 0.0 {
            return Err(EvalError::BadSpec("bad separation or spread".into()));
        }
        Ok(())
    }
}

/// 64-bit mix with splitmix64 constants, used to derive independent seeds.
fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const CLASS_CENTER_STREAM: u64 = 0x636c_6173_7321;
const BACKGROUND_CENTER_STREAM: u64 = 0x6267_6e64_7321;
const LAYOUT_STREAM: u64 = 0x6c61_796f_7574;

fn unit_direction(rng: &mut ChaCha8Rng, dim: usize) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = v.norm();
        if norm > 1e-9 {
            return v / norm;
        }
    }
}

/// Draws a direction, removes its projection onto every vector in `against`,
/// and normalizes; retries while the residual is degenerate.
fn orthogonal_direction(
    rng: &mut ChaCha8Rng,
    dim: usize,
    against: &[DVector<f64>],
) -> DVector<f64> {
    loop {
        let mut v = unit_direction(rng, dim);
        for u in against {
            let proj = u.dot(&v);
            v -= u * proj;
        }
        let norm = v.norm();
        if norm > 1e-6 {
            return v / norm;
        }
    }
}

struct ClusterGeometry {
    foreground: Vec<DVector<f64>>,
    background: Vec<DVector<f64>>,
}

fn cluster_geometry(spec: &SyntheticEpisodeSpec, class_id: u32, level: usize) -> ClusterGeometry {
    let dim = spec.level_dims[level];
    let mut fg_rng = ChaCha8Rng::seed_from_u64(mix(
        CLASS_CENTER_STREAM,
        mix(class_id as u64, level as u64),
    ));
    let mut bg_rng =
        ChaCha8Rng::seed_from_u64(mix(BACKGROUND_CENTER_STREAM, level as u64));

    let (foreground, background) = if spec.antipodal {
        let mut fg_dirs = Vec::with_capacity(spec.clusters_per_class / 2);
        for _ in 0..spec.clusters_per_class / 2 {
            fg_dirs.push(unit_direction(&mut fg_rng, dim));
        }
        let mut fg = Vec::with_capacity(spec.clusters_per_class);
        for u in &fg_dirs {
            fg.push(u * spec.separation);
            fg.push(u * -spec.separation);
        }
        let mut bg = Vec::with_capacity(spec.background_clusters);
        for _ in 0..spec.background_clusters / 2 {
            let v = orthogonal_direction(&mut bg_rng, dim, &fg_dirs);
            bg.push(&v * spec.separation);
            bg.push(v * -spec.separation);
        }
        (fg, bg)
    } else {
        let fg = (0..spec.clusters_per_class)
            .map(|_| unit_direction(&mut fg_rng, dim) * spec.separation)
            .collect();
        let bg = (0..spec.background_clusters)
            .map(|_| unit_direction(&mut bg_rng, dim) * spec.separation)
            .collect();
        (fg, bg)
    };
    ClusterGeometry {
        foreground,
        background,
    }
}

#[derive(Debug, Clone, Copy)]
struct Blob {
    top: usize,
    left: usize,
    height: usize,
    width: usize,
    cluster: usize,
}

struct Layout {
    blobs: Vec<Blob>,
    rng: ChaCha8Rng,
}

impl Layout {
    /// Blob containing base-grid cell (`row`, `col`), if any; earlier blobs
    /// win overlaps.
    fn blob_at(&self, row: usize, col: usize) -> Option<&Blob> {
        self.blobs.iter().find(|b| {
            row >= b.top && row < b.top + b.height && col >= b.left && col < b.left + b.width
        })
    }
}

fn draw_layout(spec: &SyntheticEpisodeSpec, layout_index: u64) -> Layout {
    let mut rng =
        ChaCha8Rng::seed_from_u64(mix(LAYOUT_STREAM, mix(spec.seed, layout_index)));
    let grid_h = spec.mask_height / spec.level_strides[0];
    let grid_w = spec.mask_width / spec.level_strides[0];
    let blobs = (0..spec.blob_count)
        .map(|_| {
            let height = rng.random_range(spec.blob_min_cells..=spec.blob_max_cells);
            let width = rng.random_range(spec.blob_min_cells..=spec.blob_max_cells);
            let top = rng.random_range(0..=grid_h - height);
            let left = rng.random_range(0..=grid_w - width);
            let cluster = rng.random_range(0..spec.clusters_per_class);
            Blob {
                top,
                left,
                height,
                width,
                cluster,
            }
        })
        .collect();
    Layout { blobs, rng }
}

fn rasterize_mask(spec: &SyntheticEpisodeSpec, layout: &Layout) -> Mask {
    let s0 = spec.level_strides[0];
    let mut data = vec![false; spec.mask_height * spec.mask_width];
    for blob in &layout.blobs {
        let (r0, r1) = (blob.top * s0, (blob.top + blob.height) * s0);
        let (c0, c1) = (blob.left * s0, (blob.left + blob.width) * s0);
        for r in r0..r1 {
            for c in c0..c1 {
                data[r * spec.mask_width + c] = true;
            }
        }
    }
    Mask::new(spec.mask_height, spec.mask_width, data).expect("positive mask extents")
}

fn rasterize_features(
    spec: &SyntheticEpisodeSpec,
    geometry: &[ClusterGeometry],
    layout: &mut Layout,
) -> Vec<FeatureMap> {
    let s0 = spec.level_strides[0];
    let mut maps = Vec::with_capacity(spec.level_strides.len());
    for (level, &stride) in spec.level_strides.iter().enumerate() {
        let h = spec.mask_height / stride;
        let w = spec.mask_width / stride;
        let dim = spec.level_dims[level];
        let geo = &geometry[level];
        let mut data = Vec::with_capacity(h * w * dim);
        for r in 0..h {
            for c in 0..w {
                let center_row = (r * stride + stride / 2) / s0;
                let center_col = (c * stride + stride / 2) / s0;
                let center = match layout.blob_at(center_row, center_col) {
                    Some(blob) => &geo.foreground[blob.cluster],
                    None => {
                        let pick = layout.rng.random_range(0..geo.background.len());
                        &geo.background[pick]
                    }
                };
                for d in 0..dim {
                    let noise: f64 = layout.rng.sample(StandardNormal);
                    data.push(center[d] + spec.spread * noise);
                }
            }
        }
        maps.push(FeatureMap::new(h, w, dim, data).expect("positive grid extents"));
    }
    maps
}

/// Generates one episode. The same spec produces the identical episode every
/// time; the query and each shot come from independent streams keyed by the
/// spec seed, so changing the shot count leaves the query and the shared
/// shots unchanged.
pub fn generate_episode(spec: &SyntheticEpisodeSpec) -> Result<Episode, EvalError> {
    spec.validate()?;
    let class_id = (spec.seed % spec.num_classes as u64) as u32;
    let geometry: Vec<ClusterGeometry> = (0..spec.level_strides.len())
        .map(|level| cluster_geometry(spec, class_id, level))
        .collect();

    let mut query_layout = draw_layout(spec, 0);
    let query_mask = rasterize_mask(spec, &query_layout);
    let query_features = rasterize_features(spec, &geometry, &mut query_layout);

    let mut support = Vec::with_capacity(spec.shots);
    for k in 0..spec.shots {
        let mut layout = draw_layout(spec, k as u64 + 1);
        let mask = rasterize_mask(spec, &layout);
        let features = rasterize_features(spec, &geometry, &mut layout);
        support.push(SupportExample { features, mask });
    }

    Ok(Episode {
        support,
        query_features,
        query_mask,
        class_id,
        level_strides: spec.level_strides.clone(),
    })
}
