//! Batched episode evaluation and shot-count sweeps.
//!
//! Episodes are generated and run in parallel but accumulated in episode
//! order, so results do not depend on the worker count. A sweep splits the
//! episodes of each shot count into up to five equal sub-runs, scores each
//! sub-run with fold aggregation, and reports the mean and sample standard
//! deviation over sub-runs.

use rayon::prelude::*;

use super::metrics::{overlap_counts, EvalError, FoldAccumulator};
use super::synthetic::{generate_episode, SyntheticEpisodeSpec};
use crate::kernels::{KernelConfig, KernelKind};
use crate::pipeline::{run_episode, Episode, MaskEncoding, PipelineConfig};

/// User-facing pipeline knobs that expand into a per-level
/// [`PipelineConfig`] once an episode's level dimensions are known.
#[derive(Debug, Clone, Copy)]
pub struct PipelineOptions {
    pub kind: KernelKind,
    pub sigma_f_sq: f64,
    pub noise_sq: f64,
    /// Fixed squared length scale; `None` keeps the per-level default of
    /// sqrt(dim).
    pub length_sq: Option<f64>,
    /// Multiplier applied on top of the default or fixed squared length.
    pub length_scale_factor: f64,
    pub window: usize,
    pub support_stride_target: usize,
    pub encoding: MaskEncoding,
    pub threshold: f64,
}

impl PipelineOptions {
    pub fn new(kind: KernelKind) -> Self {
        Self {
            kind,
            sigma_f_sq: 1.0,
            noise_sq: 0.1,
            length_sq: None,
            length_scale_factor: 1.0,
            window: 5,
            support_stride_target: 32,
            encoding: MaskEncoding::PlusMinusOne,
            threshold: 0.0,
        }
    }

    /// Expands into a concrete per-level configuration for `episode`.
    pub fn config_for(&self, episode: &Episode) -> PipelineConfig {
        let kernels = episode
            .query_features
            .iter()
            .map(|f| {
                let base = self
                    .length_sq
                    .unwrap_or_else(|| (f.dim() as f64).sqrt());
                KernelConfig {
                    kind: self.kind,
                    sigma_f_sq: self.sigma_f_sq,
                    length_sq: base * self.length_scale_factor,
                    noise_sq: self.noise_sq,
                }
            })
            .collect();
        PipelineConfig {
            kernels,
            window: self.window,
            support_stride_target: self.support_stride_target,
            encoding: self.encoding,
            threshold: self.threshold,
        }
    }
}

/// Outcome of one synthetic episode.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeResult {
    pub index: usize,
    pub seed: u64,
    pub class_id: u32,
    pub iou: f64,
    pub intersection: u64,
    pub union: u64,
    pub predicted_foreground: u64,
    pub true_foreground: u64,
}

/// Generates and runs `count` episodes seeded `spec.seed + index`, in
/// parallel, returning per-episode results in index order.
pub fn run_synthetic_episodes(
    spec: &SyntheticEpisodeSpec,
    options: &PipelineOptions,
    count: usize,
) -> Result<Vec<EpisodeResult>, EvalError> {
    (0..count)
        .into_par_iter()
        .map(|index| {
            let seed = spec.seed.wrapping_add(index as u64);
            let episode = generate_episode(&spec.clone().with_seed(seed))?;
            let config = options.config_for(&episode);
            let output = run_episode(&episode, &config)?;
            let pred = &output.predicted_mask;
            let gt = &episode.query_mask;
            let (intersection, union) = overlap_counts(pred, gt)?;
            let iou = if union == 0 {
                1.0
            } else {
                intersection as f64 / union as f64
            };
            Ok(EpisodeResult {
                index,
                seed,
                class_id: episode.class_id,
                iou,
                intersection,
                union,
                predicted_foreground: pred.foreground_count() as u64,
                true_foreground: gt.foreground_count() as u64,
            })
        })
        .collect()
}

/// One row of a shot-count sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KshotRow {
    pub shots: usize,
    pub mean_miou: f64,
    pub std_miou: f64,
}

/// Runs `episodes_per_point` episodes at every shot count and scores them in
/// up to five equal sub-runs; each point reuses the same episode seeds, so
/// queries and shared shots are paired across shot counts.
pub fn kshot_sweep(
    spec: &SyntheticEpisodeSpec,
    options: &PipelineOptions,
    shot_counts: &[usize],
    episodes_per_point: usize,
) -> Result<Vec<KshotRow>, EvalError> {
    if episodes_per_point == 0 {
        return Err(EvalError::BadSpec("episodes per point must be positive".into()));
    }
    let mut rows = Vec::with_capacity(shot_counts.len());
    for &shots in shot_counts {
        let results =
            run_synthetic_episodes(&spec.clone().with_shots(shots), options, episodes_per_point)?;
        let sub_runs = episodes_per_point.min(5);
        let mut scores = Vec::with_capacity(sub_runs);
        for chunk in 0..sub_runs {
            let lo = chunk * episodes_per_point / sub_runs;
            let hi = (chunk + 1) * episodes_per_point / sub_runs;
            let mut fold = FoldAccumulator::new();
            for r in &results[lo..hi] {
                fold.add_counts(r.class_id, r.intersection, r.union);
            }
            scores.push(fold.miou().unwrap_or(1.0));
        }
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        let std = if scores.len() > 1 {
            let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>()
                / (scores.len() - 1) as f64;
            var.sqrt()
        } else {
            0.0
        };
        rows.push(KshotRow {
            shots,
            mean_miou: mean,
            std_miou: std,
        });
    }
    Ok(rows)
}

/// Renders sweep rows as CSV with columns `k,mean_miou,std`. Fixed-precision
/// formatting keeps equal inputs byte-identical.
pub fn kshot_csv_string(rows: &[KshotRow]) -> String {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(["k", "mean_miou", "std"]).expect("in-memory write");
    for row in rows {
        wtr.write_record([
            row.shots.to_string(),
            format!("{:.6}", row.mean_miou),
            format!("{:.6}", row.std_miou),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(wtr.into_inner().expect("in-memory flush")).expect("ascii output")
}
