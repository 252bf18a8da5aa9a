//! Wall-clock benchmarks of the pipeline stages and the support-size scaling
//! of the fit stage.
//!
//! Each shot count yields one fixed episode; every stage is then re-executed
//! `runs` times on identical inputs and timed separately. The support size
//! reported with each row is the stacked support row count of the first
//! level, which is the exact stage cost for single-level specs such as
//! [`SyntheticEpisodeSpec::bench`]. The fit scaling exponent is the slope of
//! a least-squares line through (ln support size, ln mean fit time).

use std::time::Instant;

use super::metrics::EvalError;
use super::sweep::PipelineOptions;
use super::synthetic::{generate_episode, SyntheticEpisodeSpec};
use crate::cov_features::{extract_cov_window, unflatten_mean, MeanMap};
use crate::gp::{fit, FittedGp, GpPosterior, LevelProblem};
use crate::pipeline::{fuse_and_threshold, prepare_level_problem, Episode, PipelineConfig};

pub const PHASES: [&str; 5] = ["mask_encode", "fit", "predict", "window_extract", "readout"];

/// Mean and spread of one stage's wall time at one support size.
#[derive(Debug, Clone)]
pub struct BenchRow {
    pub phase: &'static str,
    pub support_size: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
}

/// All rows plus the fitted scaling exponent of the fit stage, when at least
/// two distinct support sizes were measured.
#[derive(Debug, Clone)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub fit_exponent: Option<f64>,
}

fn time_stage(runs: usize, mut stage: impl FnMut()) -> (f64, f64) {
    let mut samples_ms = Vec::with_capacity(runs);
    for _ in 0..runs {
        let start = Instant::now();
        stage();
        samples_ms.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let mean = samples_ms.iter().sum::<f64>() / samples_ms.len() as f64;
    let std = if samples_ms.len() > 1 {
        (samples_ms.iter().map(|s| (s - mean).powi(2)).sum::<f64>()
            / (samples_ms.len() - 1) as f64)
            .sqrt()
    } else {
        0.0
    };
    (mean, std)
}

struct StageInputs {
    episode: Episode,
    config: PipelineConfig,
    problems: Vec<LevelProblem>,
    fitted: Vec<FittedGp>,
    posteriors: Vec<GpPosterior>,
    mean_maps: Vec<MeanMap>,
}

fn build_stage_inputs(
    spec: &SyntheticEpisodeSpec,
    options: &PipelineOptions,
    shots: usize,
) -> Result<StageInputs, EvalError> {
    let episode = generate_episode(&spec.clone().with_shots(shots))?;
    episode.validate()?;
    let config = options.config_for(&episode);
    let problems: Vec<LevelProblem> = (0..episode.levels())
        .map(|a| prepare_level_problem(&episode, &config, a))
        .collect::<Result<_, _>>()?;
    let fitted: Vec<FittedGp> = problems
        .iter()
        .map(|p| fit(&p.x_s, &p.y_s, &p.config))
        .collect::<Result<_, _>>()
        .map_err(crate::pipeline::PipelineError::from)?;
    let posteriors: Vec<GpPosterior> = fitted
        .iter()
        .zip(&problems)
        .map(|(g, p)| g.predict(&p.x_q, true))
        .collect::<Result<_, _>>()
        .map_err(crate::pipeline::PipelineError::from)?;
    let mean_maps: Vec<MeanMap> = posteriors
        .iter()
        .zip(&episode.query_features)
        .map(|(post, qf)| unflatten_mean(&post.mean, qf.height(), qf.width()))
        .collect::<Result<_, _>>()
        .map_err(crate::pipeline::PipelineError::from)?;
    Ok(StageInputs {
        episode,
        config,
        problems,
        fitted,
        posteriors,
        mean_maps,
    })
}

/// Times every pipeline stage at each shot count, re-running each stage
/// `runs` times. An empty shot list produces an empty report.
pub fn bench_runtimes(
    spec: &SyntheticEpisodeSpec,
    options: &PipelineOptions,
    shot_counts: &[usize],
    runs: usize,
) -> Result<BenchReport, EvalError> {
    if runs == 0 {
        return Err(EvalError::BadSpec("bench needs at least one run".into()));
    }
    let mut rows = Vec::new();
    let mut fit_points: Vec<(f64, f64)> = Vec::new();

    for &shots in shot_counts {
        let inputs = build_stage_inputs(spec, options, shots)?;
        let support_size = inputs.problems[0].x_s.nrows();
        let levels = inputs.episode.levels();

        let (encode_mean, encode_std) = time_stage(runs, || {
            for a in 0..levels {
                let p = prepare_level_problem(&inputs.episode, &inputs.config, a)
                    .expect("stage inputs already validated");
                std::hint::black_box(&p.x_s);
            }
        });
        rows.push(BenchRow {
            phase: "mask_encode",
            support_size,
            mean_ms: encode_mean,
            std_ms: encode_std,
        });

        let (fit_mean, fit_std) = time_stage(runs, || {
            for p in &inputs.problems {
                let g = fit(&p.x_s, &p.y_s, &p.config).expect("stage inputs already fitted");
                std::hint::black_box(g.chol_factor()[(0, 0)]);
            }
        });
        rows.push(BenchRow {
            phase: "fit",
            support_size,
            mean_ms: fit_mean,
            std_ms: fit_std,
        });
        if fit_mean > 0.0 {
            fit_points.push(((support_size as f64).ln(), (fit_mean * 1e-3).ln()));
        }

        let (predict_mean, predict_std) = time_stage(runs, || {
            for (g, p) in inputs.fitted.iter().zip(&inputs.problems) {
                let post = g.predict(&p.x_q, true).expect("stage inputs already predicted");
                std::hint::black_box(post.mean[(0, 0)]);
            }
        });
        rows.push(BenchRow {
            phase: "predict",
            support_size,
            mean_ms: predict_mean,
            std_ms: predict_std,
        });

        let (window_mean, window_std) = time_stage(runs, || {
            for (post, qf) in inputs.posteriors.iter().zip(&inputs.episode.query_features) {
                let sigma = post.covariance.as_ref().expect("covariance was requested");
                let m = extract_cov_window(
                    sigma,
                    qf.height(),
                    qf.width(),
                    inputs.config.window,
                    0.0,
                )
                .expect("stage inputs already windowed");
                std::hint::black_box(m.data().len());
            }
        });
        rows.push(BenchRow {
            phase: "window_extract",
            support_size,
            mean_ms: window_mean,
            std_ms: window_std,
        });

        let (h0, w0) = (
            inputs.episode.query_mask.height(),
            inputs.episode.query_mask.width(),
        );
        let (readout_mean, readout_std) = time_stage(runs, || {
            let (fused, mask) =
                fuse_and_threshold(&inputs.mean_maps, h0, w0, inputs.config.threshold)
                    .expect("stage inputs already fused");
            std::hint::black_box((fused.data().len(), mask.foreground_count()));
        });
        rows.push(BenchRow {
            phase: "readout",
            support_size,
            mean_ms: readout_mean,
            std_ms: readout_std,
        });
    }

    Ok(BenchReport {
        fit_exponent: scaling_exponent(&fit_points),
        rows,
    })
}

/// Least-squares slope through log-log points; `None` below two distinct
/// sizes.
fn scaling_exponent(points: &[(f64, f64)]) -> Option<f64> {
    let mut distinct: Vec<f64> = points.iter().map(|p| p.0).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mean_x).powi(2)).sum();
    let sxy: f64 = points
        .iter()
        .map(|p| (p.0 - mean_x) * (p.1 - mean_y))
        .sum();
    Some(sxy / sxx)
}

/// Renders bench rows as CSV with columns `phase,s,mean_ms,std_ms`.
pub fn bench_csv_string(report: &BenchReport) -> String {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(["phase", "s", "mean_ms", "std_ms"]).expect("in-memory write");
    for row in &report.rows {
        wtr.write_record([
            row.phase.to_string(),
            row.support_size.to_string(),
            format!("{:.4}", row.mean_ms),
            format!("{:.4}", row.std_ms),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(wtr.into_inner().expect("in-memory flush")).expect("ascii output")
}
