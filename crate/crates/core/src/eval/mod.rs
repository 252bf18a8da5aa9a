//! Evaluation: segmentation metrics, synthetic episode generation, shot-count
//! sweeps, and runtime benchmarks.

mod bench;
mod metrics;
mod sweep;
mod synthetic;

pub use bench::{bench_csv_string, bench_runtimes, BenchReport, BenchRow, PHASES};
pub use metrics::{iou, overlap_counts, EvalError, FoldAccumulator};
pub use sweep::{
    kshot_csv_string, kshot_sweep, run_synthetic_episodes, EpisodeResult, KshotRow,
    PipelineOptions,
};
pub use synthetic::{generate_episode, SyntheticEpisodeSpec};
