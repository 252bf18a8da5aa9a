//! Command-line interface for the dense GP few-shot segmentation engine.
//!
//! Subcommands: `run` executes one episode loaded from a directory of tensor
//! files, `sweep` writes a shot-count sweep CSV over synthetic episodes,
//! `bench` writes stage timings and reports the fit scaling exponent,
//! `selftest` checks the build against its naive reference implementations,
//! and `dump` prints a tensor file header and basic statistics.
//!
//! Exit codes: 0 on success, 2 for invalid input (arguments, files, specs),
//! 1 for numerical failures and runtime errors. Log verbosity is controlled
//! by the `DGP_LOG` environment variable (error, warn, info, debug, trace).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use dgp_core::eval::{
    bench_csv_string, bench_runtimes, kshot_csv_string, kshot_sweep, EvalError, PipelineOptions,
    SyntheticEpisodeSpec,
};
use dgp_core::gp::GpError;
use dgp_core::kernels::KernelKind;
use dgp_core::pipeline::{
    run_episode, Episode, FeatureMap, Mask, MaskEncoding, PipelineError, SupportExample,
};
use dgp_core::reference::{conditioning_suite, ridge_suite, window_suite, SuiteReport};
use dgp_core::tensor_io::{load_tensor, save_tensor, DenseTensor, TensorError};

#[derive(Parser)]
#[command(name = "dgp", version, about = "Dense GP few-shot segmentation engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Episode worker threads; 0 uses all cores.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
}

#[derive(Args, Debug)]
struct PipelineFlags {
    /// Kernel: linear, exponential, or se.
    #[arg(long, default_value = "se")]
    kernel: KernelKind,
    /// Signal variance of the se kernel.
    #[arg(long, default_value_t = 1.0)]
    sigma_f_sq: f64,
    /// Observation noise added to the support Gram diagonal.
    #[arg(long, default_value_t = 0.1)]
    noise_sq: f64,
    /// Squared length scale; defaults to sqrt(feature dim) per level.
    #[arg(long)]
    length_sq: Option<f64>,
    /// Covariance window size (odd).
    #[arg(long, default_value_t = 5)]
    window: usize,
    /// Per-level feature strides, comma separated. Synthetic commands
    /// default to their spec's strides; `run` derives strides from the
    /// episode files and only checks this flag against them.
    #[arg(long, value_delimiter = ',')]
    strides: Option<Vec<usize>>,
    /// Mask encoding channels; 1 is the plain [-1, 1] encoding.
    #[arg(long, default_value_t = 1)]
    encode_channels: usize,
    /// Base RNG seed.
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

impl PipelineFlags {
    fn options(&self) -> PipelineOptions {
        let mut opts = PipelineOptions::new(self.kernel);
        opts.sigma_f_sq = self.sigma_f_sq;
        opts.noise_sq = self.noise_sq;
        opts.length_sq = self.length_sq;
        opts.window = self.window;
        opts.encoding = if self.encode_channels <= 1 {
            MaskEncoding::PlusMinusOne
        } else {
            MaskEncoding::Channels {
                count: self.encode_channels,
                seed: self.seed,
            }
        };
        opts
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Layout {
    /// Independent random cluster centers.
    Standard,
    /// Opposing-pair centers with orthogonal background.
    Antipodal,
}

#[derive(Subcommand)]
enum Command {
    /// Run one episode from a directory of tensor files and print its result
    /// as a JSON line.
    Run {
        /// Directory holding feat_s{k}_l{a}.dgpt, mask_s{k}.dgpt,
        /// feat_q_l{a}.dgpt, and mask_q.dgpt.
        dir: PathBuf,
        #[command(flatten)]
        pipeline: PipelineFlags,
        /// Directory for the predicted mask and fused score map.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write per-level posterior mean and covariance-window maps.
        #[arg(long, default_value_t = false)]
        dump_zmaps: bool,
    },
    /// Sweep shot counts over synthetic episodes and write kshot.csv.
    Sweep {
        #[command(flatten)]
        pipeline: PipelineFlags,
        /// Shot counts to evaluate.
        #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
        shots: Vec<usize>,
        /// Episodes per shot count.
        #[arg(long, default_value_t = 200)]
        episodes: usize,
        /// Cluster layout of the synthetic episodes.
        #[arg(long, value_enum, default_value_t = Layout::Standard)]
        layout: Layout,
        /// Output directory for kshot.csv.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Time pipeline stages over synthetic episodes and write bench.csv.
    Bench {
        #[command(flatten)]
        pipeline: PipelineFlags,
        /// Shot counts; each multiplies the per-shot support size.
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        shots: Vec<usize>,
        /// Timed runs per stage.
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        /// Output directory for bench.csv.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Compare the build against its naive reference implementations.
    Selftest {
        /// Error injected into the compared outputs; proves the suites can
        /// fail.
        #[arg(long, hide = true, default_value_t = 0.0)]
        inject_tolerance_error: f64,
    },
    /// Print a tensor file's shape, dtype, and basic statistics.
    Dump { file: PathBuf },
}

/// Failures sorted by exit code: invalid input exits 2, runtime and
/// numerical failures exit 1.
#[derive(Debug)]
enum CliError {
    Input(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Input(m) | CliError::Runtime(m) => m,
        }
    }
}

fn gp_is_numerical(e: &GpError) -> bool {
    match e {
        GpError::NotPositiveDefinite { .. } => true,
        GpError::AtLevel { source, .. } => gp_is_numerical(source),
        _ => false,
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match &e {
            PipelineError::Gp(g) if gp_is_numerical(g) => CliError::Runtime(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Pipeline(p) => p.into(),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        CliError::Input(e.to_string())
    }
}

fn load_tensor_named(path: &Path) -> Result<DenseTensor, CliError> {
    load_tensor(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn load_episode_dir(dir: &Path) -> Result<Episode, CliError> {
    if !dir.is_dir() {
        return Err(CliError::Input(format!(
            "{} is not a directory",
            dir.display()
        )));
    }
    let query_mask_path = dir.join("mask_q.dgpt");
    if !query_mask_path.is_file() {
        return Err(CliError::Input(format!(
            "missing query mask {}",
            query_mask_path.display()
        )));
    }
    let query_mask = Mask::from_tensor(&load_tensor_named(&query_mask_path)?)
        .map_err(|e| CliError::Input(format!("{}: {e}", query_mask_path.display())))?;

    let mut query_features = Vec::new();
    loop {
        let path = dir.join(format!("feat_q_l{}.dgpt", query_features.len()));
        if !path.is_file() {
            break;
        }
        let feat = FeatureMap::from_tensor(&load_tensor_named(&path)?)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        query_features.push(feat);
    }
    if query_features.is_empty() {
        return Err(CliError::Input(format!(
            "missing query features {}",
            dir.join("feat_q_l0.dgpt").display()
        )));
    }

    let mut level_strides = Vec::with_capacity(query_features.len());
    for (a, f) in query_features.iter().enumerate() {
        if f.height() == 0 || query_mask.height() % f.height() != 0 {
            return Err(CliError::Input(format!(
                "level {a} grid {}x{} does not divide mask {}x{}",
                f.height(),
                f.width(),
                query_mask.height(),
                query_mask.width()
            )));
        }
        let stride = query_mask.height() / f.height();
        if f.width() * stride != query_mask.width() {
            return Err(CliError::Input(format!(
                "level {a} grid {}x{} is inconsistent with mask {}x{}",
                f.height(),
                f.width(),
                query_mask.height(),
                query_mask.width()
            )));
        }
        level_strides.push(stride);
    }

    let mut support = Vec::new();
    loop {
        let k = support.len();
        let mask_path = dir.join(format!("mask_s{k}.dgpt"));
        if !mask_path.is_file() {
            break;
        }
        let mask = Mask::from_tensor(&load_tensor_named(&mask_path)?)
            .map_err(|e| CliError::Input(format!("{}: {e}", mask_path.display())))?;
        let mut features = Vec::with_capacity(query_features.len());
        for a in 0..query_features.len() {
            let path = dir.join(format!("feat_s{k}_l{a}.dgpt"));
            if !path.is_file() {
                return Err(CliError::Input(format!(
                    "missing support features {}",
                    path.display()
                )));
            }
            let feat = FeatureMap::from_tensor(&load_tensor_named(&path)?)
                .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
            features.push(feat);
        }
        support.push(SupportExample { features, mask });
    }
    if support.is_empty() {
        return Err(CliError::Input(format!(
            "missing support mask {}",
            dir.join("mask_s0.dgpt").display()
        )));
    }

    let episode = Episode {
        support,
        query_features,
        query_mask,
        class_id: 0,
        level_strides,
    };
    episode.validate().map_err(CliError::from)?;
    Ok(episode)
}

fn write_tensor_checked(tensor: &DenseTensor, path: &Path) -> Result<(), CliError> {
    save_tensor(tensor, path)
        .map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))
}

fn cmd_run(
    dir: &Path,
    flags: &PipelineFlags,
    out: Option<&Path>,
    dump_zmaps: bool,
) -> Result<(), CliError> {
    let episode = load_episode_dir(dir)?;
    if let Some(expected) = &flags.strides {
        if *expected != episode.level_strides {
            return Err(CliError::Input(format!(
                "--strides {:?} do not match the strides {:?} derived from {}",
                expected,
                episode.level_strides,
                dir.display()
            )));
        }
    }
    let options = flags.options();
    let config = options.config_for(&episode);
    log::info!(
        "running episode {} with {} shots over {} levels",
        dir.display(),
        episode.shots(),
        episode.levels()
    );
    let output = run_episode(&episode, &config).map_err(CliError::from)?;

    let (intersection, union) =
        dgp_core::eval::overlap_counts(&output.predicted_mask, &episode.query_mask)
            .map_err(CliError::from)?;
    let iou = if union == 0 {
        1.0
    } else {
        intersection as f64 / union as f64
    };
    let line = serde_json::json!({
        "episode": dir.display().to_string(),
        "class_id": episode.class_id,
        "shots": episode.shots(),
        "levels": episode.levels(),
        "strides": episode.level_strides,
        "iou": iou,
        "intersection": intersection,
        "union": union,
        "pred_foreground": output.predicted_mask.foreground_count(),
        "true_foreground": episode.query_mask.foreground_count(),
    });
    println!("{line}");

    if let Some(out_dir) = out {
        std::fs::create_dir_all(out_dir)
            .map_err(|e| CliError::Runtime(format!("creating {}: {e}", out_dir.display())))?;
        write_tensor_checked(&output.predicted_mask.to_tensor(), &out_dir.join("pred_mask.dgpt"))?;
        let fused = DenseTensor::from_f64(
            vec![output.fused.height(), output.fused.width()],
            output.fused.data().to_vec(),
        )
        .map_err(CliError::from)?;
        write_tensor_checked(&fused, &out_dir.join("fused.dgpt"))?;
        if dump_zmaps {
            for (a, (mu, sigma)) in output
                .mean_maps
                .iter()
                .zip(&output.cov_windows)
                .enumerate()
            {
                let mu_t = DenseTensor::from_f64(
                    vec![mu.height(), mu.width(), mu.channels()],
                    mu.data().to_vec(),
                )
                .map_err(CliError::from)?;
                write_tensor_checked(&mu_t, &out_dir.join(format!("z_mu_l{a}.dgpt")))?;
                let sig_t = DenseTensor::from_f64(
                    vec![sigma.height(), sigma.width(), sigma.window() * sigma.window()],
                    sigma.data().to_vec(),
                )
                .map_err(CliError::from)?;
                write_tensor_checked(&sig_t, &out_dir.join(format!("z_sigma_l{a}.dgpt")))?;
            }
        }
    }
    Ok(())
}

fn synthetic_spec(layout: Layout, flags: &PipelineFlags) -> Result<SyntheticEpisodeSpec, CliError> {
    let mut spec = match layout {
        Layout::Standard => SyntheticEpisodeSpec::standard(flags.seed),
        Layout::Antipodal => SyntheticEpisodeSpec::antipodal(flags.seed),
    };
    if let Some(strides) = &flags.strides {
        spec.level_strides = strides.clone();
        spec.level_dims = vec![16; strides.len()];
    }
    Ok(spec)
}

fn cmd_sweep(
    flags: &PipelineFlags,
    shots: &[usize],
    episodes: usize,
    layout: Layout,
    out: &Path,
) -> Result<(), CliError> {
    let spec = synthetic_spec(layout, flags)?;
    let options = flags.options();
    log::info!(
        "sweeping shots {:?} with {episodes} episodes per point, seed {}",
        shots,
        flags.seed
    );
    let rows = kshot_sweep(&spec, &options, shots, episodes).map_err(CliError::from)?;
    for row in &rows {
        println!(
            "k={} mean_miou={:.6} std={:.6}",
            row.shots, row.mean_miou, row.std_miou
        );
    }
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::Runtime(format!("creating {}: {e}", out.display())))?;
    let path = out.join("kshot.csv");
    std::fs::write(&path, kshot_csv_string(&rows))
        .map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_bench(
    flags: &PipelineFlags,
    shots: &[usize],
    runs: usize,
    out: &Path,
) -> Result<(), CliError> {
    let mut spec = SyntheticEpisodeSpec::bench(flags.seed);
    if let Some(strides) = &flags.strides {
        spec.level_strides = strides.clone();
        spec.level_dims = vec![16; strides.len()];
    }
    let mut options = flags.options();
    options.support_stride_target = spec.level_strides.iter().copied().max().unwrap_or(32);
    log::info!(
        "benchmarking shots {:?} with {runs} runs per stage, seed {}",
        shots,
        flags.seed
    );
    let report = bench_runtimes(&spec, &options, shots, runs).map_err(CliError::from)?;
    for row in &report.rows {
        println!(
            "phase={} s={} mean_ms={:.4} std_ms={:.4}",
            row.phase, row.support_size, row.mean_ms, row.std_ms
        );
    }
    match report.fit_exponent {
        Some(exp) => println!("fit scaling exponent: {exp:.3}"),
        None => println!("fit scaling exponent: not available (need two support sizes)"),
    }
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::Runtime(format!("creating {}: {e}", out.display())))?;
    let path = out.join("bench.csv");
    std::fs::write(&path, bench_csv_string(&report))
        .map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_selftest(inject: f64) -> Result<(), CliError> {
    let reports: Vec<SuiteReport> = vec![
        conditioning_suite(25, 0xC0DE, 1e-6, inject),
        ridge_suite(25, 0x41D6E, 1e-6, inject),
        window_suite(10, 0x817D0, inject),
    ];
    let mut all_passed = true;
    for r in &reports {
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        println!(
            "[{verdict}] {}: {} cases, {} failures, max err {:.3e}",
            r.name, r.cases, r.failures, r.max_err
        );
        all_passed &= r.passed();
    }
    if all_passed {
        println!("selftest passed");
        Ok(())
    } else {
        Err(CliError::Runtime("selftest failed".into()))
    }
}

fn cmd_dump(file: &Path) -> Result<(), CliError> {
    let tensor = load_tensor_named(file)?;
    let values = tensor.to_f64_vec();
    let (mut min, mut max, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
    for &v in &values {
        min = min.min(v);
        max = max.max(v);
        sum += v;
    }
    let mean = sum / values.len() as f64;
    println!("file: {}", file.display());
    println!("dtype: {}", tensor.dtype());
    println!(
        "shape: [{}]",
        tensor
            .shape()
            .iter()
            .map(|e| e.to_string())
            .collect::<Vec<_>>()
            .join(", ")
    );
    println!("elements: {}", values.len());
    println!("min: {min:.6}  max: {max:.6}  mean: {mean:.6}");
    let head: Vec<String> = values.iter().take(8).map(|v| format!("{v:.6}")).collect();
    let ellipsis = if values.len() > 8 { ", ..." } else { "" };
    println!("values: [{}{}]", head.join(", "), ellipsis);
    Ok(())
}

fn run_cli(cli: Cli) -> Result<(), CliError> {
    if cli.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.workers)
            .build_global()
            .map_err(|e| CliError::Input(format!("setting up {} workers: {e}", cli.workers)))?;
    }
    match &cli.command {
        Command::Run {
            dir,
            pipeline,
            out,
            dump_zmaps,
        } => cmd_run(dir, pipeline, out.as_deref(), *dump_zmaps),
        Command::Sweep {
            pipeline,
            shots,
            episodes,
            layout,
            out,
        } => cmd_sweep(pipeline, shots, *episodes, *layout, out),
        Command::Bench {
            pipeline,
            shots,
            episodes,
            out,
        } => cmd_bench(pipeline, shots, *episodes, out),
        Command::Selftest {
            inject_tolerance_error,
        } => cmd_selftest(*inject_tolerance_error),
        Command::Dump { file } => cmd_dump(file),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DGP_LOG", "warn")).init();
    let cli = Cli::parse();
    match run_cli(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
