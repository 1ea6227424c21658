//! Batch experiments: single runs with their output files, parameter sweeps
//! over (setting, seed) cells, and plot-ready CSV emission.
//!
//! Sweep CSVs put the swept parameters first, then `seed`, then metric
//! columns, one row per cell. `plot-data` groups rows by the columns left of
//! `seed` and writes the per-group mean and standard deviation of every
//! metric column.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::config::{ExperimentConfig, SweepKind};
use crate::estimation::{
    check_window, coarse_search, local_minima, refine, residual_grid, EstimatorConfig, RangingWindow,
    SearchConfig, WindowEntry,
};
use crate::geometry::Pose2;
use crate::metrics::{format_closures, format_estimates, parse_closures, parse_estimates, pose_error, run_metrics};
use crate::metrics::{compute_metrics, MetricsError, MetricsReport};
use crate::network::MessageKind;
use crate::scenario::{generate_dataset, read_dataset, write_dataset, Dataset, DatasetError, RobotId, ScenarioError};
use crate::sim::{infer_ranging_rate, run_pipeline, PipelineOutput, SimError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("missing input files: {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingInputs(Vec<PathBuf>),
    #[error("{path}: {message}")]
    Csv { path: PathBuf, message: String },
}

fn write_file(path: &Path, contents: &str) -> Result<(), ExperimentError> {
    fs::write(path, contents).map_err(|source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_file(path: &Path) -> Result<String, ExperimentError> {
    fs::read_to_string(path).map_err(|source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(path: &Path) -> Result<(), ExperimentError> {
    fs::create_dir_all(path).map_err(|source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn require(paths: &[PathBuf]) -> Result<(), ExperimentError> {
    let missing: Vec<PathBuf> = paths.iter().filter(|p| !p.is_file()).cloned().collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(ExperimentError::MissingInputs(missing))
    }
}

/// The dataset named by the config, or a generated one.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset, ExperimentError> {
    if cfg.run.dataset.as_os_str().is_empty() {
        Ok(generate_dataset(&cfg.scenario, &cfg.noise)?)
    } else {
        Ok(read_dataset(&cfg.run.dataset)?)
    }
}

pub const DATASET_FILE: &str = "dataset.txt";
pub const TRAJECTORIES_FILE: &str = "trajectories.txt";
pub const CLOSURES_FILE: &str = "closures.txt";
pub const COST_FILE: &str = "cost_trace.csv";
pub const COMM_FILE: &str = "comm.csv";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_TXT: &str = "metrics.txt";
pub const CONFIG_FILE: &str = "config.toml";

pub fn cost_trace_csv(output: &PipelineOutput) -> String {
    let mut out = String::from("round,t,cost,max_step,complete\n");
    for s in &output.cost_trace {
        let _ = writeln!(out, "{},{},{:e},{:e},{}", s.round, s.t, s.cost, s.max_step, u8::from(s.complete));
    }
    out
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub output: PipelineOutput,
    /// Present when the dataset carries ground truth.
    pub report: Option<MetricsReport>,
    pub files: Vec<PathBuf>,
}

/// Run the pipeline once and write every output file into `run.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunArtifacts, ExperimentError> {
    let dataset = load_dataset(cfg)?;
    let output = run_pipeline(&dataset, &cfg.pipeline, &cfg.network)?;
    let report = match &dataset.truth {
        Some(truth) => Some(run_metrics(&output, truth)?),
        None => None,
    };
    let dir = &cfg.run.output_dir;
    create_dir(dir)?;
    let mut files = Vec::new();
    let mut put = |name: &str, text: String| -> Result<(), ExperimentError> {
        let path = dir.join(name);
        write_file(&path, &text)?;
        files.push(path);
        Ok(())
    };
    put(CONFIG_FILE, cfg.to_toml())?;
    put(TRAJECTORIES_FILE, format_estimates(&output.trajectories))?;
    put(CLOSURES_FILE, format_closures(&output.closures, &output.inliers))?;
    put(COST_FILE, cost_trace_csv(&output))?;
    put(COMM_FILE, output.comm.to_csv())?;
    if let Some(r) = &report {
        put(METRICS_CSV, r.to_csv())?;
        put(METRICS_TXT, r.to_text())?;
    }
    let data_path = dir.join(DATASET_FILE);
    write_dataset(&data_path, &dataset)?;
    files.push(data_path);
    Ok(RunArtifacts { output, report, files })
}

/// Recompute error metrics from the files of a previous run.
pub fn metrics_from_outputs(dir: &Path, dataset: Option<&Path>) -> Result<MetricsReport, ExperimentError> {
    let data_path = dataset.map_or_else(|| dir.join(DATASET_FILE), Path::to_path_buf);
    let traj_path = dir.join(TRAJECTORIES_FILE);
    let lc_path = dir.join(CLOSURES_FILE);
    require(&[data_path.clone(), traj_path.clone(), lc_path.clone()])?;
    let data = read_dataset(&data_path)?;
    let truth = data.truth.ok_or_else(|| ExperimentError::Csv {
        path: data_path.clone(),
        message: "dataset has no ground truth".into(),
    })?;
    let trajectories = parse_estimates(&read_file(&traj_path)?)?;
    let (closures, inliers) = parse_closures(&read_file(&lc_path)?)?;
    Ok(compute_metrics(&closures, &inliers, &trajectories, &truth)?)
}

/// Errors (m, deg) and solve times (ms) of the three estimator variants.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EstimatorEval {
    /// Refinement started from the identity.
    pub nls: Vec<(f64, f64)>,
    pub coarse: Vec<(f64, f64)>,
    /// Coarse search followed by refinement.
    pub combined: Vec<(f64, f64)>,
    pub nls_ms: Vec<f64>,
    pub coarse_ms: Vec<f64>,
    pub combined_ms: Vec<f64>,
}

impl EstimatorEval {
    pub fn windows(&self) -> usize {
        self.combined.len()
    }
}

pub fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Estimate every lower-to-higher id pair at window ends `start`,
/// `start + stride`, … and score against ground truth. Windows shorter than
/// τ, spanning more than `max_span_factor`·τ or failing the excitation check
/// are skipped.
pub fn evaluate_estimator(
    dataset: &Dataset,
    cfg: &EstimatorConfig,
    start: f64,
    stride: f64,
    max_span_factor: f64,
) -> EstimatorEval {
    let mut eval = EstimatorEval::default();
    let Some(truth) = &dataset.truth else {
        return eval;
    };
    let rate = infer_ranging_rate(dataset);
    let tau = cfg.window_samples(rate);
    let max_span = max_span_factor * tau as f64 / rate;
    let robots = dataset.robots();
    let end = dataset.end_time();
    for (i, &a) in robots.iter().enumerate() {
        for &b in &robots[i + 1..] {
            let ranges = dataset.ranging_between(a, b);
            let (oa, ob) = (&dataset.odometry[&a], &dataset.odometry[&b]);
            let mut t = start;
            while t <= end + 1e-9 {
                let window = RangingWindow::from_streams(a, b, oa, ob, &ranges, tau, t);
                t += stride;
                let Ok(window) = window else { continue };
                let span = window.end_time() - window.entries()[0].t;
                if window.len() < tau || span > max_span || check_window(&window, cfg).is_err() {
                    continue;
                }
                let Some(z) = truth.relative_pose(a, b, window.end_time()) else {
                    continue;
                };
                let clock = Instant::now();
                let Ok(coarse) = coarse_search(&window, &cfg.search) else {
                    continue;
                };
                let coarse_ms = clock.elapsed().as_secs_f64() * 1e3;
                let combined = refine(&coarse.pose, &window, &cfg.refine);
                let combined_ms = clock.elapsed().as_secs_f64() * 1e3;
                let clock = Instant::now();
                let nls = refine(&Pose2::identity(), &window, &cfg.refine);
                let nls_ms = clock.elapsed().as_secs_f64() * 1e3;
                eval.coarse.push(pose_error(&coarse.pose, &z));
                eval.combined.push(pose_error(&combined.pose, &z));
                eval.nls.push(pose_error(&nls.pose, &z));
                eval.coarse_ms.push(coarse_ms);
                eval.combined_ms.push(combined_ms);
                eval.nls_ms.push(nls_ms);
            }
        }
    }
    eval
}

/// First window end used by estimator sweeps: late enough for the largest
/// window in the sweep, so every setting is scored at the same stamps.
fn sweep_start(cfg: &ExperimentConfig, dataset: &Dataset, taus: &[f64]) -> f64 {
    let rate = infer_ranging_rate(dataset);
    let longest = taus
        .iter()
        .map(|&tau| {
            let e = EstimatorConfig {
                tau,
                ..cfg.pipeline.estimator.clone()
            };
            e.window_samples(rate) as f64 / rate
        })
        .fold(0.0, f64::max);
    let first = dataset
        .odometry
        .values()
        .filter_map(|t| t.first_time())
        .fold(f64::NEG_INFINITY, f64::max);
    first + longest
}

/// Largest true inter-robot distance in a dataset.
pub fn max_true_distance(dataset: &Dataset) -> f64 {
    let Some(truth) = &dataset.truth else {
        return 0.0;
    };
    let robots = dataset.robots();
    let mut best: f64 = 0.0;
    if let Some(first) = robots.first().and_then(|r| truth.trajectories.get(r)) {
        for &t in first.times() {
            for (i, &a) in robots.iter().enumerate() {
                for &b in &robots[i + 1..] {
                    if let (Some(p), Some(q)) = (truth.pose_at(a, t), truth.pose_at(b, t)) {
                        best = best.max(p.translation_distance(&q));
                    }
                }
            }
        }
    }
    best
}

/// One CSV table: header and rows of already formatted fields.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Option<Table> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<String> = lines.next()?.split(',').map(str::to_string).collect();
        let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
        rows.iter().all(|r| r.len() == header.len()).then_some(Table { header, rows })
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.header.iter().position(|h| h == name)?;
        self.rows.iter().map(|r| r[i].parse().ok()).collect()
    }
}

fn num(v: f64) -> String {
    format!("{v}")
}

const ESTIMATOR_COLUMNS: [&str; 10] = [
    "windows",
    "nls_translation_m",
    "nls_rotation_deg",
    "coarse_translation_m",
    "coarse_rotation_deg",
    "combined_translation_m",
    "combined_rotation_deg",
    "nls_ms",
    "coarse_ms",
    "combined_ms",
];

fn estimator_fields(e: &EstimatorEval) -> Vec<String> {
    vec![
        e.windows().to_string(),
        num(mean(e.nls.iter().map(|x| x.0))),
        num(mean(e.nls.iter().map(|x| x.1))),
        num(mean(e.coarse.iter().map(|x| x.0))),
        num(mean(e.coarse.iter().map(|x| x.1))),
        num(mean(e.combined.iter().map(|x| x.0))),
        num(mean(e.combined.iter().map(|x| x.1))),
        num(mean(e.nls_ms.iter().copied())),
        num(mean(e.coarse_ms.iter().copied())),
        num(mean(e.combined_ms.iter().copied())),
    ]
}

const PIPELINE_COLUMNS: [&str; 12] = [
    "raw_closures",
    "inliers",
    "injected",
    "injected_inliers",
    "raw_translation_m",
    "raw_rotation_deg",
    "pcm_translation_m",
    "pcm_rotation_deg",
    "dpgo_translation_m",
    "dpgo_rotation_deg",
    "trajectory_translation_m",
    "trajectory_rotation_deg",
];

fn pipeline_fields(r: &MetricsReport) -> Vec<String> {
    vec![
        r.raw_closures.to_string(),
        r.inlier_closures.to_string(),
        r.injected_outliers.to_string(),
        r.injected_inliers.to_string(),
        num(r.raw.mean_translation),
        num(r.raw.mean_rotation_deg),
        num(r.pcm.mean_translation),
        num(r.pcm.mean_rotation_deg),
        num(r.dpgo.mean_translation),
        num(r.dpgo.mean_rotation_deg),
        num(r.trajectory.mean_translation),
        num(r.trajectory.mean_rotation_deg),
    ]
}

const COST_COLUMNS: [&str; 9] = [
    "estimation_ms",
    "pcm_ms",
    "dpgo_round_ms",
    "tick_ms",
    "total_bytes",
    "separator_bytes",
    "online_separator_bytes",
    "total_mb",
    "rounds",
];

/// A single sweep cell: the swept values (as columns) and the config to run.
struct Cell {
    params: Vec<String>,
    seed: u64,
    cfg: ExperimentConfig,
}

fn cells(cfg: &ExperimentConfig) -> (Vec<&'static str>, Vec<Cell>) {
    let s = &cfg.sweep;
    let mut grid: Vec<(Vec<String>, ExperimentConfig)> = Vec::new();
    let names: Vec<&'static str> = match s.kind {
        SweepKind::Tab1 => {
            for &tau in &s.tau {
                let mut c = cfg.clone();
                c.pipeline.estimator.tau = tau;
                grid.push((vec![num(tau)], c));
            }
            vec!["tau"]
        }
        SweepKind::Tab2 => {
            for &tau in &s.tau {
                for &eps in &s.epsilon {
                    let mut c = cfg.clone();
                    c.pipeline.estimator.tau = tau;
                    c.pipeline.pcm.epsilon = eps;
                    grid.push((vec![num(tau), num(eps)], c));
                }
            }
            vec!["tau", "epsilon"]
        }
        SweepKind::Fig4 | SweepKind::Fig6 => {
            for &delta in &s.delta {
                let mut c = cfg.clone();
                c.pipeline.estimator.search.delta = delta;
                grid.push((vec![num(delta)], c));
            }
            vec!["delta"]
        }
        SweepKind::Fig7 => {
            for &frac in &s.range_fraction {
                for &sigma in &s.uwb_sigma {
                    let mut c = cfg.clone();
                    c.noise.uwb_sigma = sigma;
                    grid.push((vec![num(frac), num(sigma)], c));
                }
            }
            vec!["range_fraction", "uwb_sigma"]
        }
        SweepKind::Fig8 => {
            for &scale in &s.odom_noise_scale {
                let mut c = cfg.clone();
                c.noise.odom_trans_sigma *= scale;
                c.noise.odom_rot_sigma *= scale;
                grid.push((vec![num(scale)], c));
            }
            vec!["odom_noise_scale"]
        }
        SweepKind::Tab4 => {
            for &rate in &s.dpgo_rate {
                let mut c = cfg.clone();
                c.pipeline.dpgo.update_rate = rate;
                grid.push((vec![num(rate)], c));
            }
            vec!["dpgo_rate"]
        }
    };
    let cells = grid
        .into_iter()
        .flat_map(|(params, c)| {
            s.seeds.iter().map(move |&seed| Cell {
                params: params.clone(),
                seed,
                cfg: c.with_seed(seed),
            })
        })
        .collect();
    (names, cells)
}

fn run_cell(kind: SweepKind, cell: &Cell, all: &ExperimentConfig) -> Result<Vec<String>, ExperimentError> {
    let c = &cell.cfg;
    let fields = match kind {
        SweepKind::Tab1 | SweepKind::Fig6 | SweepKind::Fig8 => {
            let data = load_dataset(c)?;
            let taus = if kind == SweepKind::Tab1 {
                all.sweep.tau.clone()
            } else {
                vec![c.pipeline.estimator.tau]
            };
            let start = sweep_start(c, &data, &taus);
            estimator_fields(&evaluate_estimator(
                &data,
                &c.pipeline.estimator,
                start,
                c.sweep.eval_stride,
                c.sweep.max_span_factor,
            ))
        }
        SweepKind::Fig7 => {
            let frac: f64 = cell.params[0].parse().expect("formatted number");
            // the limit is a share of the largest distance in the unlimited run
            let mut open = c.clone();
            open.noise.max_range = f64::INFINITY;
            let full = load_dataset(&open)?;
            let mut limited = c.clone();
            limited.noise.max_range = frac * max_true_distance(&full);
            let data = load_dataset(&limited)?;
            let start = sweep_start(c, &data, &[c.pipeline.estimator.tau]);
            estimator_fields(&evaluate_estimator(
                &data,
                &c.pipeline.estimator,
                start,
                c.sweep.eval_stride,
                c.sweep.max_span_factor,
            ))
        }
        SweepKind::Tab2 => {
            let data = load_dataset(c)?;
            let out = run_pipeline(&data, &c.pipeline, &c.network)?;
            let truth = data.truth.as_ref().ok_or(MetricsError::NoOverlap)?;
            pipeline_fields(&run_metrics(&out, truth)?)
        }
        SweepKind::Tab4 => {
            let data = load_dataset(c)?;
            let out = run_pipeline(&data, &c.pipeline, &c.network)?;
            let truth = data.truth.as_ref().ok_or(MetricsError::NoOverlap)?;
            let r = run_metrics(&out, truth)?;
            let t = |k: &str| num(r.timings.get(k).copied().unwrap_or(f64::NAN));
            let bytes = out.comm.total_bytes();
            vec![
                t("estimation"),
                t("pcm"),
                t("dpgo_round"),
                t("tick"),
                bytes.to_string(),
                out.comm.get(MessageKind::SeparatorPoses).bytes.to_string(),
                out.online_comm.get(MessageKind::SeparatorPoses).bytes.to_string(),
                num(bytes as f64 / 1e6),
                out.rounds.to_string(),
            ]
        }
        SweepKind::Fig4 => unreachable!("landscape has no seed cells"),
    };
    let mut row = cell.params.clone();
    row.push(cell.seed.to_string());
    row.extend(fields);
    Ok(row)
}

/// Rows of a sweep, one per (setting, seed) cell, in grid order. Cells run
/// in parallel except for the timing table.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<Table, ExperimentError> {
    cfg.validate_sweep().map_err(|e| ExperimentError::Config(e.to_string()))?;
    let kind = cfg.sweep.kind;
    if kind == SweepKind::Fig4 {
        return landscape_table(cfg);
    }
    let (names, cells) = cells(cfg);
    let metrics: &[&str] = match kind {
        SweepKind::Tab2 => &PIPELINE_COLUMNS,
        SweepKind::Tab4 => &COST_COLUMNS,
        _ => &ESTIMATOR_COLUMNS,
    };
    let header = names
        .iter()
        .chain(["seed"].iter())
        .chain(metrics.iter())
        .map(|s| s.to_string())
        .collect();
    let rows: Result<Vec<_>, _> = if kind == SweepKind::Tab4 {
        cells.iter().map(|c| run_cell(kind, c, cfg)).collect()
    } else {
        cells.par_iter().map(|c| run_cell(kind, c, cfg)).collect()
    };
    Ok(Table { header, rows: rows? })
}

/// Two robots driving nearly straight, nearly parallel paths: the ranging
/// barely constrains the side β is on, so the residual has mirrored minima.
pub fn collinear_window(samples: usize, rate: f64, uwb_sigma: f64, seed: u64) -> RangingWindow {
    let dt = 1.0 / rate;
    let start_beta = Pose2::new(3.0, 2.0, 0.4);
    let speed = 0.2;
    let path = |k: usize, curvature: f64| {
        let s = speed * dt * k as f64;
        if curvature == 0.0 {
            Pose2::new(s, 0.0, 0.0)
        } else {
            let th = s * curvature;
            Pose2::new(th.sin() / curvature, (1.0 - th.cos()) / curvature, th)
        }
    };
    let alpha: Vec<Pose2> = (0..samples).map(|k| path(k, 0.004)).collect();
    let beta: Vec<Pose2> = (0..samples).map(|k| start_beta.compose(&path(k, -0.002))).collect();
    let beta_local: Vec<Pose2> = (0..samples).map(|k| path(k, -0.002)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, uwb_sigma.max(0.0)).expect("finite sigma");
    let last = samples - 1;
    let entries = (0..samples)
        .map(|k| {
            let d = alpha[k].translation_distance(&beta[k]);
            WindowEntry {
                t: k as f64 * dt,
                rel_alpha: alpha[last].between(&alpha[k]),
                rel_beta: beta_local[last].between(&beta_local[k]),
                range: (d + noise.sample(&mut rng)).max(0.0),
            }
        })
        .collect();
    RangingWindow::new(RobotId(0), RobotId(1), entries).expect("ordered window")
}

/// Residual grids of the collinear window for every δ in the sweep, with a
/// flag on grid-local minima.
pub fn landscape_table(cfg: &ExperimentConfig) -> Result<Table, ExperimentError> {
    let est = &cfg.pipeline.estimator;
    let samples = est.window_samples(cfg.noise.uwb_rate);
    let window = collinear_window(samples, cfg.noise.uwb_rate, cfg.noise.uwb_sigma, cfg.sweep.seeds[0]);
    let mut rows = Vec::new();
    for &delta in &cfg.sweep.delta {
        let search = SearchConfig {
            delta,
            ..est.search
        };
        let grid = residual_grid(&window, &search).map_err(|e| ExperimentError::Config(e.to_string()))?;
        let minima: Vec<(i64, i64)> = local_minima(&grid).iter().map(|c| (c.i_phi, c.i_theta)).collect();
        for c in &grid.cells {
            rows.push(vec![
                num(delta),
                c.i_phi.to_string(),
                c.i_theta.to_string(),
                format!("{:.6}", c.phi),
                format!("{:.6}", c.theta),
                format!("{:.9e}", c.mean_residual),
                u8::from(minima.contains(&(c.i_phi, c.i_theta))).to_string(),
            ]);
        }
    }
    let header = ["delta", "i_phi", "i_theta", "phi", "theta", "mean_residual", "local_min"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    Ok(Table { header, rows })
}

pub fn sweep_file(kind: SweepKind) -> String {
    format!("sweep_{}.csv", kind.name())
}

pub fn plot_file(kind: SweepKind) -> String {
    format!("plot_{}.csv", kind.name())
}

/// Run a sweep and write its CSV into `run.output_dir`.
pub fn run_sweep_to_dir(cfg: &ExperimentConfig) -> Result<(Table, PathBuf), ExperimentError> {
    let table = run_sweep(cfg)?;
    create_dir(&cfg.run.output_dir)?;
    let path = cfg.run.output_dir.join(sweep_file(cfg.sweep.kind));
    write_file(&path, &table.to_csv())?;
    Ok((table, path))
}

/// Group rows by the columns left of `seed` and summarize each metric by
/// mean and population standard deviation over seeds. Tables without a
/// `seed` column pass through unchanged.
pub fn aggregate(table: &Table) -> Table {
    let Some(split) = table.header.iter().position(|h| h == "seed") else {
        return table.clone();
    };
    let mut groups: BTreeMap<usize, (Vec<String>, Vec<Vec<f64>>)> = BTreeMap::new();
    let mut order: Vec<Vec<String>> = Vec::new();
    for r in &table.rows {
        let key = r[..split].to_vec();
        let idx = order.iter().position(|k| *k == key).unwrap_or_else(|| {
            order.push(key.clone());
            order.len() - 1
        });
        let values = r[split + 1..].iter().map(|v| v.parse().unwrap_or(f64::NAN)).collect();
        groups.entry(idx).or_insert_with(|| (key, Vec::new())).1.push(values);
    }
    let mut header: Vec<String> = table.header[..split].to_vec();
    header.push("seeds".into());
    for m in &table.header[split + 1..] {
        header.push(format!("{m}_mean"));
        header.push(format!("{m}_std"));
    }
    let rows = groups
        .into_values()
        .map(|(key, values)| {
            let mut row = key;
            row.push(values.len().to_string());
            for j in 0..table.header.len() - split - 1 {
                let col: Vec<f64> = values.iter().map(|v| v[j]).filter(|x| x.is_finite()).collect();
                let m = mean(col.iter().copied());
                let sd = mean(col.iter().map(|x| (x - m).powi(2))).sqrt();
                row.push(num(m));
                row.push(num(sd));
            }
            row
        })
        .collect();
    Table { header, rows }
}

/// Write `plot_<kind>.csv` for every requested kind from the matching
/// `sweep_<kind>.csv` in `dir`. With no kinds given, every sweep file present
/// is used. Missing inputs are reported together before anything is written.
pub fn emit_plot_data(dir: &Path, kinds: &[SweepKind]) -> Result<Vec<PathBuf>, ExperimentError> {
    let kinds: Vec<SweepKind> = if kinds.is_empty() {
        let present: Vec<SweepKind> = SweepKind::ALL
            .into_iter()
            .filter(|k| dir.join(sweep_file(*k)).is_file())
            .collect();
        if present.is_empty() {
            return Err(ExperimentError::MissingInputs(
                SweepKind::ALL.iter().map(|k| dir.join(sweep_file(*k))).collect(),
            ));
        }
        present
    } else {
        kinds.to_vec()
    };
    let inputs: Vec<PathBuf> = kinds.iter().map(|k| dir.join(sweep_file(*k))).collect();
    require(&inputs)?;
    let mut written = Vec::new();
    for (kind, input) in kinds.iter().zip(&inputs) {
        let table = Table::parse(&read_file(input)?).ok_or_else(|| ExperimentError::Csv {
            path: input.clone(),
            message: "ragged or empty table".into(),
        })?;
        let out = dir.join(plot_file(*kind));
        write_file(&out, &aggregate(&table).to_csv())?;
        written.push(out);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::resolve;

    fn quick(kind: &str, extra: &[&str]) -> ExperimentConfig {
        let mut o: Vec<String> = vec![
            format!("sweep.kind={kind}"),
            "scenario.duration=60".into(),
            "sweep.seeds=[0, 1]".into(),
            "sweep.eval_stride=10".into(),
        ];
        o.extend(extra.iter().map(|s| s.to_string()));
        resolve(None, &o).unwrap()
    }

    #[test]
    fn sweep_rows_are_settings_times_seeds() {
        let cfg = quick("tab1", &["sweep.tau=[5, 10, 20]"]);
        let t = run_sweep(&cfg).unwrap();
        assert_eq!(t.rows.len(), 3 * 2);
        assert_eq!(t.header[..2], ["tau".to_string(), "seed".to_string()]);
        assert!(t.rows.iter().all(|r| r.len() == t.header.len()));
        let cfg = quick("fig7", &["sweep.range_fraction=[0.5, 1.0]", "sweep.uwb_sigma=[0.0, 0.1]", "pipeline.estimator.tau=10"]);
        assert_eq!(run_sweep(&cfg).unwrap().rows.len(), 2 * 2 * 2);
    }

    #[test]
    fn heatmap_has_full_grid_rows() {
        let cfg = quick("fig4", &["sweep.delta=[0.3, 0.5]", "pipeline.estimator.tau=20"]);
        let t = run_sweep(&cfg).unwrap();
        let side = |d: f64| 2 * SearchConfig::with_delta(d).steps() as usize + 1;
        assert_eq!(t.rows.len(), side(0.3).pow(2) + side(0.5).pow(2));
    }

    #[test]
    fn plot_data_lists_missing_files_and_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        match emit_plot_data(dir.path(), &[SweepKind::Tab1, SweepKind::Fig6]) {
            Err(ExperimentError::MissingInputs(m)) => assert_eq!(m.len(), 2),
            other => panic!("{other:?}"),
        }
        let table = Table {
            header: vec!["tau".into(), "seed".into(), "err".into()],
            rows: vec![
                vec!["10".into(), "0".into(), "1".into()],
                vec!["10".into(), "1".into(), "3".into()],
                vec!["20".into(), "0".into(), "nan".into()],
            ],
        };
        write_file(&dir.path().join(sweep_file(SweepKind::Tab1)), &table.to_csv()).unwrap();
        let first = emit_plot_data(dir.path(), &[]).unwrap();
        let a = fs::read(&first[0]).unwrap();
        emit_plot_data(dir.path(), &[]).unwrap();
        assert_eq!(a, fs::read(&first[0]).unwrap());
        let agg = Table::parse(std::str::from_utf8(&a).unwrap()).unwrap();
        assert_eq!(agg.header, ["tau", "seeds", "err_mean", "err_std"]);
        assert_eq!(agg.rows[0], ["10", "2", "2", "1"]);
    }

    #[test]
    fn run_writes_outputs_and_metrics_recompute() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = resolve(
            None,
            &[
                "scenario.duration=60".into(),
                format!("run.output_dir={:?}", dir.path().display().to_string()),
            ],
        )
        .unwrap();
        let art = run_experiment(&cfg).unwrap();
        for f in [TRAJECTORIES_FILE, CLOSURES_FILE, COST_FILE, COMM_FILE, METRICS_CSV, DATASET_FILE, CONFIG_FILE] {
            assert!(dir.path().join(f).is_file(), "{f}");
        }
        let again = metrics_from_outputs(dir.path(), None).unwrap();
        let report = art.report.unwrap();
        assert_eq!(again.raw_closures, report.raw_closures);
        assert!((again.trajectory.mean_translation - report.trajectory.mean_translation).abs() < 1e-9);
    }
}
