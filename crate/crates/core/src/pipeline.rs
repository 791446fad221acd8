//! End-to-end runs: simulate, synchronize, image, combine and score.
//!
//! Trials are independent jobs on a rayon pool. Each one derives its own seed
//! from the config seed and its index, and results are collected in job order,
//! so reports do not depend on the worker count.

use rayon::prelude::*;
use serde::Serialize;

use crate::analysis::{hausdorff, nn_rmse, range_resolution};
use crate::channel::{resolve_paths, simulate_sfcw, simulate_signature, PathObservation, PathSpec};
use crate::combining::{combine, group_by_clock, SearchOptions, VirtualDetection};
use crate::config::{trial_seed, ScenarioConfig};
use crate::geometry::{Point3, Propagation, ReflectionSurface};
use crate::imaging::{image_path, PowerSpectrum};
use crate::sync::{canonical_offset, synchronize, PathSync};
use crate::waveform::Severity;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Los,
    Nlos,
    Sweep,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Worker threads; 0 lets rayon decide.
    pub workers: usize,
    /// Keep trial 0's power spectra.
    pub keep_spectra: bool,
    /// Keep trial 0's observations.
    pub keep_observations: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PathMetrics {
    pub path_id: u32,
    pub sigma_hat_s: f64,
    pub sigma_discrepancy_s: f64,
    /// Distance of the located anchor `a` from its true (virtual) position.
    pub anchor_err_m: f64,
    pub used_fallback: bool,
    pub num_points: usize,
    /// Mapped cloud against the true TV; `None` when imaging failed.
    pub hausdorff_m: Option<f64>,
    pub imaging_error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SurfaceMetrics {
    pub path_id: u32,
    pub theta_rad: f64,
    /// Absolute slope error, when both estimate and truth are sloped lines.
    pub slope_err: Option<f64>,
    pub intercept_err_m: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrialMetrics {
    pub distance_m: f64,
    pub num_surfaces: usize,
    pub num_rx: usize,
    pub trial: usize,
    pub seed: u64,
    pub ok: bool,
    pub error: Option<String>,
    pub hausdorff_m: Option<f64>,
    pub sigma_err_s: Option<f64>,
    pub anchor_err_m: Option<f64>,
    /// Mean nearest-neighbour error; diagnostic, not a headline metric.
    pub nn_rmse_m: Option<f64>,
    pub num_points: usize,
    pub theta1_rad: Option<f64>,
    pub feasible: Option<bool>,
    pub num_clusters: Option<usize>,
    pub surfaces: Vec<SurfaceMetrics>,
    pub paths: Vec<PathMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PointSummary {
    pub distance_m: f64,
    pub num_surfaces: usize,
    pub num_rx: usize,
    pub trials: usize,
    pub failures: usize,
    pub hausdorff_med_m: Option<f64>,
    pub hausdorff_iqr_m: Option<f64>,
    pub fail_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub version: String,
    pub config_sha256: String,
    pub seed: u64,
    pub mode: Mode,
    pub trials: Vec<TrialMetrics>,
    pub summary: Vec<PointSummary>,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub report: RunReport,
    pub spectra: Vec<(u32, PowerSpectrum)>,
    pub observations: Vec<PathObservation>,
}

#[derive(Default)]
struct Artifacts {
    spectra: Vec<(u32, PowerSpectrum)>,
    observations: Vec<PathObservation>,
}

/// Percentile with linear interpolation on sorted data.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Median and interquartile range; `None` for an empty sample.
pub fn median_iqr(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some((percentile(&v, 0.5), percentile(&v, 0.75) - percentile(&v, 0.25)))
}

fn summarize(cfg: &ScenarioConfig, trials: &[TrialMetrics]) -> PointSummary {
    let h: Vec<f64> = trials.iter().filter_map(|t| t.hausdorff_m).collect();
    let failures = trials.iter().filter(|t| !t.ok).count();
    let stats = median_iqr(&h);
    PointSummary {
        distance_m: cfg.tv.distance,
        num_surfaces: cfg.surfaces.len(),
        num_rx: cfg.sv.num_antennas,
        trials: trials.len(),
        failures,
        hausdorff_med_m: stats.map(|s| s.0),
        hausdorff_iqr_m: stats.map(|s| s.1),
        fail_rate: failures as f64 / trials.len().max(1) as f64,
    }
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))
}

/// Structural and scene-rule checks; scene-rule errors become `InvalidConfig`.
pub fn validate_config(cfg: &ScenarioConfig) -> Result<()> {
    let report = cfg.validate()?;
    let errors: Vec<String> = report
        .violations
        .iter()
        .filter(|v| v.severity == Severity::Error)
        .map(|v| v.message.clone())
        .collect();
    if errors.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(errors.join("; ")))
    }
}

struct Synced {
    spec: PathSpec,
    sync: PathSync,
}

/// Run one trial of `cfg`; LoS mode images the direct path only.
fn run_trial(cfg: &ScenarioConfig, trial: usize, los_only: bool, keep: bool) -> Result<(TrialMetrics, Artifacts)> {
    let seed = trial_seed(cfg.noise.seed, trial as u64);
    let scene = cfg.scene(seed).map_err(Error::at("scene"))?;
    let grid = cfg.grid()?;
    let sig = cfg.waveform.signature()?;
    let mut noise = cfg.noise;
    noise.seed = seed;
    let mut specs = PathSpec::for_scene(&scene, &cfg.gammas());
    if los_only {
        specs.retain(|s| s.propagation == Propagation::Direct);
    }
    let sv = &scene.sv_antennas;

    let mut obs = simulate_signature(&scene, &specs, &sig, &noise);
    let synced = specs
        .iter()
        .zip(&obs)
        .map(|(spec, o)| {
            let sync = synchronize(o, sv, sig.delta, &cfg.pipeline.search_region, noise.phase_sigma)
                .map_err(Error::at("sync"))?;
            Ok(Synced { spec: *spec, sync })
        })
        .collect::<Result<Vec<_>>>()?;
    let sigmas: Vec<f64> = synced.iter().map(|s| s.sync.sigma_hat).collect();
    simulate_sfcw(&scene, &specs, &grid, &noise, &sigmas, &mut obs).map_err(Error::at("channel"))?;
    let mut artifacts = Artifacts::default();
    if keep {
        artifacts.observations = obs.clone();
    }
    let groups = resolve_paths(obs).map_err(Error::at("channel"))?;

    let truth = &scene.tv_antennas;
    let true_a = scene.anchor_a();
    let mut metrics = TrialMetrics {
        distance_m: cfg.tv.distance,
        num_surfaces: cfg.surfaces.len(),
        num_rx: cfg.sv.num_antennas,
        trial,
        seed,
        ok: true,
        ..Default::default()
    };
    let mut detections = Vec::new();
    for o in groups.into_iter().flatten() {
        let s = synced.iter().find(|s| s.spec.path_id == o.path_id).ok_or(Error::DuplicateLabel(o.path_id))?;
        let (xa, xb) = (s.sync.anchor_a.x_anchor, s.sync.anchor_b.x_anchor);
        let center = 0.5 * (xa + xb);
        let started = std::time::Instant::now();
        let imaged = image_path(&o, sv, &grid, &center, &cfg.pipeline.imaging);
        log::debug!("trial {trial} path {}: imaging took {:?}", o.path_id, started.elapsed());
        let true_virtual = match s.spec.propagation {
            Propagation::Direct => true_a,
            Propagation::Reflected(surface) => surface.mirror(&true_a),
        };
        let (cloud, imaging_error) = match imaged {
            Ok((spectrum, cloud)) => {
                if keep {
                    artifacts.spectra.push((o.path_id, spectrum));
                }
                (cloud, None)
            }
            Err(e) if los_only => return Err(Error::at("imaging")(e)),
            Err(e) => (Vec::new(), Some(format!("imaging: {e}"))),
        };
        metrics.paths.push(PathMetrics {
            path_id: o.path_id,
            sigma_hat_s: s.sync.sigma_hat,
            sigma_discrepancy_s: s.sync.sigma_discrepancy,
            anchor_err_m: (xa - true_virtual).norm(),
            used_fallback: s.sync.used_fallback,
            num_points: cloud.len(),
            hausdorff_m: None,
            imaging_error,
        });
        detections.push(VirtualDetection::new(o.path_id, xa, xb, cloud, s.sync.sigma_hat).map_err(Error::at("combining"))?);
    }

    let clock_err = |sigma_hat: f64| canonical_offset(sigma_hat - scene.clock_offset, sig.delta).abs();
    if los_only {
        let d = detections.first().ok_or(Error::TooFewPaths(0))?;
        let h = hausdorff(&d.cloud, truth).map_err(Error::at("analysis"))?;
        metrics.paths[0].hausdorff_m = Some(h);
        metrics.hausdorff_m = Some(h);
        metrics.nn_rmse_m = Some(nn_rmse(&d.cloud, truth)?);
        metrics.sigma_err_s = Some(clock_err(d.sigma_hat));
        metrics.anchor_err_m = Some((d.x_a_virtual - true_a).norm());
        metrics.num_points = d.cloud.len();
        return Ok((metrics, artifacts));
    }

    let tolerance = cfg.pipeline.clock_tolerance.unwrap_or_else(|| {
        let n = sv.len() as f64;
        (5.0 * noise.phase_sigma / (2.0 * std::f64::consts::PI * sig.delta * n.sqrt())).max(1e-12)
    });
    let sigma_hats: Vec<f64> = detections.iter().map(|d| d.sigma_hat).collect();
    let clusters = group_by_clock(&sigma_hats, tolerance, 1.0 / sig.delta);
    metrics.num_clusters = Some(clusters.len());
    let cluster = clusters.iter().fold(&clusters[0], |best, c| if c.len() > best.len() { c } else { best });
    let members: Vec<&VirtualDetection> = cluster.iter().map(|&i| &detections[i]).collect();
    let los = members.iter().find(|d| d.path_id == 0).copied();
    let reflected: Vec<VirtualDetection> = members.iter().filter(|d| d.path_id != 0).map(|d| (*d).clone()).collect();
    let opts = SearchOptions {
        step: cfg.pipeline.theta_step,
        ..SearchOptions::default()
    };
    let merge_radius = 0.5 * range_resolution(&grid);
    let combined = combine(&reflected, los, &opts, merge_radius).map_err(Error::at("combining"))?;

    for (path_id, cloud) in &combined.mapped_clouds {
        if let Some(p) = metrics.paths.iter_mut().find(|p| p.path_id == *path_id) {
            p.hausdorff_m = Some(hausdorff(cloud, truth)?);
        }
    }
    for ps in &combined.surfaces {
        let planted = (ps.path_id as usize).checked_sub(1).and_then(|i| scene.surfaces.get(i));
        let (slope_err, intercept_err_m) = match (ps.surface, planted) {
            (
                Some(ReflectionSurface::Line { slope, intercept }),
                Some(ReflectionSurface::Line { slope: s0, intercept: c0 }),
            ) => (Some((slope - s0).abs()), Some((intercept - c0).abs())),
            _ => (None, None),
        };
        metrics.surfaces.push(SurfaceMetrics {
            path_id: ps.path_id,
            theta_rad: ps.theta,
            slope_err,
            intercept_err_m,
        });
    }
    let h = hausdorff(&combined.actual_cloud, truth).map_err(Error::at("analysis"))?;
    metrics.hausdorff_m = Some(h);
    metrics.nn_rmse_m = Some(nn_rmse(&combined.actual_cloud, truth)?);
    metrics.sigma_err_s = Some(clock_err(members[0].sigma_hat));
    metrics.anchor_err_m = Some((combined.x_a_star - true_a).norm());
    metrics.num_points = combined.actual_cloud.len();
    metrics.theta1_rad = Some(combined.theta1_star);
    metrics.feasible = Some(combined.feasible);
    Ok((metrics, artifacts))
}

fn failed(cfg: &ScenarioConfig, trial: usize, err: &Error) -> TrialMetrics {
    TrialMetrics {
        distance_m: cfg.tv.distance,
        num_surfaces: cfg.surfaces.len(),
        num_rx: cfg.sv.num_antennas,
        trial,
        seed: trial_seed(cfg.noise.seed, trial as u64),
        ok: false,
        error: Some(err.to_string()),
        ..Default::default()
    }
}

fn run_single(cfg: &ScenarioConfig, opts: &RunOptions, mode: Mode) -> Result<RunOutput> {
    validate_config(cfg)?;
    let los_only = mode == Mode::Los;
    let keep = opts.keep_spectra || opts.keep_observations;
    let results: Vec<Result<(TrialMetrics, Artifacts)>> = pool(opts.workers)?.install(|| {
        (0..cfg.pipeline.trials)
            .into_par_iter()
            .map(|t| run_trial(cfg, t, los_only, keep && t == 0))
            .collect()
    });
    let mut trials = Vec::with_capacity(results.len());
    let mut artifacts = Artifacts::default();
    for (t, r) in results.into_iter().enumerate() {
        let (m, a) = r?;
        if t == 0 {
            artifacts = a;
        }
        trials.push(m);
    }
    let summary = vec![summarize(cfg, &trials)];
    Ok(RunOutput {
        report: RunReport {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_sha256: cfg.sha256()?,
            seed: cfg.noise.seed,
            mode,
            trials,
            summary,
        },
        spectra: if opts.keep_spectra { artifacts.spectra } else { Vec::new() },
        observations: if opts.keep_observations { artifacts.observations } else { Vec::new() },
    })
}

/// Direct-path pipeline: simulate, sync, image, detect peaks, score.
pub fn run_los(cfg: &ScenarioConfig, opts: &RunOptions) -> Result<RunOutput> {
    if !cfg.has_los {
        return Err(Error::InvalidConfig("run-los needs has_los = true".into()));
    }
    run_single(cfg, opts, Mode::Los)
}

/// Reflected (and optional direct) paths recombined into one TV estimate.
pub fn run_nlos(cfg: &ScenarioConfig, opts: &RunOptions) -> Result<RunOutput> {
    if !cfg.has_los && cfg.surfaces.len() < 3 {
        return Err(Error::TooFewPaths(cfg.surfaces.len()));
    }
    run_single(cfg, opts, Mode::Nlos)
}

/// Config for one sweep point.
pub fn sweep_point(cfg: &ScenarioConfig, distance: f64, num_surfaces: usize, num_rx: usize) -> ScenarioConfig {
    let mut c = cfg.clone();
    c.tv.distance = distance;
    c.surfaces.truncate(num_surfaces);
    c.reflectivity.truncate(num_surfaces);
    c.sv.num_antennas = num_rx;
    c.sweep.distances = vec![distance];
    c.sweep.num_surfaces = vec![num_surfaces];
    c.sweep.num_rx = vec![num_rx];
    c
}

/// Every sweep point times `sweep.trials`. Trial `t` uses the same seed at every
/// point, and failures are recorded rather than raised.
pub fn run_sweep(cfg: &ScenarioConfig, opts: &RunOptions) -> Result<RunReport> {
    cfg.check()?;
    let mut points = Vec::new();
    for &d in &cfg.sweep.distances {
        for &l in &cfg.sweep.num_surfaces {
            for &n in &cfg.sweep.num_rx {
                let p = sweep_point(cfg, d, l, n);
                validate_config(&p).map_err(Error::at("sweep point"))?;
                points.push(p);
            }
        }
    }
    let trials = cfg.sweep.trials;
    let jobs: Vec<(usize, usize)> = (0..points.len()).flat_map(|p| (0..trials).map(move |t| (p, t))).collect();
    let results: Vec<TrialMetrics> = pool(opts.workers)?.install(|| {
        jobs.par_iter()
            .map(|&(p, t)| match run_trial(&points[p], t, false, false) {
                Ok((m, _)) => m,
                Err(e) => failed(&points[p], t, &e),
            })
            .collect()
    });
    let summary = results.chunks(trials).zip(&points).map(|(chunk, p)| summarize(p, chunk)).collect();
    Ok(RunReport {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_sha256: cfg.sha256()?,
        seed: cfg.noise.seed,
        mode: Mode::Sweep,
        trials: results,
        summary,
    })
}

/// One row per sweep point.
pub fn write_sweep_csv<W: std::io::Write>(report: &RunReport, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["distance_m", "num_surfaces", "num_rx", "hausdorff_med_m", "hausdorff_iqr_m", "fail_rate"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for p in &report.summary {
        w.write_record([
            p.distance_m.to_string(),
            p.num_surfaces.to_string(),
            p.num_rx.to_string(),
            opt(p.hausdorff_med_m),
            opt(p.hausdorff_iqr_m),
            p.fail_rate.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Smallest voxel diagonal a plan would use for `cfg`'s direct path.
pub fn voxel_diagonal(cfg: &ScenarioConfig) -> Result<f64> {
    let grid = cfg.grid()?;
    let scene = cfg.scene(trial_seed(cfg.noise.seed, 0))?;
    let plan = crate::imaging::ReconstructionPlan::new(&scene.sv_antennas, &grid, &cfg.tv_center(), &cfg.pipeline.imaging)?;
    Ok(Point3::from(plan.voxel_box.spacing).norm())
}
