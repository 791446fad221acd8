//! Acceptance suite. One test per criterion; each prints a single PASS/FAIL line
//! to stderr (uncaptured) and then asserts. Tests take a global lock so the
//! runtime budgets are measured without competing for the CPU.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};
use std::io::Write;
use std::sync::{Mutex, MutexGuard};
use std::time::{Duration, Instant};

use compop::analysis::{azimuth_resolution, hausdorff, range_resolution, rcs};
use compop::channel::{simulate_signature, NoiseModel, PathObservation, PathSpec, PhaseNoiseModel};
use compop::combining::{combine, intersect_rays, SearchOptions, VirtualDetection};
use compop::config::{reference_surfaces, ScenarioConfig, SweepConfig};
use compop::geometry::{Propagation, Scene};
use compop::imaging::{
    forward_2d_spectrum, image_path, ApertureSamples, Frame, ImagingParams,
};
use compop::pipeline::{run_nlos, run_sweep, RunOptions, RunReport};
use compop::sync::{
    canonical_offset, fibonacci_sphere, initial_guess, locate_anchor, measure_pdoa, synchronize, Anchor,
    SearchRegion,
};
use compop::waveform::{max_unambiguous_range, nyquist_spacing, FrequencyGrid, SignatureConfig};
use compop::{Complex64, Point3, ReflectionSurface, SPEED_OF_LIGHT};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(id: u32, name: &str, pass: bool, detail: &str, elapsed: Duration) {
    let line = format!(
        "criterion {id} {}: {name}: {detail} [{:.2} s]",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    let _ = writeln!(std::io::stderr(), "{line}");
    assert!(pass, "{line}");
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

// 1. geometry oracles

#[test]
fn c1_geometry_oracles() {
    let _g = serial();
    let start = Instant::now();
    let x = intersect_rays(&Point3::new(1.0, 0.0, 0.0), FRAC_PI_2, &Point3::new(-4.0, 0.0, 11.0), -FRAC_PI_4).unwrap();
    let worked = (x - Point3::new(1.0, 0.0, 6.0)).norm();

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut involution: f64 = 0.0;
    let mut midpoint: f64 = 0.0;
    for i in 0..2000 {
        let s = if i % 10 == 0 {
            ReflectionSurface::vertical(rng.random_range(-10.0..10.0))
        } else {
            ReflectionSurface::line(rng.random_range(-5.0..5.0), rng.random_range(-10.0..10.0))
        };
        let p = Point3::new(
            rng.random_range(-20.0..20.0),
            rng.random_range(-3.0..3.0),
            rng.random_range(-20.0..20.0),
        );
        let m = s.mirror(&p);
        involution = involution.max((s.mirror(&m) - p).norm());
        let mid = 0.5 * (p + m);
        let off = match s {
            ReflectionSurface::Line { slope, intercept } => mid.z - (slope * mid.x + intercept),
            ReflectionSurface::Vertical { x } => mid.x - x,
        };
        midpoint = midpoint.max(off.abs());
    }
    let elapsed = start.elapsed();
    let pass = worked < 1e-9 && involution < 1e-9 && midpoint < 1e-9 && elapsed < Duration::from_secs(1);
    verdict(
        1,
        "geometry oracles",
        pass,
        &format!("worked example {worked:.1e} m, involution {involution:.1e} m, midpoint {midpoint:.1e} m"),
        elapsed,
    );
}

// 2. sync correctness

fn nlos_reference(noise: NoiseModel) -> ScenarioConfig {
    ScenarioConfig {
        noise,
        ..ScenarioConfig::default()
    }
}

/// Sum of squared range-difference residuals, written out independently of the library.
fn brute_objective(f_tilde: &[f64], antennas: &[Point3], x: &Point3) -> f64 {
    let d1 = (x - antennas[0]).norm();
    f_tilde
        .iter()
        .zip(&antennas[1..])
        .map(|(f, p)| {
            let r = f - ((x - p).norm() - d1);
            r * r
        })
        .sum()
}

#[test]
fn c2_sync_correctness() {
    let _g = serial();
    let start = Instant::now();

    // Noiseless: the direct path of the LoS placement and the reflected paths of the NLoS one.
    let mut los = nlos_reference(NoiseModel::noiseless());
    los.has_los = true;
    los.surfaces.clear();
    let region = SearchRegion::default();
    let mut anchor_err: f64 = 0.0;
    let mut clock_err: f64 = 0.0;
    let mut checked = 0;
    for cfg in [los, nlos_reference(NoiseModel::noiseless())] {
        let scene = cfg.scene(7).unwrap();
        let sig = cfg.waveform.signature().unwrap();
        let specs = PathSpec::for_scene(&scene, &cfg.gammas());
        let obs = simulate_signature(&scene, &specs, &sig, &cfg.noise);
        for (spec, o) in specs.iter().zip(&obs) {
            let s = synchronize(o, &scene.sv_antennas, sig.delta, &region, 0.0).unwrap();
            let (a, b) = match spec.propagation {
                Propagation::Direct => (scene.anchor_a(), scene.anchor_b()),
                Propagation::Reflected(r) => (r.mirror(&scene.anchor_a()), r.mirror(&scene.anchor_b())),
            };
            anchor_err = anchor_err.max((s.anchor_a.x_anchor - a).norm()).max((s.anchor_b.x_anchor - b).norm());
            clock_err = clock_err.max(canonical_offset(s.sigma_hat - scene.clock_offset, sig.delta).abs());
            checked += 1;
        }
    }

    // Noisy: Gauss-Newton against a 1 cm exhaustive grid around the truth.
    let grid = FrequencyGrid::default();
    let sig = SignatureConfig::below(&grid);
    let center = Point3::new(0.3, -0.2, 8.0);
    let sv = fibonacci_sphere(16, center, 4.0);
    let region = SearchRegion {
        min: [center.x - 3.0, center.y - 3.0, center.z - 3.0],
        max: [center.x + 3.0, center.y + 3.0, center.z + 3.0],
        step: 0.25,
    };
    let cell = 0.01;
    let half = 40;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_gap: f64 = 0.0;
    let mut on_edge = 0;
    for i in 0..50 {
        let truth = center + Point3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
        let tv = vec![truth, truth + Point3::new(0.4, 0.0, 0.0)];
        let scene = Scene::new(tv, (0, 1), sv.clone(), vec![], 3e-9, true).unwrap();
        let noise = NoiseModel {
            phase_sigma: 0.02,
            seed: 1000 + i,
            ..NoiseModel::noiseless()
        };
        let spec = PathSpec::for_scene(&scene, &[]);
        let o = &simulate_signature(&scene, &spec, &sig, &noise)[0];
        let meas = measure_pdoa(o, &sv, Anchor::A, sig.delta).unwrap();
        let guess = initial_guess(&meas, &sv, &region);
        let gn = locate_anchor(&meas, &sv, guess.point, noise.phase_sigma).unwrap().x_anchor;

        let mut best = (f64::INFINITY, [0i32; 3]);
        for ix in -half..=half {
            for iy in -half..=half {
                for iz in -half..=half {
                    let x = truth + cell * Point3::new(ix as f64, iy as f64, iz as f64);
                    let c = brute_objective(&meas.f_tilde, &sv, &x);
                    if c < best.0 {
                        best = (c, [ix, iy, iz]);
                    }
                }
            }
        }
        if best.1.iter().any(|v| v.abs() == half) {
            on_edge += 1;
        }
        let [ix, iy, iz] = best.1;
        let cell_point = truth + cell * Point3::new(ix as f64, iy as f64, iz as f64);
        worst_gap = worst_gap.max((gn - cell_point).amax());
    }
    let elapsed = start.elapsed();
    let pass = anchor_err < 1e-6
        && clock_err < 1e-12
        && worst_gap <= cell
        && on_edge == 0
        && elapsed < Duration::from_secs(30);
    verdict(
        2,
        "sync correctness",
        pass,
        &format!(
            "noiseless anchor {anchor_err:.1e} m over {checked} paths, clock {clock_err:.1e} s; GN vs 1 cm grid worst {worst_gap:.4} m over 50 ({on_edge} grid minima on the edge)"
        ),
        elapsed,
    );
}

// 3. position variance against array size

#[test]
fn c3_variance_scaling() {
    let _g = serial();
    let start = Instant::now();
    let grid = FrequencyGrid::default();
    let sig = SignatureConfig::below(&grid);
    let source = Point3::new(0.3, -0.2, 8.0);
    let region = SearchRegion {
        min: [source.x - 3.0, source.y - 3.0, source.z - 3.0],
        max: [source.x + 3.0, source.y + 3.0, source.z + 3.0],
        step: 0.5,
    };
    let sizes = [8usize, 16, 32, 64];
    let mut variances = Vec::new();
    for &n in &sizes {
        let sv = fibonacci_sphere(n, source + Point3::new(0.2, 0.1, -0.3), 4.0);
        let tv = vec![source, source + Point3::new(0.4, 0.0, 0.0)];
        let scene = Scene::new(tv, (0, 1), sv.clone(), vec![], 3e-9, true).unwrap();
        let spec = PathSpec::for_scene(&scene, &[]);
        let errors: Vec<Point3> = (0..500u64)
            .map(|t| {
                let noise = NoiseModel {
                    phase_sigma: 0.224,
                    seed: (n as u64) << 20 | t,
                    phase_model: PhaseNoiseModel::PerDifference,
                    ..NoiseModel::noiseless()
                };
                let o = &simulate_signature(&scene, &spec, &sig, &noise)[0];
                let meas = measure_pdoa(o, &sv, Anchor::A, sig.delta).unwrap();
                let guess = initial_guess(&meas, &sv, &region);
                locate_anchor(&meas, &sv, guess.point, noise.phase_sigma).unwrap().x_anchor - source
            })
            .collect();
        let mean = errors.iter().fold(Point3::zeros(), |a, e| a + e) / errors.len() as f64;
        let var = errors.iter().map(|e| (e - mean).norm_squared()).sum::<f64>() / (errors.len() - 1) as f64;
        variances.push(var);
    }
    let xs: Vec<f64> = sizes.iter().map(|&n| ((n - 1) as f64).ln()).collect();
    let ys: Vec<f64> = variances.iter().map(|v| v.ln()).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / 4.0, ys.iter().sum::<f64>() / 4.0);
    let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    let elapsed = start.elapsed();
    let pass = (slope + 1.0).abs() <= 0.2 && elapsed < Duration::from_secs(300);
    verdict(
        3,
        "variance scaling",
        pass,
        &format!("slope {slope:.3}, variances {variances:.4?} m^2 at N_r {sizes:?}"),
        elapsed,
    );
}

// 4. aperture transform against the direct 3D transform

fn band_3ghz() -> FrequencyGrid {
    FrequencyGrid::new(57e9, 64, 3e9 / 63.0).unwrap()
}

/// Samples `[k][iy][ix]` of `Σ_n exp(-j2πf|x_n - p|/c)` on a square grid of `n` points.
fn plane_samples(sources: &[Point3], axis: &[f64], grid: &FrequencyGrid) -> Vec<Complex64> {
    let n = axis.len();
    let k_count = grid.num_tones;
    let mut out = vec![Complex64::new(0.0, 0.0); k_count * n * n];
    for (iy, &y) in axis.iter().enumerate() {
        for (ix, &x) in axis.iter().enumerate() {
            for s in sources {
                let r = ((s.x - x).powi(2) + (s.y - y).powi(2) + s.z * s.z).sqrt();
                let w = -2.0 * PI * r / SPEED_OF_LIGHT;
                let step = Complex64::cis(w * grid.delta);
                let mut v = Complex64::cis(w * grid.f1);
                for k in 0..k_count {
                    out[(k * n + iy) * n + ix] += v;
                    v *= step;
                }
            }
        }
    }
    out
}

#[test]
fn c4_aperture_transform_identity() {
    let _g = serial();
    let start = Instant::now();
    let grid = band_3ghz();
    let spacing = nyquist_spacing(grid.center()).unwrap();
    let n = (0.64 / spacing).round() as usize;
    let half = 0.5 * (n - 1) as f64 * spacing;
    let axis: Vec<f64> = (0..n).map(|i| -half + i as f64 * spacing).collect();
    let inner = 0.7 * half;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut errors = Vec::new();
    for _ in 0..20 {
        let count = rng.random_range(1..=5);
        let sources: Vec<Point3> = (0..count)
            .map(|_| {
                Point3::new(
                    rng.random_range(-0.1..0.1),
                    rng.random_range(-0.1..0.1),
                    8.0 + rng.random_range(-0.1..0.1),
                )
            })
            .collect();
        let samples = ApertureSamples::from_uniform(
            Frame::identity(),
            axis.clone(),
            axis.clone(),
            grid,
            plane_samples(&sources, &axis, &grid),
        )
        .unwrap();
        let spec = forward_2d_spectrum(&samples);
        let (mut measured, mut direct) = (Vec::new(), Vec::new());
        for k in 0..grid.num_tones {
            let f = grid.tone(k);
            for (iy, &fy) in spec.fy.iter().enumerate() {
                for (ix, &fx) in spec.fx.iter().enumerate() {
                    let fz2 = f * f - fx * fx - fy * fy;
                    if fz2 <= 0.0 {
                        continue;
                    }
                    let fz = fz2.sqrt();
                    let in_band = sources.iter().all(|s| {
                        (s.x - fx * s.z / fz).abs() < inner && (s.y - fy * s.z / fz).abs() < inner
                    });
                    if !in_band {
                        continue;
                    }
                    let t: Complex64 = sources
                        .iter()
                        .map(|s| Complex64::cis(-2.0 * PI / SPEED_OF_LIGHT * (fx * s.x + fy * s.y + fz * s.z)))
                        .sum();
                    measured.push(spec.get(ix, iy, k));
                    direct.push(t);
                }
            }
        }
        let dot: Complex64 = direct.iter().zip(&measured).map(|(t, s)| t.conj() * s).sum();
        let alpha = dot / direct.iter().map(|t| t.norm_sqr()).sum::<f64>();
        let num: f64 = direct.iter().zip(&measured).map(|(t, s)| (s - alpha * t).norm_sqr()).sum();
        let den: f64 = measured.iter().map(|s| s.norm_sqr()).sum();
        errors.push((num / den).sqrt());
    }
    let worst = errors.iter().cloned().fold(0.0, f64::max);
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    let elapsed = start.elapsed();
    let pass = worst < 0.05 && elapsed < Duration::from_secs(120);
    verdict(
        4,
        "aperture transform identity",
        pass,
        &format!("relative RMS error worst {worst:.3}, mean {mean:.3} over 20 scenes ({n}x{n} aperture)"),
        elapsed,
    );
}

// 5. imaging resolution

fn square_aperture(n: usize, width: f64) -> Vec<Point3> {
    let step = width / (n - 1) as f64;
    let mut out = Vec::with_capacity(n * n);
    for iy in 0..n {
        for ix in 0..n {
            out.push(Point3::new(-0.5 * width + ix as f64 * step, -0.5 * width + iy as f64 * step, 0.0));
        }
    }
    out
}

fn sfcw_observation(emitters: &[Point3], receivers: &[Point3], grid: &FrequencyGrid) -> PathObservation {
    PathObservation {
        path_id: 0,
        gamma: Complex64::new(1.0, 0.0),
        aoa_group: 0,
        sig_a: Vec::new(),
        sig_b: Vec::new(),
        sfcw: compop::channel::synthesize_sfcw(emitters, receivers, grid),
        num_tones: grid.num_tones,
    }
}

#[test]
fn c5_imaging_resolution() {
    let _g = serial();
    let start = Instant::now();
    let grid = band_3ghz();
    let sv = square_aperture(33, 1.0);
    let dy = azimuth_resolution(8.0, 1.0, grid.center());
    let dz = range_resolution(&grid);
    let params = ImagingParams {
        box_extent: [1.0, 1.0, 1.0],
        ..ImagingParams::default()
    };
    let center = Point3::new(0.05, -0.03, 8.1);
    let image = |emitters: &[Point3]| image_path(&sfcw_observation(emitters, &sv, &grid), &sv, &grid, &center, &params).unwrap().1;

    let truth = Point3::new(0.0, 0.0, 8.0);
    let single = image(&[truth]);
    let err = single[0] - truth;
    let located = err.x.abs() <= dy && err.y.abs() <= dy && err.z.abs() <= dz;

    let near = |cloud: &[Point3], p: &Point3, r: f64| cloud.iter().filter(|q| (*q - p).norm() <= r).count();
    let wide = [Point3::new(0.0, -1.5 * dy, 8.0), Point3::new(0.0, 1.5 * dy, 8.0)];
    let wide_cloud = image(&wide);
    let resolved = wide.iter().all(|p| near(&wide_cloud, p, 0.5 * dy) >= 1) && near(&wide_cloud, &truth, 3.0 * dy) >= 2;
    let close = [Point3::new(0.0, -0.15 * dy, 8.0), Point3::new(0.0, 0.15 * dy, 8.0)];
    let close_cloud = image(&close);
    let merged = near(&close_cloud, &truth, 3.0 * dy) == 1;

    let elapsed = start.elapsed();
    let pass = located && resolved && merged && elapsed < Duration::from_secs(120);
    verdict(
        5,
        "imaging resolution",
        pass,
        &format!(
            "peak offset ({:.3}, {:.3}, {:.3}) m vs ({dy:.3}, {dy:.3}, {dz:.3}); 3 dy pair resolved {resolved}; 0.3 dy pair merged {merged}",
            err.x, err.y, err.z
        ),
        elapsed,
    );
}

// 6. noiseless NLoS round trip

#[test]
fn c6_nlos_round_trip() {
    let _g = serial();
    let start = Instant::now();
    let cfg = nlos_reference(NoiseModel::noiseless());
    let scene = cfg.scene(6).unwrap();
    let (a, b) = (scene.anchor_a(), scene.anchor_b());
    let detections: Vec<VirtualDetection> = scene
        .surfaces
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let cloud = scene.tv_antennas.iter().map(|p| s.mirror(p)).collect();
            VirtualDetection::new(i as u32 + 1, s.mirror(&a), s.mirror(&b), cloud, scene.clock_offset).unwrap()
        })
        .collect();
    let out = combine(&detections, None, &SearchOptions::default(), 0.05).unwrap();
    let anchor_err = (out.x_a_star - a).norm();
    let mut surface_err: f64 = 0.0;
    for ps in &out.surfaces {
        let planted = scene.surfaces[ps.path_id as usize - 1];
        match (ps.surface, planted) {
            (
                Some(ReflectionSurface::Line { slope, intercept }),
                ReflectionSurface::Line { slope: s0, intercept: c0 },
            ) => surface_err = surface_err.max(rel(slope, s0)).max(rel(intercept, c0)),
            _ => surface_err = f64::INFINITY,
        }
    }
    let mapped = out
        .mapped_clouds
        .iter()
        .map(|(_, c)| hausdorff(c, &scene.tv_antennas).unwrap())
        .fold(0.0, f64::max);
    let elapsed = start.elapsed();
    let pass = anchor_err < 1e-4
        && surface_err < 0.01
        && mapped < 1e-3
        && out.mapped_clouds.len() == 3
        && elapsed < Duration::from_secs(60);
    verdict(
        6,
        "NLoS round trip",
        pass,
        &format!("anchor {anchor_err:.1e} m, surface relative {surface_err:.1e}, mapped Hausdorff {mapped:.1e} m"),
        elapsed,
    );
}

// 7. end-to-end reproduction band and trends

fn desk_scale(sweep: SweepConfig) -> ScenarioConfig {
    let mut cfg = ScenarioConfig::default();
    cfg.waveform.num_tones = 128;
    cfg.tv.num_antennas = 64;
    cfg.sv.num_antennas = 64;
    cfg.surfaces = reference_surfaces();
    cfg.sweep = sweep;
    cfg
}

/// Median per sweep point with failed trials counted as infinitely bad.
fn medians(report: &RunReport, points: usize) -> Vec<f64> {
    let per = report.trials.len() / points;
    report
        .trials
        .chunks(per)
        .map(|chunk| {
            let mut v: Vec<f64> = chunk.iter().map(|t| t.hausdorff_m.unwrap_or(f64::INFINITY)).collect();
            v.sort_by(f64::total_cmp);
            let m = v.len() / 2;
            if v.len() % 2 == 1 {
                v[m]
            } else {
                0.5 * (v[m - 1] + v[m])
            }
        })
        .collect()
}

#[test]
fn c7_end_to_end_band() {
    let _g = serial();
    let start = Instant::now();
    let opts = RunOptions::default();
    let sweep = |distances: Vec<f64>, num_surfaces: Vec<usize>| SweepConfig {
        distances,
        num_surfaces,
        num_rx: vec![64],
        trials: 50,
    };

    let base = run_sweep(&desk_scale(sweep(vec![8.0], vec![3])), &opts).unwrap();
    let median = medians(&base, 1)[0];
    let fail_rate = base.summary[0].fail_rate;
    let by_distance = medians(&run_sweep(&desk_scale(sweep(vec![4.0, 8.0, 12.0], vec![3])), &opts).unwrap(), 3);
    let by_paths = medians(&run_sweep(&desk_scale(sweep(vec![8.0], vec![3, 4, 5])), &opts).unwrap(), 3);
    let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
    let distance_trend = finite(&by_distance) && by_distance.windows(2).all(|w| w[1] >= w[0]);
    let path_trend = finite(&by_paths) && by_paths.windows(2).all(|w| w[1] <= w[0]);
    let first_error = base.trials.iter().find_map(|t| t.error.clone()).unwrap_or_default();

    let elapsed = start.elapsed();
    let pass = median <= 0.6 && distance_trend && path_trend && elapsed < Duration::from_secs(900);
    verdict(
        7,
        "end-to-end band",
        pass,
        &format!(
            "median Hausdorff {median:.3} m over 50 trials (fail rate {fail_rate:.2}{}); distance medians {by_distance:.3?} trend {distance_trend}; L medians {by_paths:.3?} trend {path_trend}",
            if first_error.is_empty() { String::new() } else { format!(", first error: {first_error}") }
        ),
        elapsed,
    );
}

// 8. metric properties and closed forms

#[test]
fn c8_metric_properties() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cloud = |rng: &mut ChaCha8Rng| -> Vec<Point3> {
        let n = rng.random_range(1..30);
        (0..n)
            .map(|_| Point3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)))
            .collect()
    };
    let mut axioms = true;
    for _ in 0..200 {
        let (a, b, c) = (cloud(&mut rng), cloud(&mut rng), cloud(&mut rng));
        let ab = hausdorff(&a, &b).unwrap();
        axioms &= ab == hausdorff(&b, &a).unwrap();
        axioms &= hausdorff(&a, &a).unwrap() == 0.0 && ab > 0.0;
        axioms &= hausdorff(&a, &c).unwrap() <= ab + hausdorff(&b, &c).unwrap() + 1e-12;
    }

    let r_max = max_unambiguous_range(11.72e6).unwrap();
    let spacing = nyquist_spacing(58.5e9).unwrap();
    let mut formulas = rel(r_max, 299_792_458.0 / 11.72e6) < 1e-9
        && (r_max - 25.58).abs() < 5e-3
        && rel(spacing, 299_792_458.0 / 234e9) < 1e-9
        && (spacing - 1.281e-3).abs() < 5e-7;
    for (g, s2) in [(Complex64::new(0.3, 0.4), 0.5), (Complex64::new(-0.9, 0.1), 0.02), (Complex64::new(0.0, 1.0), 2.0)] {
        formulas &= rel(rcs(0.0, s2, g).unwrap(), g.norm_sqr() / (2.0 * s2)) < 1e-9;
    }
    let elapsed = start.elapsed();
    let pass = axioms && formulas && elapsed < Duration::from_secs(10);
    verdict(
        8,
        "metric properties",
        pass,
        &format!("axioms on 200 pairs {axioms}; R_max {r_max:.4} m, spacing {:.4} mm, RCS identity {formulas}", spacing * 1e3),
        elapsed,
    );
}

// 9. determinism

/// Small NLoS scene that runs in well under a second per trial.
pub fn compact_nlos() -> ScenarioConfig {
    let mut cfg = ScenarioConfig::default();
    cfg.tv.size = [1.2, 0.6, 0.4];
    cfg.tv.num_antennas = 4;
    cfg.sv.aperture = [0.12, 0.12];
    cfg.waveform.num_tones = 64;
    cfg.noise = NoiseModel {
        phase_sigma: 0.0,
        snr_db: Some(40.0),
        seed: 11,
        ..NoiseModel::default()
    };
    cfg.pipeline.imaging.box_extent = [2.0, 2.0, 2.0];
    cfg.pipeline.trials = 3;
    cfg
}

#[test]
fn c9_determinism() {
    let _g = serial();
    let start = Instant::now();
    let cfg = compact_nlos();
    let run = |workers: usize| {
        let opts = RunOptions {
            workers,
            ..RunOptions::default()
        };
        run_nlos(&cfg, &opts).unwrap().report.to_json().unwrap()
    };
    let first = run(1);
    let again = run(1);
    let threaded = run(3);
    let all_ok = serde_json::from_str::<serde_json::Value>(&first).unwrap()["trials"]
        .as_array()
        .is_some_and(|t| t.iter().all(|t| t["ok"] == true));
    let elapsed = start.elapsed();
    let pass = first == again && first == threaded && all_ok;
    verdict(
        9,
        "determinism",
        pass,
        &format!(
            "repeat identical {}, 1 vs 3 workers identical {}, {} bytes",
            first == again,
            first == threaded,
            first.len()
        ),
        elapsed,
    );
}
