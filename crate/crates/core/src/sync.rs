//! PDoA anchor localization and clock-offset recovery.
//!
//! The inter-tone phase of each signature pair is `η_m = 2πΔ(τ_m - σ)`.
//! Differencing against antenna 1 cancels σ and leaves range differences
//! `F_m = D(x, p_m) - D(x, p_1)`, which Gauss-Newton inverts for `x`.

use std::f64::consts::PI;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::channel::PathObservation;
use crate::geometry::{canonical_angle, Point3, SPEED_OF_LIGHT};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Anchor {
    A,
    B,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PdoaMeasurement {
    /// `F̃_m` for `m = 2..N_r`, meters.
    pub f_tilde: Vec<f64>,
    /// Unwrapped `η̃_m` for `m = 1..N_r`, radians.
    pub eta_tilde: Vec<f64>,
    pub anchor: Anchor,
    pub delta: f64,
}

impl PdoaMeasurement {
    /// Build from unwrapped phase differences.
    pub fn from_eta(eta_tilde: Vec<f64>, anchor: Anchor, delta: f64) -> Self {
        let scale = SPEED_OF_LIGHT / (2.0 * PI * delta);
        let f_tilde = eta_tilde.iter().skip(1).map(|e| scale * (e - eta_tilde[0])).collect();
        PdoaMeasurement {
            f_tilde,
            eta_tilde,
            anchor,
            delta,
        }
    }

    /// Noise-free measurement of a planted source, for oracles.
    pub fn planted(source: &Point3, antennas: &[Point3], sigma: f64, delta: f64) -> Self {
        let eta = antennas
            .iter()
            .map(|p| 2.0 * PI * delta * ((source - p).norm() / SPEED_OF_LIGHT - sigma))
            .collect();
        Self::from_eta(eta, Anchor::A, delta)
    }
}

/// Extract `η̃` and `F̃` for one anchor from a path's signature symbols.
pub fn measure_pdoa(
    obs: &PathObservation,
    antennas: &[Point3],
    anchor: Anchor,
    delta: f64,
) -> Result<PdoaMeasurement> {
    let symbols = match anchor {
        Anchor::A => &obs.sig_a,
        Anchor::B => &obs.sig_b,
    };
    if symbols.len() != antennas.len() || symbols.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "{} signature symbols for {} antennas",
            symbols.len(),
            antennas.len()
        )));
    }
    let bound = crate::waveform::sync_spacing_bound(delta)?;
    for (i, w) in antennas.windows(2).enumerate() {
        let spacing = (w[1] - w[0]).norm();
        if spacing >= bound {
            return Err(Error::UnwrapAmbiguity {
                first: i,
                second: i + 1,
                spacing,
                bound,
            });
        }
    }
    let mut eta = Vec::with_capacity(symbols.len());
    for s in symbols {
        let raw = (s[0] * s[1].conj()).arg();
        let next = match eta.last() {
            None => raw,
            Some(&prev) => prev + canonical_angle(raw - prev),
        };
        eta.push(next);
    }
    Ok(PdoaMeasurement::from_eta(eta, anchor, delta))
}

/// Residuals `F̃_m - (D_m - D_1)` over the selected rows (indices into `f_tilde`).
fn residuals(meas: &PdoaMeasurement, antennas: &[Point3], x: &Point3, rows: &[usize]) -> Vec<f64> {
    let d1 = (x - antennas[0]).norm();
    rows.iter()
        .map(|&i| meas.f_tilde[i] - ((x - antennas[i + 1]).norm() - d1))
        .collect()
}

fn cost(meas: &PdoaMeasurement, antennas: &[Point3], x: &Point3, rows: &[usize]) -> f64 {
    residuals(meas, antennas, x, rows).iter().map(|r| r * r).sum()
}

/// Sum of squared range-difference residuals over all antennas.
pub fn objective(meas: &PdoaMeasurement, antennas: &[Point3], x: &Point3) -> f64 {
    let rows: Vec<usize> = (0..meas.f_tilde.len()).collect();
    cost(meas, antennas, x, &rows)
}

fn unit(v: Vector3<f64>) -> Vector3<f64> {
    let n = v.norm();
    if n > 0.0 {
        v / n
    } else {
        Vector3::zeros()
    }
}

fn normal_matrix(antennas: &[Point3], x: &Point3, rows: &[usize]) -> (Matrix3<f64>, Vec<Vector3<f64>>) {
    let u1 = unit(x - antennas[0]);
    let g: Vec<Vector3<f64>> = rows.iter().map(|&i| unit(x - antennas[i + 1]) - u1).collect();
    let gtg = g.iter().fold(Matrix3::zeros(), |acc, r| acc + r * r.transpose());
    (gtg, g)
}

fn well_conditioned(gtg: &Matrix3<f64>) -> bool {
    let eig = SymmetricEigen::new(*gtg).eigenvalues;
    let hi = eig.max();
    let lo = eig.min();
    hi > 0.0 && lo > hi * 1e-12
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub max_halvings: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tolerance: 1e-9,
            max_iterations: 100,
            max_halvings: 20,
        }
    }
}

struct GaussNewton {
    x: Point3,
    cost: f64,
    iterations: usize,
    converged: bool,
}

fn gauss_newton(
    meas: &PdoaMeasurement,
    antennas: &[Point3],
    start: Point3,
    rows: &[usize],
    opts: &SolverOptions,
) -> Result<GaussNewton> {
    let mut x = start;
    let mut current = cost(meas, antennas, &x, rows);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iterations {
        iterations += 1;
        let (gtg, g) = normal_matrix(antennas, &x, rows);
        if !well_conditioned(&gtg) {
            return Err(Error::RankDeficient);
        }
        let b = residuals(meas, antennas, &x, rows);
        let gtb = g.iter().zip(&b).fold(Vector3::zeros(), |acc, (r, bi)| acc + r * *bi);
        let inv = gtg.try_inverse().ok_or(Error::RankDeficient)?;
        let mut h = inv * gtb;
        let mut accepted = false;
        for _ in 0..=opts.max_halvings {
            let trial = x + h;
            let c = cost(meas, antennas, &trial, rows);
            if c <= current {
                x = trial;
                current = c;
                accepted = true;
                break;
            }
            h *= 0.5;
        }
        if h.norm() < opts.tolerance {
            converged = true;
            break;
        }
        if !accepted {
            break;
        }
    }
    Ok(GaussNewton {
        x,
        cost: current,
        iterations,
        converged,
    })
}

/// Axis-aligned box searched for the initial point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchRegion {
    pub min: [f64; 3],
    pub max: [f64; 3],
    #[serde(rename = "step_m")]
    pub step: f64,
}

impl SearchRegion {
    pub fn centroid(&self) -> Point3 {
        Point3::new(
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
            0.5 * (self.min[2] + self.max[2]),
        )
    }

    fn contains(&self, p: &Point3, margin: f64) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] - margin && p[i] <= self.max[i] + margin)
    }

    fn axis(&self, i: usize) -> Vec<f64> {
        let n = ((self.max[i] - self.min[i]) / self.step).floor().max(0.0) as usize;
        (0..=n).map(|j| self.min[i] + j as f64 * self.step).collect()
    }
}

impl Default for SearchRegion {
    fn default() -> Self {
        SearchRegion {
            min: [-19.0, -3.0, 0.1],
            max: [19.0, 3.0, 19.0],
            step: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitialGuess {
    pub point: Point3,
    pub used_fallback: bool,
}

/// Three rows of `f_tilde` whose antennas are spread as far apart as possible.
fn spread_rows(antennas: &[Point3]) -> Vec<usize> {
    let mut chosen = vec![0usize];
    let mut rows = Vec::new();
    while rows.len() < 3 && chosen.len() < antennas.len() {
        let best = (1..antennas.len())
            .filter(|m| !chosen.contains(m))
            .map(|m| {
                let gap = chosen
                    .iter()
                    .map(|&c| (antennas[m] - antennas[c]).norm())
                    .fold(f64::INFINITY, f64::min);
                (m, gap)
            })
            .fold(None, |acc: Option<(usize, f64)>, (m, gap)| match acc {
                Some((_, g)) if g >= gap => acc,
                _ => Some((m, gap)),
            });
        match best {
            Some((m, _)) => {
                chosen.push(m);
                rows.push(m - 1);
            }
            None => break,
        }
    }
    rows
}

/// Starting point for [`locate_anchor`]: grid search on three range-difference
/// equations, Gauss-Newton polish of the best few cells, then the candidate with
/// the lowest full objective. Falls back to the region centroid.
pub fn initial_guess(meas: &PdoaMeasurement, antennas: &[Point3], region: &SearchRegion) -> InitialGuess {
    let fallback = |why: &str| {
        log::warn!("initial guess: {why}, falling back to the search-region centroid");
        InitialGuess {
            point: region.centroid(),
            used_fallback: true,
        }
    };
    if antennas.len() < 4 || meas.f_tilde.len() + 1 != antennas.len() || !(region.step > 0.0) {
        return fallback("not enough antennas");
    }
    let rows = spread_rows(antennas);
    let (xs, ys, zs) = (region.axis(0), region.axis(1), region.axis(2));
    let mut cells: Vec<(f64, Point3)> = Vec::with_capacity(xs.len() * ys.len() * zs.len());
    for &x in &xs {
        for &y in &ys {
            for &z in &zs {
                let p = Point3::new(x, y, z);
                cells.push((cost(meas, antennas, &p, &rows), p));
            }
        }
    }
    cells.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut seeds: Vec<Point3> = Vec::new();
    for (_, p) in &cells {
        if seeds.len() == 8 {
            break;
        }
        if seeds.iter().all(|s| (s - p).norm() > 3.0 * region.step) {
            seeds.push(*p);
        }
    }
    let opts = SolverOptions {
        tolerance: 1e-6,
        max_iterations: 50,
        max_halvings: 20,
    };
    let mut best: Option<(f64, Point3)> = None;
    for seed in seeds {
        let Ok(fit) = gauss_newton(meas, antennas, seed, &rows, &opts) else {
            continue;
        };
        if !fit.x.iter().all(|v| v.is_finite()) || !region.contains(&fit.x, 2.0 * region.step) {
            continue;
        }
        let full = objective(meas, antennas, &fit.x);
        if best.is_none_or(|(c, _)| full < c) {
            best = Some((full, fit.x));
        }
    }
    match best {
        Some((_, point)) => InitialGuess {
            point,
            used_fallback: false,
        },
        None => fallback("no feasible point in the search region"),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyncResult {
    pub x_anchor: Point3,
    /// Filled by [`estimate_clock`]; zero straight out of [`locate_anchor`].
    pub sigma_hat: f64,
    /// `2(cσ_z/2πΔ)² (GᵀG)⁻¹` at the solution.
    pub covariance: Matrix3<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub objective: f64,
}

/// Gauss-Newton on all range differences from `guess`, halving steps that increase the cost.
pub fn locate_anchor(
    meas: &PdoaMeasurement,
    antennas: &[Point3],
    guess: Point3,
    phase_sigma: f64,
) -> Result<SyncResult> {
    locate_anchor_with(meas, antennas, guess, phase_sigma, &SolverOptions::default())
}

pub fn locate_anchor_with(
    meas: &PdoaMeasurement,
    antennas: &[Point3],
    guess: Point3,
    phase_sigma: f64,
    opts: &SolverOptions,
) -> Result<SyncResult> {
    if antennas.len() < 4 {
        return Err(Error::InvalidConfig(format!(
            "at least four SV antennas are required, got {}",
            antennas.len()
        )));
    }
    if meas.f_tilde.len() + 1 != antennas.len() {
        return Err(Error::InvalidConfig("measurement length does not match the array".into()));
    }
    let rows: Vec<usize> = (0..meas.f_tilde.len()).collect();
    let fit = gauss_newton(meas, antennas, guess, &rows, opts)?;
    let (gtg, _) = normal_matrix(antennas, &fit.x, &rows);
    let inv = gtg.try_inverse().ok_or(Error::RankDeficient)?;
    let scale = SPEED_OF_LIGHT * phase_sigma / (2.0 * PI * meas.delta);
    let cov = inv * (2.0 * scale * scale);
    Ok(SyncResult {
        x_anchor: fit.x,
        sigma_hat: 0.0,
        covariance: 0.5 * (cov + cov.transpose()),
        iterations: fit.iterations,
        converged: fit.converged,
        objective: fit.cost,
    })
}

/// Wrap a time offset into the unambiguous window `[-1/(2Δ), 1/(2Δ))`.
pub fn canonical_offset(t: f64, delta: f64) -> f64 {
    let period = 1.0 / delta;
    (t + 0.5 * period).rem_euclid(period) - 0.5 * period
}

/// Mean of `D(x, p_m)/c - η̃_m/(2πΔ)`, wrapped into the unambiguous window.
pub fn estimate_clock(x: &Point3, meas: &PdoaMeasurement, antennas: &[Point3]) -> f64 {
    let w = 2.0 * PI * meas.delta;
    let sum: f64 = antennas
        .iter()
        .zip(&meas.eta_tilde)
        .map(|(p, eta)| (x - p).norm() / SPEED_OF_LIGHT - eta / w)
        .sum();
    canonical_offset(sum / antennas.len() as f64, meas.delta)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathSync {
    pub anchor_a: SyncResult,
    pub anchor_b: SyncResult,
    /// Clock estimate from anchor `a`.
    pub sigma_hat: f64,
    /// `|σ̃_a - σ̃_b|` on the circle of period `1/Δ`.
    pub sigma_discrepancy: f64,
    pub used_fallback: bool,
}

/// Locate both anchors of one path and estimate its clock offset.
pub fn synchronize(
    obs: &PathObservation,
    antennas: &[Point3],
    delta: f64,
    region: &SearchRegion,
    phase_sigma: f64,
) -> Result<PathSync> {
    let mut out = Vec::with_capacity(2);
    let mut used_fallback = false;
    for anchor in [Anchor::A, Anchor::B] {
        let meas = measure_pdoa(obs, antennas, anchor, delta)?;
        let guess = initial_guess(&meas, antennas, region);
        used_fallback |= guess.used_fallback;
        let mut res = locate_anchor(&meas, antennas, guess.point, phase_sigma)?;
        res.sigma_hat = estimate_clock(&res.x_anchor, &meas, antennas);
        out.push(res);
    }
    let anchor_b = out.pop().unwrap();
    let anchor_a = out.pop().unwrap();
    let sigma_hat = anchor_a.sigma_hat;
    let sigma_discrepancy = canonical_offset(anchor_a.sigma_hat - anchor_b.sigma_hat, delta).abs();
    Ok(PathSync {
        anchor_a,
        anchor_b,
        sigma_hat,
        sigma_discrepancy,
        used_fallback,
    })
}

/// Antennas on a Fibonacci sphere of `radius` around `center`, for well-conditioned tests.
pub fn fibonacci_sphere(n: usize, center: Point3, radius: f64) -> Vec<Point3> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - y * y).sqrt();
            let t = golden * i as f64;
            center + radius * Point3::new(r * t.cos(), y, r * t.sin())
        })
        .collect()
}
