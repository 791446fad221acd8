//! Resolution bounds, link budgets and point-cloud metrics.

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{Point3, SPEED_OF_LIGHT};
use crate::waveform::FrequencyGrid;
use crate::{Error, Result};

/// Cross-range resolution of an aperture of width `d_aperture` at range `r`.
pub fn azimuth_resolution(r: f64, d_aperture: f64, f_c: f64) -> f64 {
    SPEED_OF_LIGHT * (4.0 * r * r + d_aperture * d_aperture).sqrt() / (2.0 * f_c * d_aperture)
}

/// Down-range resolution `c / (f_K - f_1)`.
pub fn range_resolution(grid: &FrequencyGrid) -> f64 {
    SPEED_OF_LIGHT / grid.bandwidth()
}

/// Rough-surface radar cross-section at incidence `theta_i`.
pub fn rcs(theta_i: f64, s2: f64, gamma_s0: Complex64) -> Result<f64> {
    if !(0.0..PI / 2.0).contains(&theta_i) {
        return Err(Error::Domain(format!("incident angle {theta_i} outside [0, pi/2)")));
    }
    if !(s2 > 0.0) {
        return Err(Error::Domain(format!("roughness s^2 must be positive, got {s2}")));
    }
    let sec = 1.0 / theta_i.cos();
    let tan = theta_i.tan();
    Ok(gamma_s0.norm_sqr() / (2.0 * s2) * sec.powi(4) * (-tan * tan / s2).exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkMode {
    RadarLos,
    CompopLos,
    RadarNlos,
    CompopNlos,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinkBudgetParams {
    /// Transmit power, W.
    pub pt: f64,
    pub gt: f64,
    pub wavelength: f64,
    /// LoS range, m.
    pub r: f64,
    /// TV to reflector, m.
    pub r1: f64,
    /// Reflector to SV, m.
    pub r2: f64,
    /// Incidence on the target vehicle body.
    pub theta_i: f64,
    /// Incidence on the reflecting surface.
    pub theta_l: f64,
    pub s2: f64,
    pub gamma_s0: Complex64,
}

impl Default for LinkBudgetParams {
    fn default() -> Self {
        LinkBudgetParams {
            pt: 1.0,
            gt: 1.0,
            wavelength: SPEED_OF_LIGHT / 58.5e9,
            r: 8.0,
            r1: 4.0,
            r2: 4.0,
            theta_i: 0.0,
            theta_l: 0.0,
            s2: 0.2,
            gamma_s0: Complex64::new(0.6, 0.0),
        }
    }
}

fn distance(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(Error::Domain(format!("{name} must be positive, got {v}")))
    }
}

/// Received power in watts for the chosen link.
pub fn rx_power(mode: LinkMode, p: &LinkBudgetParams) -> Result<f64> {
    let base = p.pt * p.gt * p.wavelength * p.wavelength;
    match mode {
        LinkMode::RadarLos => {
            let r = distance("r", p.r)?;
            Ok(base * rcs(p.theta_i, p.s2, p.gamma_s0)? / (64.0 * PI.powi(3) * r.powi(4)))
        }
        LinkMode::CompopLos => {
            let r = distance("r", p.r)?;
            Ok(base / (4.0 * PI * r).powi(2))
        }
        LinkMode::RadarNlos => {
            let r1 = distance("r1", p.r1)?;
            let r2 = distance("r2", p.r2)?;
            let s_t = rcs(p.theta_i, p.s2, p.gamma_s0)?;
            let s_l = rcs(p.theta_l, p.s2, p.gamma_s0)?;
            Ok(base * s_t * s_l * s_l / (4f64.powi(5) * PI.powi(5) * r1.powi(4) * r2.powi(4)))
        }
        LinkMode::CompopNlos => {
            let r1 = distance("r1", p.r1)?;
            let r2 = distance("r2", p.r2)?;
            let s_l = rcs(p.theta_l, p.s2, p.gamma_s0)?;
            Ok(base * s_l / (64.0 * PI.powi(3) * r1 * r1 * r2 * r2))
        }
    }
}

fn nearest(p: &Point3, cloud: &[Point3]) -> f64 {
    cloud
        .iter()
        .map(|q| (p - q).norm_squared())
        .fold(f64::INFINITY, f64::min)
        .sqrt()
}

/// One-sided distance `max_a min_b |a - b|`.
pub fn directed_hausdorff(a: &[Point3], b: &[Point3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyCloud);
    }
    Ok(a.par_iter().map(|p| nearest(p, b)).reduce(|| 0.0, f64::max))
}

pub fn hausdorff(a: &[Point3], b: &[Point3]) -> Result<f64> {
    Ok(directed_hausdorff(a, b)?.max(directed_hausdorff(b, a)?))
}

/// Root mean square of each estimate's distance to its nearest truth point. Diagnostic only.
pub fn nn_rmse(estimate: &[Point3], truth: &[Point3]) -> Result<f64> {
    if estimate.is_empty() || truth.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let sum: f64 = estimate.iter().map(|p| nearest(p, truth).powi(2)).sum();
    Ok((sum / estimate.len() as f64).sqrt())
}
