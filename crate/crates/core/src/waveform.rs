//! SFCW and signature tone plans, plus the sampling bounds they imply.

use serde::{Deserialize, Serialize};

use crate::geometry::{Scene, SPEED_OF_LIGHT};
use crate::{Error, Result};

/// Uniform tone plan `f_k = f1 + k * delta`, `k = 0..num_tones`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyGrid {
    #[serde(rename = "f1_hz")]
    pub f1: f64,
    pub num_tones: usize,
    #[serde(rename = "delta_hz")]
    pub delta: f64,
}

impl FrequencyGrid {
    pub fn new(f1: f64, num_tones: usize, delta: f64) -> Result<Self> {
        let grid = FrequencyGrid { f1, num_tones, delta };
        grid.check()?;
        Ok(grid)
    }

    pub fn check(&self) -> Result<()> {
        if !(self.f1.is_finite() && self.f1 > 0.0) {
            return Err(Error::InvalidConfig(format!("f1 must be positive, got {}", self.f1)));
        }
        if self.num_tones < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 tones, got {}",
                self.num_tones
            )));
        }
        if !(self.delta.is_finite() && self.delta > 0.0) {
            return Err(Error::InvalidConfig(format!("delta must be positive, got {}", self.delta)));
        }
        Ok(())
    }

    /// Tone `k`, zero-based.
    #[inline]
    pub fn tone(&self, k: usize) -> f64 {
        self.f1 + k as f64 * self.delta
    }

    pub fn tones(&self) -> Vec<f64> {
        (0..self.num_tones).map(|k| self.tone(k)).collect()
    }

    pub fn f_max(&self) -> f64 {
        self.tone(self.num_tones - 1)
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.f1 + self.f_max())
    }

    pub fn bandwidth(&self) -> f64 {
        (self.num_tones - 1) as f64 * self.delta
    }
}

impl Default for FrequencyGrid {
    fn default() -> Self {
        FrequencyGrid {
            f1: 57e9,
            num_tones: 256,
            delta: 11.72e6,
        }
    }
}

/// Anchor tones. Anchor `a` sends `f_a` and `f_a + delta`, anchor `b` sends `f_b` and `f_b + delta`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignatureConfig {
    #[serde(rename = "f_a_hz")]
    pub f_a: f64,
    #[serde(rename = "f_b_hz")]
    pub f_b: f64,
    #[serde(rename = "delta_hz")]
    pub delta: f64,
}

impl SignatureConfig {
    /// Tones just below the SFCW band: `f1 - 4Δ` for `a`, `f1 - 2Δ` for `b`.
    pub fn below(grid: &FrequencyGrid) -> Self {
        SignatureConfig {
            f_a: grid.f1 - 4.0 * grid.delta,
            f_b: grid.f1 - 2.0 * grid.delta,
            delta: grid.delta,
        }
    }

    pub fn tones(&self) -> [f64; 4] {
        [self.f_a, self.f_a + self.delta, self.f_b, self.f_b + self.delta]
    }

    pub fn check(&self, grid: &FrequencyGrid) -> Result<()> {
        if !(self.delta.is_finite() && self.delta > 0.0) {
            return Err(Error::InvalidConfig("signature delta must be positive".into()));
        }
        let tones = self.tones();
        if tones.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
            return Err(Error::InvalidConfig("signature tones must be positive".into()));
        }
        let tol = 1e-6 * self.delta;
        for i in 0..4 {
            for j in i + 1..4 {
                if (tones[i] - tones[j]).abs() < tol {
                    return Err(Error::InvalidConfig(format!(
                        "signature tones overlap at {} Hz",
                        tones[i]
                    )));
                }
            }
        }
        if let Some(f) = tones
            .iter()
            .find(|f| **f > grid.f1 - tol && **f < grid.f_max() + tol)
        {
            return Err(Error::InvalidConfig(format!(
                "signature tone {f} Hz falls inside the SFCW band"
            )));
        }
        Ok(())
    }
}

fn positive(delta: f64) -> Result<f64> {
    if delta.is_finite() && delta > 0.0 {
        Ok(delta)
    } else {
        Err(Error::InvalidConfig(format!("delta must be positive, got {delta}")))
    }
}

/// Longest distance an SFCW with tone gap `delta` ranges without wrapping, `c/Δ`.
pub fn max_unambiguous_range(delta: f64) -> Result<f64> {
    Ok(SPEED_OF_LIGHT / positive(delta)?)
}

/// Largest spacing between consecutive SV antennas that keeps PDoA unwrapping unambiguous, `c/(2Δ)`.
pub fn sync_spacing_bound(delta: f64) -> Result<f64> {
    Ok(SPEED_OF_LIGHT / (2.0 * positive(delta)?))
}

/// Aperture sampling bound `c/(4 f_c)`.
pub fn nyquist_spacing(center_frequency: f64) -> Result<f64> {
    if !(center_frequency.is_finite() && center_frequency > 0.0) {
        return Err(Error::InvalidConfig("center frequency must be positive".into()));
    }
    Ok(SPEED_OF_LIGHT / (4.0 * center_frequency))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    ApertureSampling,
    SyncSpacing,
    RangeAmbiguity,
    TooFewReceivers,
    TooFewSurfaces,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Violation {
    pub rule: Rule,
    pub severity: Severity,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has_errors(&self) -> bool {
        self.violations.iter().any(|v| v.severity == Severity::Error)
    }

    pub fn has(&self, rule: Rule) -> bool {
        self.violations.iter().any(|v| v.rule == rule)
    }

    fn push(&mut self, rule: Rule, severity: Severity, message: String) {
        self.violations.push(Violation { rule, severity, message });
    }
}

/// Check a scene against the sampling and feasibility bounds of `grid`.
pub fn validate_scene(scene: &Scene, grid: &FrequencyGrid) -> ValidationReport {
    let mut report = ValidationReport::default();
    if let Err(e) = grid.check() {
        report.push(Rule::RangeAmbiguity, Severity::Error, e.to_string());
        return report;
    }
    let sv = &scene.sv_antennas;

    // Aperture sampling: every antenna's nearest neighbour.
    let bound = SPEED_OF_LIGHT / (4.0 * grid.center());
    let mut widest: f64 = 0.0;
    for (i, p) in sv.iter().enumerate() {
        let nearest = sv
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, q)| (p - q).norm())
            .fold(f64::INFINITY, f64::min);
        if nearest.is_finite() {
            widest = widest.max(nearest);
        }
    }
    if widest > bound {
        report.push(
            Rule::ApertureSampling,
            Severity::Warning,
            format!("SV antenna spacing {widest:.4e} m exceeds c/(4 f_c) = {bound:.4e} m"),
        );
    }

    let unwrap = SPEED_OF_LIGHT / (2.0 * grid.delta);
    if let Some((i, d)) = sv
        .windows(2)
        .map(|w| (w[1] - w[0]).norm())
        .enumerate()
        .find(|(_, d)| *d >= unwrap)
    {
        report.push(
            Rule::SyncSpacing,
            Severity::Warning,
            format!("SV antennas {i} and {} are {d:.3} m apart, unwrap bound is {unwrap:.3} m", i + 1),
        );
    }

    let r_max = SPEED_OF_LIGHT / grid.delta;
    let reach = scene.max_path_length();
    if reach >= r_max {
        report.push(
            Rule::RangeAmbiguity,
            Severity::Error,
            format!("longest path {reach:.2} m exceeds the unambiguous range c/Δ = {r_max:.2} m"),
        );
    }

    if sv.len() < 4 {
        report.push(
            Rule::TooFewReceivers,
            Severity::Error,
            format!("at least four SV antennas are required, got {}", sv.len()),
        );
    }
    if !scene.has_los && scene.surfaces.len() < 3 {
        report.push(
            Rule::TooFewSurfaces,
            Severity::Error,
            format!(
                "without a LoS path at least three reflection surfaces are required, got {}",
                scene.surfaces.len()
            ),
        );
    }
    report
}
