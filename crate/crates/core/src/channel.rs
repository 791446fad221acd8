//! Forward model for the demodulated symbols seen by the SV.
//!
//! Every noise draw comes from a ChaCha stream keyed by `(kind, path, antenna)`,
//! so the order in which cells are simulated never changes the output.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::{Read, Write};

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{path_length, Point3, Propagation, Scene, SPEED_OF_LIGHT};
use crate::waveform::{FrequencyGrid, SignatureConfig};
use crate::{Error, Result};

/// How signature phase noise is split between antennas.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseNoiseModel {
    /// Each tone gets `N(0, σ_z²/2)`, so every measured phase difference has variance `σ_z²`.
    #[default]
    PerAntenna,
    /// Antenna 0 is clean and every other tone gets `N(0, σ_z²)`, which makes the
    /// range-difference rows independent with variance `2(cσ_z/2πΔ)²`.
    PerDifference,
}

/// Signal level that `snr_db` is measured against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnrReference {
    /// `|Γ|²`, the power of one transmitter's contribution.
    #[default]
    PerTransmitter,
    /// `N_t |Γ|²`, the incoherent power of the full superposition.
    Superposed,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseModel {
    #[serde(rename = "phase_sigma_rad")]
    pub phase_sigma: f64,
    /// `None` disables AWGN.
    pub snr_db: Option<f64>,
    pub seed: u64,
    #[serde(default)]
    pub phase_model: PhaseNoiseModel,
    #[serde(default)]
    pub snr_reference: SnrReference,
}

impl NoiseModel {
    pub fn noiseless() -> Self {
        NoiseModel {
            phase_sigma: 0.0,
            snr_db: None,
            seed: 0,
            phase_model: PhaseNoiseModel::PerAntenna,
            snr_reference: SnrReference::PerTransmitter,
        }
    }

    pub fn check(&self) -> Result<()> {
        if !(self.phase_sigma.is_finite() && self.phase_sigma >= 0.0) {
            return Err(Error::InvalidConfig("phase_sigma must be finite and >= 0".into()));
        }
        if self.snr_db.is_some_and(|s| !s.is_finite()) {
            return Err(Error::InvalidConfig("snr_db must be finite".into()));
        }
        Ok(())
    }
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel {
            phase_sigma: 0.224,
            snr_db: Some(10.0),
            seed: 0,
            phase_model: PhaseNoiseModel::PerAntenna,
            snr_reference: SnrReference::PerTransmitter,
        }
    }
}

const KIND_SIGNATURE: u64 = 1;
const KIND_SFCW: u64 = 2;

fn cell_rng(seed: u64, kind: u64, path: u32, antenna: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((kind << 60) | ((path as u64 & 0xfff) << 48) | (antenna as u64 & 0xffff_ffff_ffff));
    rng
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// One propagation path to simulate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathSpec {
    /// 0 is the LoS path, reflections count from 1.
    pub path_id: u32,
    pub propagation: Propagation,
    pub gamma: Complex64,
    /// Stand-in for AoA separation: paths sharing a label arrive from the same direction.
    pub aoa_group: u32,
}

impl PathSpec {
    /// One spec per path of `scene`, LoS first. `gammas[i]` applies to surface `i`, default 1.
    pub fn for_scene(scene: &Scene, gammas: &[Complex64]) -> Vec<PathSpec> {
        let mut out = Vec::new();
        if scene.has_los {
            out.push(PathSpec {
                path_id: 0,
                propagation: Propagation::Direct,
                gamma: Complex64::new(1.0, 0.0),
                aoa_group: 0,
            });
        }
        for (i, s) in scene.surfaces.iter().enumerate() {
            let id = i as u32 + 1;
            out.push(PathSpec {
                path_id: id,
                propagation: Propagation::Reflected(*s),
                gamma: gammas.get(i).copied().unwrap_or(Complex64::new(1.0, 0.0)),
                aoa_group: id,
            });
        }
        out
    }
}

/// Demodulated symbols of one path.
#[derive(Clone, Debug, PartialEq)]
pub struct PathObservation {
    pub path_id: u32,
    pub gamma: Complex64,
    pub aoa_group: u32,
    /// Per SV antenna: symbols on `f_a` and `f_a + Δ`.
    pub sig_a: Vec<[Complex64; 2]>,
    pub sig_b: Vec<[Complex64; 2]>,
    /// Row-major `[antenna][tone]`, empty until filled.
    pub sfcw: Vec<Complex64>,
    pub num_tones: usize,
}

impl PathObservation {
    pub fn num_antennas(&self) -> usize {
        if self.num_tones > 0 {
            self.sfcw.len() / self.num_tones
        } else {
            self.sig_a.len()
        }
    }

    pub fn sfcw_row(&self, m: usize) -> &[Complex64] {
        &self.sfcw[m * self.num_tones..(m + 1) * self.num_tones]
    }
}

fn phase_noise_scale(noise: &NoiseModel, antenna: usize) -> f64 {
    match noise.phase_model {
        PhaseNoiseModel::PerAntenna => noise.phase_sigma / 2f64.sqrt(),
        PhaseNoiseModel::PerDifference if antenna == 0 => 0.0,
        PhaseNoiseModel::PerDifference => noise.phase_sigma,
    }
}

/// Signature symbols `Γ e^{j2πf(σ-τ)}` and `Γ e^{j2π(f+Δ)(σ-τ)}` for both anchors on every path.
pub fn simulate_signature(
    scene: &Scene,
    paths: &[PathSpec],
    sig: &SignatureConfig,
    noise: &NoiseModel,
) -> Vec<PathObservation> {
    let anchors = [scene.anchor_a(), scene.anchor_b()];
    let freqs = [[sig.f_a, sig.f_a + sig.delta], [sig.f_b, sig.f_b + sig.delta]];
    paths
        .iter()
        .map(|spec| {
            let rows: Vec<[[Complex64; 2]; 2]> = scene
                .sv_antennas
                .par_iter()
                .enumerate()
                .map(|(m, p)| {
                    let mut rng = cell_rng(noise.seed, KIND_SIGNATURE, spec.path_id, m);
                    let scale = phase_noise_scale(noise, m);
                    let mut out = [[Complex64::new(0.0, 0.0); 2]; 2];
                    for (which, anchor) in anchors.iter().enumerate() {
                        let tau = path_length(&spec.propagation, anchor, p) / SPEED_OF_LIGHT;
                        let lag = scene.clock_offset - tau;
                        for (t, f) in freqs[which].iter().enumerate() {
                            let jitter = if scale > 0.0 { scale * normal(&mut rng) } else { 0.0 };
                            out[which][t] = spec.gamma * Complex64::cis(2.0 * PI * f * lag + jitter);
                        }
                    }
                    out
                })
                .collect();
            PathObservation {
                path_id: spec.path_id,
                gamma: spec.gamma,
                aoa_group: spec.aoa_group,
                sig_a: rows.iter().map(|r| r[0]).collect(),
                sig_b: rows.iter().map(|r| r[1]).collect(),
                sfcw: Vec::new(),
                num_tones: 0,
            }
        })
        .collect()
}

/// Complex AWGN variance per SFCW symbol.
pub fn awgn_variance(noise: &NoiseModel, gamma: Complex64, num_tx: usize) -> f64 {
    match noise.snr_db {
        None => 0.0,
        Some(snr) => {
            let reference = match noise.snr_reference {
                SnrReference::PerTransmitter => 1.0,
                SnrReference::Superposed => num_tx as f64,
            };
            gamma.norm_sqr() * reference * 10f64.powf(-snr / 10.0)
        }
    }
}

/// SFCW symbols of one path after compensating the clock with `sigma_estimate`.
pub fn simulate_sfcw_path(
    scene: &Scene,
    spec: &PathSpec,
    grid: &FrequencyGrid,
    noise: &NoiseModel,
    sigma_estimate: f64,
) -> Vec<Complex64> {
    let k_count = grid.num_tones;
    let residual = scene.clock_offset - sigma_estimate;
    let std = (awgn_variance(noise, spec.gamma, scene.tv_antennas.len()) / 2.0).sqrt();
    let rows: Vec<Vec<Complex64>> = scene
        .sv_antennas
        .par_iter()
        .enumerate()
        .map(|(m, p)| {
            let lags: Vec<f64> = scene
                .tv_antennas
                .iter()
                .map(|tx| residual - path_length(&spec.propagation, tx, p) / SPEED_OF_LIGHT)
                .collect();
            let mut rng = cell_rng(noise.seed, KIND_SFCW, spec.path_id, m);
            (0..k_count)
                .map(|k| {
                    let f = grid.tone(k);
                    let sum: Complex64 = lags.iter().map(|t| Complex64::cis(2.0 * PI * f * t)).sum();
                    let mut y = spec.gamma * sum;
                    if std > 0.0 {
                        let re = normal(&mut rng);
                        let im = normal(&mut rng);
                        y += Complex64::new(std * re, std * im);
                    }
                    y
                })
                .collect()
        })
        .collect();
    rows.concat()
}

/// Fill the SFCW block of every observation; `sigma_estimates[i]` compensates `observations[i]`.
pub fn simulate_sfcw(
    scene: &Scene,
    paths: &[PathSpec],
    grid: &FrequencyGrid,
    noise: &NoiseModel,
    sigma_estimates: &[f64],
    observations: &mut [PathObservation],
) -> Result<()> {
    if paths.len() != observations.len() || sigma_estimates.len() != observations.len() {
        return Err(Error::InvalidConfig(format!(
            "{} paths, {} clock estimates and {} observations",
            paths.len(),
            sigma_estimates.len(),
            observations.len()
        )));
    }
    for ((spec, sigma), obs) in paths.iter().zip(sigma_estimates).zip(observations.iter_mut()) {
        obs.sfcw = simulate_sfcw_path(scene, spec, grid, noise, *sigma);
        obs.num_tones = grid.num_tones;
    }
    Ok(())
}

/// Group observations by AoA label, ordered by label. Path ids must be unique.
pub fn resolve_paths(observations: Vec<PathObservation>) -> Result<Vec<Vec<PathObservation>>> {
    let mut seen = std::collections::BTreeSet::new();
    let mut groups: BTreeMap<u32, Vec<PathObservation>> = BTreeMap::new();
    for obs in observations {
        if !seen.insert(obs.path_id) {
            return Err(Error::DuplicateLabel(obs.path_id));
        }
        groups.entry(obs.aoa_group).or_default().push(obs);
    }
    Ok(groups.into_values().collect())
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    path_id: u32,
    m: usize,
    k: usize,
    re: f64,
    im: f64,
}

/// Dump SFCW symbols as CSV with header `path_id,m,k,re,im`.
pub fn write_observations_csv<W: Write>(writer: W, observations: &[PathObservation]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for obs in observations {
        for m in 0..obs.num_antennas() {
            if obs.num_tones == 0 {
                break;
            }
            for (k, y) in obs.sfcw_row(m).iter().enumerate() {
                w.serialize(Row {
                    path_id: obs.path_id,
                    m,
                    k,
                    re: y.re,
                    im: y.im,
                })?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Parse a dump written by [`write_observations_csv`]. Each path must cover a dense `m x k` block.
///
/// Signature symbols are not part of the dump, so `sig_a`/`sig_b` come back empty,
/// `gamma` is 1 and `aoa_group` equals `path_id`.
pub fn read_observations_csv<R: Read>(reader: R) -> Result<Vec<PathObservation>> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    {
        let headers = r.headers()?;
        if headers.iter().map(str::trim).ne(["path_id", "m", "k", "re", "im"]) {
            return Err(Error::Parse(format!("unexpected header {headers:?}")));
        }
    }
    let mut cells: BTreeMap<u32, BTreeMap<(usize, usize), Complex64>> = BTreeMap::new();
    for row in r.deserialize() {
        let row: Row = row?;
        if !(row.re.is_finite() && row.im.is_finite()) {
            return Err(Error::Parse(format!("non-finite symbol at path {} m {} k {}", row.path_id, row.m, row.k)));
        }
        let slot = cells.entry(row.path_id).or_default();
        if slot.insert((row.m, row.k), Complex64::new(row.re, row.im)).is_some() {
            return Err(Error::Parse(format!("duplicate cell path {} m {} k {}", row.path_id, row.m, row.k)));
        }
    }
    let mut out = Vec::with_capacity(cells.len());
    for (path_id, block) in cells {
        let rows = block.keys().map(|(m, _)| m + 1).max().unwrap_or(0);
        let tones = block.keys().map(|(_, k)| k + 1).max().unwrap_or(0);
        if rows.checked_mul(tones) != Some(block.len()) {
            return Err(Error::Parse(format!("path {path_id} is not a dense antenna x tone block")));
        }
        out.push(PathObservation {
            path_id,
            gamma: Complex64::new(1.0, 0.0),
            aoa_group: path_id,
            sig_a: Vec::new(),
            sig_b: Vec::new(),
            sfcw: block.into_values().collect(),
            num_tones: tones,
        });
    }
    Ok(out)
}

/// Convenience for tests and the imaging oracle: noiseless SFCW from arbitrary emitters.
pub fn synthesize_sfcw(emitters: &[Point3], receivers: &[Point3], grid: &FrequencyGrid) -> Vec<Complex64> {
    let mut out = Vec::with_capacity(receivers.len() * grid.num_tones);
    for p in receivers {
        let lags: Vec<f64> = emitters.iter().map(|x| -(x - p).norm() / SPEED_OF_LIGHT).collect();
        for k in 0..grid.num_tones {
            let f = grid.tone(k);
            out.push(lags.iter().map(|t| Complex64::cis(2.0 * PI * f * t)).sum());
        }
    }
    out
}
