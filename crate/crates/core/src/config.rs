//! Scenario description and scene construction.
//!
//! One JSON document drives every run. Physical quantities carry their unit in
//! the field name. `ScenarioConfig::scene` turns it into antenna positions.

use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::NoiseModel;
use crate::geometry::{Point3, ReflectionSurface, Scene};
use crate::imaging::ImagingParams;
use crate::sync::SearchRegion;
use crate::waveform::{validate_scene, FrequencyGrid, SignatureConfig, ValidationReport};
use crate::{Error, Result};

const PLACEMENT_STREAM: u64 = 3 << 60;

/// Target vehicle: a cuboid body with antennas spread over its shell.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TvConfig {
    /// Body extent along x, y, z.
    #[serde(rename = "size_m")]
    pub size: [f64; 3],
    pub num_antennas: usize,
    /// Range from the SV origin to the body center.
    #[serde(rename = "distance_m")]
    pub distance: f64,
}

impl Default for TvConfig {
    fn default() -> Self {
        TvConfig {
            size: [3.0, 1.0, 0.6],
            num_antennas: 64,
            distance: 8.0,
        }
    }
}

/// Sensing vehicle: a planar array on `z = 0` facing `+z`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvConfig {
    /// Aperture extent along x and y.
    #[serde(rename = "aperture_m")]
    pub aperture: [f64; 2],
    pub num_antennas: usize,
}

impl Default for SvConfig {
    fn default() -> Self {
        SvConfig {
            aperture: [1.0, 1.0],
            num_antennas: 64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WaveformConfig {
    #[serde(rename = "f1_hz")]
    pub f1: f64,
    pub num_tones: usize,
    #[serde(rename = "delta_hz")]
    pub delta: f64,
    /// Defaults to two tone pairs just below the band.
    #[serde(default)]
    pub signature: Option<SignatureConfig>,
}

impl Default for WaveformConfig {
    fn default() -> Self {
        let g = FrequencyGrid::default();
        WaveformConfig {
            f1: g.f1,
            num_tones: g.num_tones,
            delta: g.delta,
            signature: None,
        }
    }
}

impl WaveformConfig {
    pub fn grid(&self) -> Result<FrequencyGrid> {
        FrequencyGrid::new(self.f1, self.num_tones, self.delta)
    }

    pub fn signature(&self) -> Result<SignatureConfig> {
        let grid = self.grid()?;
        let sig = self.signature.unwrap_or_else(|| SignatureConfig::below(&grid));
        sig.check(&grid)?;
        Ok(sig)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(flatten)]
    pub imaging: ImagingParams,
    #[serde(rename = "theta_step_rad")]
    pub theta_step: f64,
    /// Clock clustering tolerance; defaults to `5σ_z/(2πΔ√N_r)`, at least 1 ps.
    #[serde(rename = "clock_tolerance_s", default)]
    pub clock_tolerance: Option<f64>,
    #[serde(default)]
    pub search_region: SearchRegion,
    /// Trials for `run-los` and `run-nlos`.
    pub trials: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            imaging: ImagingParams::default(),
            theta_step: 1e-3,
            clock_tolerance: None,
            search_region: SearchRegion::default(),
            trials: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(rename = "distances_m")]
    pub distances: Vec<f64>,
    /// Each entry takes the first `L` configured surfaces.
    pub num_surfaces: Vec<usize>,
    pub num_rx: Vec<usize>,
    pub trials: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            distances: vec![4.0, 8.0, 12.0],
            num_surfaces: vec![3],
            num_rx: vec![64],
            trials: 100,
        }
    }
}

/// Reflection coefficient of one surface.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Reflectivity {
    pub magnitude: f64,
    #[serde(rename = "phase_rad")]
    pub phase: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub tv: TvConfig,
    #[serde(default)]
    pub sv: SvConfig,
    #[serde(default = "default_surfaces")]
    pub surfaces: Vec<ReflectionSurface>,
    /// One entry per surface; missing entries mean `Γ = 1`.
    #[serde(default)]
    pub reflectivity: Vec<Reflectivity>,
    #[serde(default)]
    pub has_los: bool,
    #[serde(rename = "clock_offset_s", default = "default_clock_offset")]
    pub clock_offset: f64,
    #[serde(default)]
    pub waveform: WaveformConfig,
    #[serde(default)]
    pub noise: NoiseModel,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
}

fn default_surfaces() -> Vec<ReflectionSurface> {
    reference_surfaces()[..3].to_vec()
}

fn default_clock_offset() -> f64 {
    20e-9
}

/// The five reference walls; the first three are the default topology.
pub fn reference_surfaces() -> Vec<ReflectionSurface> {
    vec![
        ReflectionSurface::line(1.02, 3.0),
        ReflectionSurface::line(0.25, 3.25),
        ReflectionSurface::line(3.0, 4.0),
        ReflectionSurface::line(-0.5, 9.0),
        ReflectionSurface::line(0.2, 6.0),
    ]
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            tv: TvConfig::default(),
            sv: SvConfig::default(),
            surfaces: default_surfaces(),
            reflectivity: Vec::new(),
            has_los: false,
            clock_offset: default_clock_offset(),
            waveform: WaveformConfig::default(),
            noise: NoiseModel::default(),
            pipeline: PipelineConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

/// Largest divisor of `n` not above `√n`.
fn grid_rows(n: usize) -> usize {
    let mut rows = (n as f64).sqrt().floor() as usize;
    while rows > 1 && n % rows != 0 {
        rows -= 1;
    }
    rows.max(1)
}

/// `n` antennas on a `rows × cols` grid over `aperture`, centered at the origin
/// on `z = 0`, listed in serpentine order so consecutive antennas are adjacent.
pub fn sv_array(aperture: [f64; 2], n: usize) -> Vec<Point3> {
    let rows = grid_rows(n);
    let cols = n / rows;
    let coord = |i: usize, count: usize, width: f64| {
        if count == 1 {
            0.0
        } else {
            -0.5 * width + width * i as f64 / (count - 1) as f64
        }
    };
    let mut out = Vec::with_capacity(n);
    for r in 0..rows {
        for j in 0..cols {
            let c = if r % 2 == 0 { j } else { cols - 1 - j };
            out.push(Point3::new(coord(c, cols, aperture[0]), coord(r, rows, aperture[1]), 0.0));
        }
    }
    out
}

/// Split `n` over `weights` by largest remainder; ties go to the lower index.
fn apportion(n: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| n as f64 * w / total).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - counts[a] as f64;
        let rb = quotas[b] - counts[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let missing = n - counts.iter().sum::<usize>();
    for &i in order.iter().take(missing) {
        counts[i] += 1;
    }
    counts
}

/// Stratified placement on the shell of a cuboid of `size` centered at the origin:
/// faces receive antennas in proportion to area, and each antenna is jittered
/// inside its own cell of a per-face grid.
pub fn shell_antennas(size: [f64; 3], n: usize, seed: u64) -> Vec<Point3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(PLACEMENT_STREAM);
    let [lx, ly, lz] = size;
    // (fixed axis, sign, in-plane axes u and v)
    let faces: [(usize, f64, usize, usize); 6] = [
        (0, -1.0, 1, 2),
        (0, 1.0, 1, 2),
        (1, -1.0, 0, 2),
        (1, 1.0, 0, 2),
        (2, -1.0, 0, 1),
        (2, 1.0, 0, 1),
    ];
    let areas: Vec<f64> = faces.iter().map(|&(_, _, u, v)| size[u] * size[v]).collect();
    let counts = apportion(n, &areas);
    let mut out = Vec::with_capacity(n);
    for (&(axis, sign, u, v), &count) in faces.iter().zip(&counts) {
        if count == 0 {
            continue;
        }
        let (wu, wv) = (size[u], size[v]);
        let cols = ((count as f64 * wu / wv).sqrt().round() as usize).clamp(1, count);
        let rows = count.div_ceil(cols);
        for i in 0..count {
            let (r, c) = (i / cols, i % cols);
            let pu = -0.5 * wu + wu * (c as f64 + rng.random::<f64>()) / cols as f64;
            let pv = -0.5 * wv + wv * (r as f64 + rng.random::<f64>()) / rows as f64;
            let mut p = Point3::zeros();
            p[axis] = sign * 0.5 * [lx, ly, lz][axis];
            p[u] = pu;
            p[v] = pv;
            out.push(p);
        }
    }
    out
}

/// Indices of the antennas with the smallest and largest x (lowest index on ties).
pub fn extreme_x(points: &[Point3]) -> (usize, usize) {
    let mut a = 0;
    let mut b = 0;
    for (i, p) in points.iter().enumerate() {
        if p.x < points[a].x {
            a = i;
        }
        if p.x > points[b].x {
            b = i;
        }
    }
    (a, b)
}

/// Per-trial seed: a SplitMix64 step over the base seed and trial index.
pub fn trial_seed(seed: u64, trial: u64) -> u64 {
    let mut z = seed.wrapping_add(trial.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = serde_json::from_str(text)?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// SHA-256 of the compact JSON form, hex encoded.
    pub fn sha256(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self)?;
        Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Structural checks that do not need a scene.
    pub fn check(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !self.tv.size.iter().all(|v| positive(*v)) {
            return bad("tv.size_m must be positive".into());
        }
        if self.tv.num_antennas < 2 {
            return bad(format!("tv.num_antennas must be at least 2, got {}", self.tv.num_antennas));
        }
        if !positive(self.tv.distance) {
            return bad("tv.distance_m must be positive".into());
        }
        if !self.sv.aperture.iter().all(|v| positive(*v)) {
            return bad("sv.aperture_m must be positive".into());
        }
        if self.sv.num_antennas == 0 {
            return bad("sv.num_antennas must be positive".into());
        }
        if self.surfaces.iter().any(|s| !s.is_finite()) {
            return bad("surfaces must be finite".into());
        }
        if self.reflectivity.len() > self.surfaces.len() {
            return bad("more reflectivity entries than surfaces".into());
        }
        if self
            .reflectivity
            .iter()
            .any(|r| !(r.magnitude.is_finite() && r.magnitude > 0.0 && r.phase.is_finite()))
        {
            return bad("reflectivity magnitude must be positive and phase finite".into());
        }
        if !self.clock_offset.is_finite() {
            return bad("clock_offset_s must be finite".into());
        }
        self.waveform.signature()?;
        self.noise.check()?;
        self.pipeline.imaging.check()?;
        if !positive(self.pipeline.theta_step) || self.pipeline.theta_step > 0.1 {
            return bad("theta_step_rad must lie in (0, 0.1]".into());
        }
        if self.pipeline.clock_tolerance.is_some_and(|t| !(t.is_finite() && t >= 0.0)) {
            return bad("clock_tolerance_s must be finite and >= 0".into());
        }
        let r = &self.pipeline.search_region;
        if !positive(r.step) || (0..3).any(|i| !(r.min[i].is_finite() && r.max[i].is_finite() && r.min[i] <= r.max[i])) {
            return bad("search_region must have min <= max and a positive step".into());
        }
        if self.pipeline.trials == 0 {
            return bad("pipeline.trials must be positive".into());
        }
        let s = &self.sweep;
        if s.trials == 0 || s.distances.is_empty() || s.num_surfaces.is_empty() || s.num_rx.is_empty() {
            return bad("sweep axes and trials must be non-empty".into());
        }
        if s.distances.iter().any(|d| !positive(*d)) || s.num_rx.contains(&0) {
            return bad("sweep distances and receiver counts must be positive".into());
        }
        if let Some(l) = s.num_surfaces.iter().find(|l| **l > self.surfaces.len()) {
            return bad(format!("sweep asks for {l} surfaces but only {} are configured", self.surfaces.len()));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<FrequencyGrid> {
        self.waveform.grid()
    }

    pub fn gammas(&self) -> Vec<Complex64> {
        self.reflectivity.iter().map(|r| Complex64::from_polar(r.magnitude, r.phase)).collect()
    }

    /// Body center: straight ahead of the SV with LoS, off to the side without.
    pub fn tv_center(&self) -> Point3 {
        if self.has_los {
            Point3::new(0.0, 0.0, self.tv.distance)
        } else {
            Point3::new(self.tv.distance, 0.0, 0.0)
        }
    }

    /// Ground-truth scene for one trial; antenna jitter is drawn from `seed`.
    pub fn scene(&self, seed: u64) -> Result<Scene> {
        let center = self.tv_center();
        let tv: Vec<Point3> = shell_antennas(self.tv.size, self.tv.num_antennas, seed)
            .into_iter()
            .map(|p| p + center)
            .collect();
        let anchors = extreme_x(&tv);
        Scene::new(
            tv,
            anchors,
            sv_array(self.sv.aperture, self.sv.num_antennas),
            self.surfaces.clone(),
            self.clock_offset,
            self.has_los,
        )
    }

    /// Scene rule checks on the trial-0 scene.
    pub fn validate(&self) -> Result<ValidationReport> {
        self.check()?;
        let scene = self.scene(trial_seed(self.noise.seed, 0))?;
        Ok(validate_scene(&scene, &self.grid()?))
    }
}
