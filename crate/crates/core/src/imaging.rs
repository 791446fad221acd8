//! Fourier-domain 3D imaging of a (virtual) TV from aperture SFCW samples.
//!
//! All work happens in a local frame whose `z'` axis points from the SV
//! center toward the sync anchor, so the aperture is (nearly) the plane
//! `z' = 0` and the TV sits on the `z'` axis.
//!
//! Two routes compute the same image. [`reconstruct`] streams tone pairs
//! through 2D FFTs and folds the remapped spectrum straight into a box-sized
//! accumulator, which keeps memory at a few planes. The materialized route
//! ([`forward_2d_spectrum_padded`], [`remap_to_sphere`], [`inverse_3d_spectrum`])
//! builds every intermediate explicitly and exists for small problems and tests.

use std::f64::consts::PI;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::Matrix3;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::analysis::{azimuth_resolution, range_resolution};
use crate::channel::PathObservation;
use crate::geometry::{centroid, Point3, PointCloud, SPEED_OF_LIGHT};
use crate::waveform::FrequencyGrid;
use crate::{Error, Result};

const TWO_PI_OVER_C: f64 = 2.0 * PI / SPEED_OF_LIGHT;

/// Rigid frame: `local = rotation * (global - origin)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Frame {
    pub origin: Point3,
    /// Rows are the local axes expressed in global coordinates.
    pub rotation: Matrix3<f64>,
}

impl Frame {
    pub fn identity() -> Self {
        Frame {
            origin: Point3::zeros(),
            rotation: Matrix3::identity(),
        }
    }

    /// Frame at `origin` with `z'` toward `target`, `x'` horizontal and `y'` completing it.
    pub fn toward(origin: Point3, target: Point3) -> Self {
        let z = target - origin;
        if z.norm() == 0.0 {
            return Frame {
                origin,
                rotation: Matrix3::identity(),
            };
        }
        let z = z.normalize();
        let up = Point3::y();
        let mut x = up.cross(&z);
        if x.norm() < 1e-12 {
            x = Point3::x();
        }
        let x = x.normalize();
        let y = z.cross(&x);
        Frame {
            origin,
            rotation: Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]),
        }
    }

    pub fn to_local(&self, p: &Point3) -> Point3 {
        self.rotation * (p - self.origin)
    }

    pub fn to_global(&self, q: &Point3) -> Point3 {
        self.origin + self.rotation.transpose() * q
    }
}

/// Clock-compensated SFCW samples resampled onto a uniform grid of the plane `z' = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct ApertureSamples {
    pub frame: Frame,
    pub grid_x: Vec<f64>,
    pub grid_y: Vec<f64>,
    pub grid: FrequencyGrid,
    /// `[k][iy][ix]`.
    pub samples: Vec<Complex64>,
    /// `[iy][ix]`: true where the point lies inside the antenna coverage.
    pub support: Vec<bool>,
}

impl ApertureSamples {
    /// Wrap samples that already sit on a uniform grid. Every point counts as supported.
    pub fn from_uniform(
        frame: Frame,
        grid_x: Vec<f64>,
        grid_y: Vec<f64>,
        grid: FrequencyGrid,
        samples: Vec<Complex64>,
    ) -> Result<Self> {
        if grid_x.len() < 2 || grid_y.len() < 2 {
            return Err(Error::DegenerateAperture {
                rows: grid_y.len(),
                cols: grid_x.len(),
            });
        }
        if samples.len() != grid_x.len() * grid_y.len() * grid.num_tones {
            return Err(Error::InvalidConfig("sample count does not match the grid".into()));
        }
        let support = vec![true; grid_x.len() * grid_y.len()];
        Ok(ApertureSamples {
            frame,
            grid_x,
            grid_y,
            grid,
            samples,
            support,
        })
    }

    pub fn nx(&self) -> usize {
        self.grid_x.len()
    }

    pub fn ny(&self) -> usize {
        self.grid_y.len()
    }

    pub fn spacing(&self) -> (f64, f64) {
        (self.grid_x[1] - self.grid_x[0], self.grid_y[1] - self.grid_y[0])
    }

    pub fn get(&self, ix: usize, iy: usize, k: usize) -> Complex64 {
        self.samples[(k * self.ny() + iy) * self.nx() + ix]
    }

    pub fn plane(&self, k: usize) -> &[Complex64] {
        let n = self.nx() * self.ny();
        &self.samples[k * n..(k + 1) * n]
    }

    pub fn supported_area(&self) -> f64 {
        let (dx, dy) = self.spacing();
        self.support.iter().filter(|s| **s).count() as f64 * dx * dy
    }
}

struct Row {
    y: f64,
    /// Sorted by x: `(x, antenna index)`.
    points: Vec<(f64, usize)>,
}

fn split_rows(local: &[Point3]) -> Vec<Row> {
    let mut order: Vec<usize> = (0..local.len()).collect();
    order.sort_by(|&a, &b| local[a].y.total_cmp(&local[b].y).then(a.cmp(&b)));
    let gaps: Vec<f64> = order.windows(2).map(|w| local[w[1]].y - local[w[0]].y).collect();
    let widest = gaps.iter().copied().fold(0.0, f64::max);
    let mut rows: Vec<Vec<usize>> = vec![vec![order[0]]];
    for (i, g) in gaps.iter().enumerate() {
        if widest > 0.0 && *g > 0.5 * widest {
            rows.push(Vec::new());
        }
        rows.last_mut().unwrap().push(order[i + 1]);
    }
    rows.into_iter()
        .map(|idx| {
            let y = idx.iter().map(|&i| local[i].y).sum::<f64>() / idx.len() as f64;
            let mut points: Vec<(f64, usize)> = idx.iter().map(|&i| (local[i].x, i)).collect();
            points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            Row { y, points }
        })
        .collect()
}

/// Bracketing pair and weight of `v` on sorted `xs`, or `None` outside `[xs[0], xs[n-1]]`.
fn bracket(xs: &[f64], v: f64, eps: f64) -> Option<(usize, usize, f64)> {
    let n = xs.len();
    if n == 0 || v < xs[0] - eps || v > xs[n - 1] + eps {
        return None;
    }
    if n == 1 {
        return Some((0, 0, 0.0));
    }
    let hi = xs.partition_point(|x| *x <= v).clamp(1, n - 1);
    let lo = hi - 1;
    let span = xs[hi] - xs[lo];
    let t = if span > 0.0 { ((v - xs[lo]) / span).clamp(0.0, 1.0) } else { 0.0 };
    Some((lo, hi, t))
}

fn axis(min: f64, max: f64, step: f64) -> Vec<f64> {
    let n = ((max - min) / step + 1e-9).floor() as usize + 1;
    (0..n).map(|i| min + i as f64 * step).collect()
}

/// Project antennas into `frame`, undo their `z'` offset per tone and resample on a
/// `spacing` grid anchored at the hull minimum: linear along `x'` within each antenna
/// row, then linear along `y'` across the rows covering each column. Zero outside.
pub fn sample_aperture(
    obs: &PathObservation,
    antennas: &[Point3],
    grid: &FrequencyGrid,
    frame: &Frame,
    spacing: [f64; 2],
) -> Result<ApertureSamples> {
    let k_count = grid.num_tones;
    if obs.num_tones != k_count || obs.num_antennas() != antennas.len() {
        return Err(Error::InvalidConfig(format!(
            "observation holds {} antennas x {} tones, expected {} x {}",
            obs.num_antennas(),
            obs.num_tones,
            antennas.len(),
            k_count
        )));
    }
    if !(spacing[0] > 0.0 && spacing[1] > 0.0) {
        return Err(Error::InvalidConfig("aperture spacing must be positive".into()));
    }
    let local: Vec<Point3> = antennas.iter().map(|p| frame.to_local(p)).collect();
    let rows = split_rows(&local);
    let widest_row = rows.iter().map(|r| r.points.len()).max().unwrap_or(0);
    if rows.len() < 2 || widest_row < 2 {
        return Err(Error::DegenerateAperture {
            rows: rows.len(),
            cols: widest_row,
        });
    }

    let plane = |m: usize| -> Vec<Complex64> {
        let pz = local[m].z;
        obs.sfcw_row(m)
            .iter()
            .enumerate()
            .map(|(k, y)| y * Complex64::cis(-TWO_PI_OVER_C * grid.tone(k) * pz))
            .collect()
    };
    let compensated: Vec<Vec<Complex64>> = (0..antennas.len()).map(plane).collect();

    let (xmin, xmax) = local.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.x), b.max(p.x)));
    let (ymin, ymax) = local.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.y), b.max(p.y)));
    let grid_x = axis(xmin, xmax, spacing[0]);
    let grid_y = axis(ymin, ymax, spacing[1]);
    let (nx, ny) = (grid_x.len(), grid_y.len());
    if nx < 2 || ny < 2 {
        return Err(Error::DegenerateAperture { rows: ny, cols: nx });
    }
    let eps = 1e-9 * (xmax - xmin).max(ymax - ymin).max(1e-3);

    // Along x' within each row: row_vals[r][ix] is None outside the row.
    let row_vals: Vec<Vec<Option<Vec<Complex64>>>> = rows
        .iter()
        .map(|row| {
            let xs: Vec<f64> = row.points.iter().map(|p| p.0).collect();
            grid_x
                .iter()
                .map(|&x| {
                    bracket(&xs, x, eps).map(|(lo, hi, t)| {
                        let a = &compensated[row.points[lo].1];
                        let b = &compensated[row.points[hi].1];
                        a.iter().zip(b).map(|(a, b)| a * (1.0 - t) + b * t).collect()
                    })
                })
                .collect()
        })
        .collect();

    let mut samples = vec![Complex64::new(0.0, 0.0); nx * ny * k_count];
    let mut support = vec![false; nx * ny];
    for ix in 0..nx {
        let covering: Vec<usize> = (0..rows.len()).filter(|&r| row_vals[r][ix].is_some()).collect();
        let ys: Vec<f64> = covering.iter().map(|&r| rows[r].y).collect();
        for (iy, &y) in grid_y.iter().enumerate() {
            let Some((lo, hi, t)) = bracket(&ys, y, eps) else {
                continue;
            };
            if ys.len() == 1 && (y - ys[0]).abs() > eps {
                continue;
            }
            let a = row_vals[covering[lo]][ix].as_ref().unwrap();
            let b = row_vals[covering[hi]][ix].as_ref().unwrap();
            support[iy * nx + ix] = true;
            for k in 0..k_count {
                samples[(k * ny + iy) * nx + ix] = a[k] * (1.0 - t) + b[k] * t;
            }
        }
    }
    Ok(ApertureSamples {
        frame: *frame,
        grid_x,
        grid_y,
        grid: *grid,
        samples,
        support,
    })
}

/// Signed frequency index of FFT bin `i` of an `n`-point transform.
fn signed_bin(i: usize, n: usize) -> isize {
    if i < n.div_ceil(2) {
        i as isize
    } else {
        i as isize - n as isize
    }
}

/// `e^{j2πx}` with whole turns removed before the trig call.
fn turns(x: f64) -> Complex64 {
    Complex64::cis(std::f64::consts::TAU * (x - x.round()))
}

fn transpose(src: &[Complex64], rows: usize, cols: usize, dst: &mut [Complex64]) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

struct Fft2 {
    nx: usize,
    ny: usize,
    fx: Arc<dyn Fft<f64>>,
    fy: Arc<dyn Fft<f64>>,
    scratch: Vec<Complex64>,
}

impl Fft2 {
    fn new(planner: &mut FftPlanner<f64>, nx: usize, ny: usize, inverse: bool) -> Self {
        let (fx, fy) = if inverse {
            (planner.plan_fft_inverse(nx), planner.plan_fft_inverse(ny))
        } else {
            (planner.plan_fft_forward(nx), planner.plan_fft_forward(ny))
        };
        Fft2 {
            nx,
            ny,
            fx,
            fy,
            scratch: vec![Complex64::new(0.0, 0.0); nx * ny],
        }
    }

    /// In-place transform of a row-major `[iy][ix]` plane whose rows from
    /// `filled` on are zero.
    fn process(&mut self, buf: &mut [Complex64], filled: usize) {
        self.fx.process(&mut buf[..filled.min(self.ny) * self.nx]);
        transpose(buf, self.ny, self.nx, &mut self.scratch);
        self.fy.process(&mut self.scratch);
        transpose(&self.scratch, self.nx, self.ny, buf);
    }
}

/// Zero-padded 2D FFT of tone `k` in natural bin order, including the phase of
/// the grid origin so bin `(qx, qy)` equals `Σ s e^{-j2π(fx x + fy y)/c}`.
fn spectrum_plane(samples: &ApertureSamples, k: usize, fft: &mut Fft2, out: &mut [Complex64]) {
    let (npx, npy) = (fft.nx, fft.ny);
    let (nx, ny) = (samples.nx(), samples.ny());
    out.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
    let src = samples.plane(k);
    for iy in 0..ny {
        out[iy * npx..iy * npx + nx].copy_from_slice(&src[iy * nx..(iy + 1) * nx]);
    }
    fft.process(out, ny);
    let (dx, dy) = samples.spacing();
    let (x0, y0) = (samples.grid_x[0], samples.grid_y[0]);
    let dfx = SPEED_OF_LIGHT / (npx as f64 * dx);
    let dfy = SPEED_OF_LIGHT / (npy as f64 * dy);
    let px: Vec<Complex64> = (0..npx)
        .map(|i| Complex64::cis(-TWO_PI_OVER_C * signed_bin(i, npx) as f64 * dfx * x0))
        .collect();
    let py: Vec<Complex64> = (0..npy)
        .map(|i| Complex64::cis(-TWO_PI_OVER_C * signed_bin(i, npy) as f64 * dfy * y0))
        .collect();
    for iy in 0..npy {
        for ix in 0..npx {
            out[iy * npx + ix] *= px[ix] * py[iy];
        }
    }
}

/// Per-tone 2D spectrum with ascending spatial-frequency axes (Hz).
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum2 {
    pub fx: Vec<f64>,
    pub fy: Vec<f64>,
    pub grid: FrequencyGrid,
    /// `[k][iy][ix]` over the ascending axes.
    pub data: Vec<Complex64>,
}

impl Spectrum2 {
    pub fn get(&self, ix: usize, iy: usize, k: usize) -> Complex64 {
        self.data[(k * self.fy.len() + iy) * self.fx.len() + ix]
    }
}

fn ascending_axis(n: usize, df: f64) -> (Vec<f64>, Vec<usize>) {
    let start = -((n / 2) as isize);
    let freqs = (0..n).map(|i| (start + i as isize) as f64 * df).collect();
    let source = (0..n).map(|i| (start + i as isize).rem_euclid(n as isize) as usize).collect();
    (freqs, source)
}

/// 2D transform of every tone on the sample grid itself.
pub fn forward_2d_spectrum(samples: &ApertureSamples) -> Spectrum2 {
    forward_2d_spectrum_padded(samples, samples.nx(), samples.ny())
}

/// 2D transform of every tone after zero-padding to `npx x npy`; spans `±c/(2·spacing)`.
pub fn forward_2d_spectrum_padded(samples: &ApertureSamples, npx: usize, npy: usize) -> Spectrum2 {
    let npx = npx.max(samples.nx());
    let npy = npy.max(samples.ny());
    let (dx, dy) = samples.spacing();
    let (fx, sx) = ascending_axis(npx, SPEED_OF_LIGHT / (npx as f64 * dx));
    let (fy, sy) = ascending_axis(npy, SPEED_OF_LIGHT / (npy as f64 * dy));
    let mut planner = FftPlanner::new();
    let mut fft = Fft2::new(&mut planner, npx, npy, false);
    let mut plane = vec![Complex64::new(0.0, 0.0); npx * npy];
    let mut data = Vec::with_capacity(npx * npy * samples.grid.num_tones);
    for k in 0..samples.grid.num_tones {
        spectrum_plane(samples, k, &mut fft, &mut plane);
        for &iy in &sy {
            for &ix in &sx {
                data.push(plane[iy * npx + ix]);
            }
        }
    }
    Spectrum2 {
        fx,
        fy,
        grid: samples.grid,
        data,
    }
}

/// Undo [`forward_2d_spectrum_padded`]: samples `[k][iy][ix]` on the grid with origin
/// `(x0, y0)`, spacing `(dx, dy)` and shape `nx x ny`.
pub fn inverse_2d_spectrum(spec: &Spectrum2, x0: f64, y0: f64, nx: usize, ny: usize) -> Vec<Complex64> {
    let (npx, npy) = (spec.fx.len(), spec.fy.len());
    let dfx = spec.fx[1] - spec.fx[0];
    let dfy = spec.fy[1] - spec.fy[0];
    let (_, sx) = ascending_axis(npx, dfx);
    let (_, sy) = ascending_axis(npy, dfy);
    let mut planner = FftPlanner::new();
    let mut fft = Fft2::new(&mut planner, npx, npy, true);
    let mut plane = vec![Complex64::new(0.0, 0.0); npx * npy];
    let norm = 1.0 / (npx * npy) as f64;
    let mut out = Vec::with_capacity(nx * ny * spec.grid.num_tones);
    for k in 0..spec.grid.num_tones {
        for (iy, &ty) in sy.iter().enumerate() {
            for (ix, &tx) in sx.iter().enumerate() {
                let undo = Complex64::cis(TWO_PI_OVER_C * (spec.fx[ix] * x0 + spec.fy[iy] * y0));
                plane[ty * npx + tx] = spec.get(ix, iy, k) * undo;
            }
        }
        fft.process(&mut plane, npy);
        for iy in 0..ny {
            for ix in 0..nx {
                out.push(plane[iy * npx + ix] * norm);
            }
        }
    }
    out
}

/// Spectrum on a uniform `(fx, fy, fz)` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum3 {
    pub fx: Vec<f64>,
    pub fy: Vec<f64>,
    pub fz: Vec<f64>,
    /// `[iz][iy][ix]`.
    pub data: Vec<Complex64>,
}

impl Spectrum3 {
    pub fn get(&self, ix: usize, iy: usize, iz: usize) -> Complex64 {
        self.data[(iz * self.fy.len() + iy) * self.fx.len() + ix]
    }
}

/// Linear interpolation across tone shells. Values are multiplied by
/// `e^{+j2π fz z_ref / c}` first so a target near range `z_ref` varies slowly
/// between shells; the inverse must then use `z - z_ref`.
pub fn remap_to_sphere(spec: &Spectrum2, fz: &[f64], z_ref: f64) -> Spectrum3 {
    let g = spec.grid;
    let (nx, ny) = (spec.fx.len(), spec.fy.len());
    let mut data = vec![Complex64::new(0.0, 0.0); nx * ny * fz.len()];
    for (iz, &w) in fz.iter().enumerate() {
        for iy in 0..ny {
            for ix in 0..nx {
                let rho2 = spec.fx[ix].powi(2) + spec.fy[iy].powi(2);
                let f = (rho2 + w * w).sqrt();
                let pos = (f - g.f1) / g.delta;
                if !(0.0..=(g.num_tones - 1) as f64).contains(&pos) {
                    continue;
                }
                let k = (pos.floor() as usize).min(g.num_tones - 2);
                let (fk, fk1) = (g.tone(k), g.tone(k + 1));
                if fk * fk < rho2 {
                    continue;
                }
                let t = (f - fk) / g.delta;
                let shell = |kk: usize, f: f64| {
                    spec.get(ix, iy, kk) * Complex64::cis(TWO_PI_OVER_C * (f * f - rho2).sqrt() * z_ref)
                };
                data[(iz * ny + iy) * nx + ix] = shell(k, fk) * (1.0 - t) + shell(k + 1, fk1) * t;
            }
        }
    }
    Spectrum3 {
        fx: spec.fx.clone(),
        fy: spec.fy.clone(),
        fz: fz.to_vec(),
        data,
    }
}

/// Voxel grid in the local frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VoxelBox {
    pub origin: [f64; 3],
    pub spacing: [f64; 3],
    pub shape: [usize; 3],
}

impl VoxelBox {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn coord(&self, axis: usize, i: usize) -> f64 {
        self.origin[axis] + i as f64 * self.spacing[axis]
    }
}

/// Complex image over a voxel box.
#[derive(Clone, Debug, PartialEq)]
pub struct PowerSpectrum {
    pub frame: Frame,
    pub voxel_box: VoxelBox,
    /// `[iz][iy][ix]`.
    pub voxels: Vec<Complex64>,
}

impl PowerSpectrum {
    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        let [nx, ny, _] = self.voxel_box.shape;
        (iz * ny + iy) * nx + ix
    }

    pub fn unindex(&self, i: usize) -> [usize; 3] {
        let [nx, ny, _] = self.voxel_box.shape;
        [i % nx, (i / nx) % ny, i / (nx * ny)]
    }

    pub fn local_center(&self, ix: usize, iy: usize, iz: usize) -> Point3 {
        let b = &self.voxel_box;
        Point3::new(b.coord(0, ix), b.coord(1, iy), b.coord(2, iz))
    }

    pub fn center(&self, ix: usize, iy: usize, iz: usize) -> Point3 {
        self.frame.to_global(&self.local_center(ix, iy, iz))
    }

    pub fn max_abs(&self) -> f64 {
        self.voxels.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// Index of the largest magnitude, lowest index on ties.
    pub fn argmax(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, v) in self.voxels.iter().enumerate() {
            let a = v.norm();
            if best.is_none_or(|(_, b)| a > b) {
                best = Some((i, a));
            }
        }
        best.map(|(i, _)| i)
    }

    /// Magnitude at the voxel nearest to the global point `p`.
    pub fn value_near(&self, p: &Point3) -> Option<Complex64> {
        let q = self.frame.to_local(p);
        let b = &self.voxel_box;
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let i = ((q[a] - b.origin[a]) / b.spacing[a]).round();
            if i < 0.0 || i >= b.shape[a] as f64 {
                return None;
            }
            idx[a] = i as usize;
        }
        Some(self.voxels[self.index(idx[0], idx[1], idx[2])])
    }
}

/// Direct separable evaluation of `Σ S e^{j2π(fx x + fy y + fz (z - z_ref))/c}` on `vbox`.
pub fn inverse_3d_spectrum(spec: &Spectrum3, vbox: &VoxelBox, z_ref: f64, scale: f64) -> Vec<Complex64> {
    let (nfx, nfy, nfz) = (spec.fx.len(), spec.fy.len(), spec.fz.len());
    let [nx, ny, nz] = vbox.shape;
    let kern = |f: &[f64], axis: usize, n: usize, shift: f64| -> Vec<Complex64> {
        let mut out = Vec::with_capacity(n * f.len());
        for i in 0..n {
            let x = vbox.coord(axis, i) - shift;
            out.extend(f.iter().map(|fv| Complex64::cis(TWO_PI_OVER_C * fv * x)));
        }
        out
    };
    let kx = kern(&spec.fx, 0, nx, 0.0);
    let ky = kern(&spec.fy, 1, ny, 0.0);
    let kz = kern(&spec.fz, 2, nz, z_ref);
    // Sum over fx: t1[jz][jy][ix].
    let mut t1 = vec![Complex64::new(0.0, 0.0); nfz * nfy * nx];
    for jz in 0..nfz {
        for jy in 0..nfy {
            let row = &spec.data[(jz * nfy + jy) * nfx..(jz * nfy + jy + 1) * nfx];
            for ix in 0..nx {
                let k = &kx[ix * nfx..(ix + 1) * nfx];
                t1[(jz * nfy + jy) * nx + ix] = row.iter().zip(k).map(|(a, b)| a * b).sum();
            }
        }
    }
    // Sum over fy: t2[jz][iy][ix].
    let mut t2 = vec![Complex64::new(0.0, 0.0); nfz * ny * nx];
    for jz in 0..nfz {
        for iy in 0..ny {
            for ix in 0..nx {
                let mut acc = Complex64::new(0.0, 0.0);
                for jy in 0..nfy {
                    acc += t1[(jz * nfy + jy) * nx + ix] * ky[iy * nfy + jy];
                }
                t2[(jz * ny + iy) * nx + ix] = acc;
            }
        }
    }
    let mut out = vec![Complex64::new(0.0, 0.0); nz * ny * nx];
    for iz in 0..nz {
        for iy in 0..ny {
            for ix in 0..nx {
                let mut acc = Complex64::new(0.0, 0.0);
                for jz in 0..nfz {
                    acc += t2[(jz * ny + iy) * nx + ix] * kz[iz * nfz + jz];
                }
                out[(iz * ny + iy) * nx + ix] = acc * scale;
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImagingParams {
    /// Relative peak threshold in `(0, 1]`.
    pub nu: f64,
    /// Box size `(x', y', z')` in meters, centered on the anchor.
    #[serde(rename = "box_extent_m")]
    pub box_extent: [f64; 3],
    /// Voxel pitch; defaults to half the azimuth and range resolutions.
    #[serde(rename = "voxel_pitch_m", default)]
    pub voxel_pitch: Option<[f64; 3]>,
    /// Aperture resampling bound; defaults to what the box's angular extent needs.
    #[serde(rename = "aperture_spacing_m", default)]
    pub aperture_spacing: Option<f64>,
}

impl Default for ImagingParams {
    fn default() -> Self {
        ImagingParams {
            nu: 0.5,
            box_extent: [6.0, 4.0, 6.0],
            voxel_pitch: None,
            aperture_spacing: None,
        }
    }
}

impl ImagingParams {
    pub fn check(&self) -> Result<()> {
        if !(self.nu > 0.0 && self.nu <= 1.0) {
            return Err(Error::InvalidConfig(format!("nu must lie in (0, 1], got {}", self.nu)));
        }
        let positive = |v: &[f64]| v.iter().all(|x| x.is_finite() && *x > 0.0);
        if !positive(&self.box_extent) {
            return Err(Error::InvalidConfig("box extent must be positive".into()));
        }
        if self.voxel_pitch.is_some_and(|p| !positive(&p)) {
            return Err(Error::InvalidConfig("voxel pitch must be positive".into()));
        }
        if self.aperture_spacing.is_some_and(|d| !(d.is_finite() && d > 0.0)) {
            return Err(Error::InvalidConfig("aperture spacing must be positive".into()));
        }
        Ok(())
    }
}

fn next_smooth(n: usize) -> usize {
    let mut m = n.max(1);
    loop {
        let mut r = m;
        for p in [2, 3, 5, 7] {
            while r % p == 0 {
                r /= p;
            }
        }
        if r == 1 {
            return m;
        }
        m += 1;
    }
}

/// Sizes and scalings shared by both reconstruction routes.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionPlan {
    pub frame: Frame,
    pub z_ref: f64,
    pub voxel_box: VoxelBox,
    /// FFT sizes across the aperture.
    pub fft_shape: [usize; 2],
    pub aperture_spacing: [f64; 2],
    pub dfz: f64,
    /// Local aperture extent along `x'` and `y'`.
    pub aperture_extent: [f64; 2],
}

impl ReconstructionPlan {
    pub fn new(antennas: &[Point3], grid: &FrequencyGrid, center: &Point3, params: &ImagingParams) -> Result<Self> {
        params.check()?;
        let origin = centroid(antennas).ok_or(Error::DegenerateAperture { rows: 0, cols: 0 })?;
        let frame = Frame::toward(origin, *center);
        let z_ref = (center - origin).norm();
        if z_ref <= 0.0 {
            return Err(Error::InvalidConfig("imaging center coincides with the SV".into()));
        }
        let local: Vec<Point3> = antennas.iter().map(|p| frame.to_local(p)).collect();
        let extent = |a: usize| {
            let (lo, hi) = local
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), p| (l.min(p[a]), h.max(p[a])));
            hi - lo
        };
        let aperture = [extent(0), extent(1)];
        let d = aperture[0].min(aperture[1]);
        if !(d > 0.0) {
            return Err(Error::DegenerateAperture { rows: 1, cols: antennas.len() });
        }
        let pitch = params.voxel_pitch.unwrap_or_else(|| {
            let dy = azimuth_resolution(z_ref, d, grid.center());
            let dz = range_resolution(grid);
            [dy / 2.0, dy / 2.0, dz / 2.0]
        });
        let w = params.box_extent;
        let n_lat = |a: usize| {
            let by_box = (w[a] / pitch[a]).ceil() as usize;
            let by_aperture = (aperture[a] / pitch[a]).ceil() as usize + 1;
            by_box.max(by_aperture).max(1)
        };
        let shape = [n_lat(0), n_lat(1), ((w[2] / pitch[2]).ceil() as usize).max(1)];
        let period = [shape[0] as f64 * pitch[0], shape[1] as f64 * pitch[1], shape[2] as f64 * pitch[2]];
        let box_origin = [
            -0.5 * (shape[0] - 1) as f64 * pitch[0],
            -0.5 * (shape[1] - 1) as f64 * pitch[1],
            z_ref - 0.5 * (shape[2] - 1) as f64 * pitch[2],
        ];
        let far = Point3::new(
            box_origin[0].abs().max(period[0] / 2.0),
            box_origin[1].abs().max(period[1] / 2.0),
            box_origin[2] + (shape[2] - 1) as f64 * pitch[2],
        )
        .norm();
        let depth = far - box_origin[2].max(0.0);
        let limit = SPEED_OF_LIGHT / grid.delta;
        if depth > limit {
            return Err(Error::BoxOutOfRange { reach: depth, limit });
        }
        let lambda_min = SPEED_OF_LIGHT / grid.f_max();
        let near = (z_ref - 0.5 * period[2]).max(0.1 * z_ref);
        let bound = |a: usize| {
            params.aperture_spacing.unwrap_or_else(|| {
                let s = 0.5 * period[a] + 0.5 * aperture[a];
                let sin = s / (s * s + near * near).sqrt();
                (lambda_min / 4.0).max(lambda_min / (2.0 * sin))
            })
        };
        let npx = next_smooth((period[0] / bound(0)).ceil() as usize);
        let npy = next_smooth((period[1] / bound(1)).ceil() as usize);
        Ok(ReconstructionPlan {
            frame,
            z_ref,
            voxel_box: VoxelBox {
                origin: box_origin,
                spacing: pitch,
                shape,
            },
            fft_shape: [npx, npy],
            aperture_spacing: [period[0] / npx as f64, period[1] / npy as f64],
            dfz: SPEED_OF_LIGHT / period[2],
            aperture_extent: aperture,
        })
    }

    /// Scale that brings the peak of one noiseless antenna to `N_r * K`, the
    /// value of the matched-filter back-projection.
    pub fn normalization(&self, num_antennas: usize, supported_area: f64, grid: &FrequencyGrid) -> f64 {
        let k = grid.num_tones as f64;
        let lambda_c = SPEED_OF_LIGHT / grid.center();
        let [npx, npy] = self.fft_shape;
        num_antennas as f64 / supported_area * (k / (k - 1.0)) * lambda_c * self.z_ref * self.dfz
            / ((npx * npy) as f64 * grid.delta)
    }

    /// `fz` bins `m * dfz` that can receive energy.
    pub fn fz_bins(&self, grid: &FrequencyGrid) -> std::ops::RangeInclusive<i64> {
        let lo = 0;
        let hi = (grid.f_max() / self.dfz).ceil() as i64;
        lo..=hi
    }
}

fn fft_axis(data: &mut [Complex64], shape: [usize; 3], axis: usize, fft: &Arc<dyn Fft<f64>>) {
    let [nx, ny, nz] = shape;
    let stride = [1, nx, nx * ny][axis];
    let len = shape[axis];
    if len == 1 {
        return;
    }
    let mut line = vec![Complex64::new(0.0, 0.0); len];
    let starts: Vec<usize> = match axis {
        0 => (0..ny * nz).map(|r| r * nx).collect(),
        1 => (0..nz).flat_map(|iz| (0..nx).map(move |ix| iz * nx * ny + ix)).collect(),
        _ => (0..nx * ny).collect(),
    };
    for s in starts {
        for (i, v) in line.iter_mut().enumerate() {
            *v = data[s + i * stride];
        }
        fft.process(&mut line);
        for (i, v) in line.iter().enumerate() {
            data[s + i * stride] = *v;
        }
    }
}

/// Image one path: resample the aperture, stream tone pairs through 2D FFTs,
/// fold the remapped spectrum onto the box and invert with a box-sized 3D FFT.
pub fn reconstruct(
    obs: &PathObservation,
    antennas: &[Point3],
    grid: &FrequencyGrid,
    center: &Point3,
    params: &ImagingParams,
) -> Result<PowerSpectrum> {
    let plan = ReconstructionPlan::new(antennas, grid, center, params)?;
    let started = std::time::Instant::now();
    let samples = sample_aperture(obs, antennas, grid, &plan.frame, plan.aperture_spacing)?;
    log::debug!(
        "aperture {}x{} into FFT {:?}, box {:?}: resampling took {:?}",
        samples.nx(),
        samples.ny(),
        plan.fft_shape,
        plan.voxel_box.shape,
        started.elapsed()
    );
    reconstruct_with_plan(&plan, &samples, antennas.len())
}

pub fn reconstruct_with_plan(plan: &ReconstructionPlan, samples: &ApertureSamples, num_antennas: usize) -> Result<PowerSpectrum> {
    let grid = samples.grid;
    let [npx, npy] = plan.fft_shape;
    if samples.nx() > npx || samples.ny() > npy {
        return Err(Error::InvalidConfig("aperture does not fit the FFT period".into()));
    }
    let vbox = plan.voxel_box;
    let [nbx, nby, nbz] = vbox.shape;
    let (dx, dy) = samples.spacing();
    let dfx = SPEED_OF_LIGHT / (npx as f64 * dx);
    let dfy = SPEED_OF_LIGHT / (npy as f64 * dy);
    let dfz = plan.dfz;

    let pre = |q: isize, df: f64, x0: f64| Complex64::cis(TWO_PI_OVER_C * q as f64 * df * x0);
    let qx: Vec<isize> = (0..npx).map(|i| signed_bin(i, npx)).collect();
    let qy: Vec<isize> = (0..npy).map(|i| signed_bin(i, npy)).collect();
    let px: Vec<Complex64> = qx.iter().map(|&q| pre(q, dfx, vbox.origin[0])).collect();
    let py: Vec<Complex64> = qy.iter().map(|&q| pre(q, dfy, vbox.origin[1])).collect();
    let rx: Vec<usize> = qx.iter().map(|&q| q.rem_euclid(nbx as isize) as usize).collect();
    let ry: Vec<usize> = qy.iter().map(|&q| q.rem_euclid(nby as isize) as usize).collect();
    let z_shift = vbox.origin[2] - plan.z_ref;

    let mut planner = FftPlanner::new();
    let mut fft = Fft2::new(&mut planner, npx, npy, false);
    let mut lower = vec![Complex64::new(0.0, 0.0); npx * npy];
    let mut upper = vec![Complex64::new(0.0, 0.0); npx * npy];
    let mut acc = vec![Complex64::new(0.0, 0.0); vbox.len()];
    let last = grid.num_tones - 2;

    // Each lateral cell walks up its fz bins: `next_m` is the next bin to fill and
    // `next_f` the tone frequency at which that bin is reached.
    let reach = |m: i64, r: f64| {
        let fz = m as f64 * dfz;
        (fz * fz + r).sqrt()
    };
    let cells = npx * npy;
    let rho2: Vec<f64> = (0..cells)
        .map(|i| {
            let fx = qx[i % npx] as f64 * dfx;
            let fy = qy[i / npx] as f64 * dfy;
            fx * fx + fy * fy
        })
        .collect();
    let mut next_m = vec![0i64; cells];
    let mut next_f = vec![f64::INFINITY; cells];
    for i in 0..cells {
        let r = rho2[i];
        if let Some(k0) = (0..=last).find(|&k| grid.tone(k).powi(2) >= r) {
            let f0 = grid.tone(k0);
            next_m[i] = ((f0 * f0 - r).sqrt() / dfz).ceil() as i64;
            next_f[i] = reach(next_m[i], r);
        }
    }
    let m_max = (grid.f_max() / dfz).ceil() as usize + 1;
    let z_phase: Vec<Complex64> = (0..=m_max)
        .map(|m| Complex64::cis(TWO_PI_OVER_C * m as f64 * dfz * z_shift))
        .collect();
    let plane = nbx * nby;
    let z_over_c = plan.z_ref / SPEED_OF_LIGHT;

    spectrum_plane(samples, 0, &mut fft, &mut lower);
    for k in 0..=last {
        spectrum_plane(samples, k + 1, &mut fft, &mut upper);
        let (fk, fk1) = (grid.tone(k), grid.tone(k + 1));
        let beyond = |f: f64| f > fk1 || (f == fk1 && k != last);
        for i in 0..cells {
            let mut f = next_f[i];
            if beyond(f) {
                continue;
            }
            let r = rho2[i];
            let (ix, iy) = (i % npx, i / npx);
            let lo = (fk * fk - r).max(0.0).sqrt();
            let hi = (fk1 * fk1 - r).sqrt();
            let a = lower[i] * turns(lo * z_over_c);
            let b = upper[i] * turns(hi * z_over_c);
            let lateral = px[ix] * py[iy];
            let base = ry[iy] * nbx + rx[ix];
            let mut m = next_m[i];
            while !beyond(f) {
                let t = (f - fk) / grid.delta;
                let v = a * (1.0 - t) + b * t;
                let rz = m.rem_euclid(nbz as i64) as usize;
                acc[rz * plane + base] += v * lateral * z_phase[m as usize];
                m += 1;
                f = reach(m, r);
            }
            next_m[i] = m;
            next_f[i] = f;
        }
        std::mem::swap(&mut lower, &mut upper);
    }

    for (axis, n) in vbox.shape.iter().enumerate() {
        let f = planner.plan_fft_inverse(*n);
        fft_axis(&mut acc, vbox.shape, axis, &f);
    }
    let eta = plan.normalization(num_antennas, samples.supported_area(), &grid);
    acc.iter_mut().for_each(|v| *v *= eta);
    Ok(PowerSpectrum {
        frame: plan.frame,
        voxel_box: vbox,
        voxels: acc,
    })
}

/// Same image as [`reconstruct_with_plan`] through explicit intermediates. Memory
/// grows with the full spectral grid, so keep it to small problems.
pub fn reconstruct_materialized(plan: &ReconstructionPlan, samples: &ApertureSamples, num_antennas: usize) -> PowerSpectrum {
    let [npx, npy] = plan.fft_shape;
    let spec2 = forward_2d_spectrum_padded(samples, npx, npy);
    let bins = plan.fz_bins(&samples.grid);
    let fz: Vec<f64> = bins.map(|m| m as f64 * plan.dfz).collect();
    let spec3 = remap_to_sphere(&spec2, &fz, plan.z_ref);
    let eta = plan.normalization(num_antennas, samples.supported_area(), &samples.grid);
    PowerSpectrum {
        frame: plan.frame,
        voxel_box: plan.voxel_box,
        voxels: inverse_3d_spectrum(&spec3, &plan.voxel_box, plan.z_ref, eta),
    }
}

/// Matched-filter back-projection `Σ_{m,k} y_mk e^{+j2π f_k |x - p_m| / c}`.
pub fn back_projection(obs: &PathObservation, antennas: &[Point3], grid: &FrequencyGrid, x: &Point3) -> Complex64 {
    let mut acc = Complex64::new(0.0, 0.0);
    for (m, p) in antennas.iter().enumerate() {
        let d = (x - p).norm();
        for (k, y) in obs.sfcw_row(m).iter().enumerate() {
            acc += y * Complex64::cis(TWO_PI_OVER_C * grid.tone(k) * d);
        }
    }
    acc
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Peak {
    pub index: [usize; 3],
    pub magnitude: f64,
    pub position: Point3,
}

/// Voxels with `|Φ| >= nu * max|Φ|` that are no smaller than any of their 26 neighbours,
/// by descending magnitude then ascending linear index.
pub fn find_peaks(spec: &PowerSpectrum, nu: f64) -> Result<Vec<Peak>> {
    if !(nu > 0.0 && nu <= 1.0) {
        return Err(Error::InvalidConfig(format!("nu must lie in (0, 1], got {nu}")));
    }
    let mags: Vec<f64> = spec.voxels.iter().map(|v| v.norm()).collect();
    let max = mags.iter().copied().fold(0.0, f64::max);
    if !(max > 0.0) {
        return Err(Error::EmptySpectrum);
    }
    let [nx, ny, nz] = spec.voxel_box.shape;
    let threshold = nu * max;
    let mut peaks = Vec::new();
    for (i, &m) in mags.iter().enumerate() {
        if m < threshold {
            continue;
        }
        let [ix, iy, iz] = spec.unindex(i);
        let mut is_max = true;
        'n: for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 && dz == 0 {
                        continue;
                    }
                    let (jx, jy, jz) = (ix as i64 + dx, iy as i64 + dy, iz as i64 + dz);
                    if jx < 0 || jy < 0 || jz < 0 || jx >= nx as i64 || jy >= ny as i64 || jz >= nz as i64 {
                        continue;
                    }
                    if mags[spec.index(jx as usize, jy as usize, jz as usize)] > m {
                        is_max = false;
                        break 'n;
                    }
                }
            }
        }
        if is_max {
            peaks.push(Peak {
                index: [ix, iy, iz],
                magnitude: m,
                position: spec.center(ix, iy, iz),
            });
        }
    }
    peaks.sort_by(|a, b| {
        b.magnitude
            .total_cmp(&a.magnitude)
            .then_with(|| spec.index(a.index[0], a.index[1], a.index[2]).cmp(&spec.index(b.index[0], b.index[1], b.index[2])))
    });
    Ok(peaks)
}

pub fn detect_peaks(spec: &PowerSpectrum, nu: f64) -> Result<PointCloud> {
    Ok(find_peaks(spec, nu)?.into_iter().map(|p| p.position).collect())
}

/// Reconstruct one path around `center` and return the image and its peaks.
pub fn image_path(
    obs: &PathObservation,
    antennas: &[Point3],
    grid: &FrequencyGrid,
    center: &Point3,
    params: &ImagingParams,
) -> Result<(PowerSpectrum, PointCloud)> {
    let spec = reconstruct(obs, antennas, grid, center, params)?;
    let cloud = detect_peaks(&spec, params.nu)?;
    Ok((spec, cloud))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlicePlane {
    Xy,
    Xz,
    Yz,
}

impl FromStr for SlicePlane {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "xy" => Ok(SlicePlane::Xy),
            "xz" => Ok(SlicePlane::Xz),
            "yz" => Ok(SlicePlane::Yz),
            other => Err(Error::Parse(format!("unknown slice plane {other:?}, expected xy, xz or yz"))),
        }
    }
}

/// Dump the slice through the strongest voxel as CSV `x,y,z,abs` in global coordinates.
pub fn write_slice_csv<W: Write>(spec: &PowerSpectrum, plane: SlicePlane, writer: W) -> Result<()> {
    let peak = spec.argmax().ok_or(Error::EmptySpectrum)?;
    let [px, py, pz] = spec.unindex(peak);
    let [nx, ny, nz] = spec.voxel_box.shape;
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["x", "y", "z", "abs"])?;
    let mut emit = |ix: usize, iy: usize, iz: usize| -> Result<()> {
        let c = spec.center(ix, iy, iz);
        let a = spec.voxels[spec.index(ix, iy, iz)].norm();
        w.write_record([c.x, c.y, c.z, a].map(|v| v.to_string()))?;
        Ok(())
    };
    match plane {
        SlicePlane::Xy => (0..ny).try_for_each(|iy| (0..nx).try_for_each(|ix| emit(ix, iy, pz)))?,
        SlicePlane::Xz => (0..nz).try_for_each(|iz| (0..nx).try_for_each(|ix| emit(ix, py, iz)))?,
        SlicePlane::Yz => (0..nz).try_for_each(|iz| (0..ny).try_for_each(|iy| emit(px, iy, iz)))?,
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::synthesize_sfcw;
    use approx::assert_abs_diff_eq;

    fn uniform_aperture(n: usize, pitch: f64) -> Vec<Point3> {
        let half = 0.5 * (n - 1) as f64 * pitch;
        let mut out = Vec::with_capacity(n * n);
        for r in 0..n {
            for c in 0..n {
                let c = if r % 2 == 1 { n - 1 - c } else { c };
                out.push(Point3::new(c as f64 * pitch - half, r as f64 * pitch - half, 0.0));
            }
        }
        out
    }

    fn observation(emitters: &[Point3], antennas: &[Point3], grid: &FrequencyGrid) -> PathObservation {
        PathObservation {
            path_id: 0,
            gamma: Complex64::new(1.0, 0.0),
            aoa_group: 0,
            sig_a: vec![],
            sig_b: vec![],
            sfcw: synthesize_sfcw(emitters, antennas, grid),
            num_tones: grid.num_tones,
        }
    }

    #[test]
    fn frame_is_orthonormal_and_points_at_target() {
        let f = Frame::toward(Point3::zeros(), Point3::new(3.0, 1.0, 7.0));
        let r = f.rotation;
        assert_abs_diff_eq!((r * r.transpose() - Matrix3::identity()).norm(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.determinant(), 1.0, epsilon = 1e-12);
        let t = f.to_local(&Point3::new(3.0, 1.0, 7.0));
        assert_abs_diff_eq!(t.x, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(t.y, 0.0, epsilon = 1e-12);
        let straight = Frame::toward(Point3::zeros(), Point3::new(0.0, 0.0, 5.0));
        assert_abs_diff_eq!((straight.rotation - Matrix3::identity()).norm(), 0.0, epsilon = 1e-15);
        let p = Point3::new(0.3, -2.0, 1.0);
        assert_abs_diff_eq!((f.to_global(&f.to_local(&p)) - p).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn uniform_grid_resamples_to_itself() {
        let grid = FrequencyGrid::new(57e9, 4, 11.72e6).unwrap();
        let antennas = uniform_aperture(5, 0.01);
        let obs = observation(&[Point3::new(0.1, 0.0, 3.0)], &antennas, &grid);
        let s = sample_aperture(&obs, &antennas, &grid, &Frame::identity(), [0.01, 0.01]).unwrap();
        assert_eq!((s.nx(), s.ny()), (5, 5));
        for (m, p) in antennas.iter().enumerate() {
            let ix = ((p.x - s.grid_x[0]) / 0.01).round() as usize;
            let iy = ((p.y - s.grid_y[0]) / 0.01).round() as usize;
            for k in 0..4 {
                assert_abs_diff_eq!((s.get(ix, iy, k) - obs.sfcw_row(m)[k]).norm(), 0.0, epsilon = 1e-12);
            }
        }
        assert!(s.support.iter().all(|v| *v));
    }

    #[test]
    fn midpoint_is_the_mean() {
        let grid = FrequencyGrid::new(57e9, 2, 11.72e6).unwrap();
        let antennas = uniform_aperture(3, 0.02);
        let obs = observation(&[Point3::new(0.0, 0.2, 2.0)], &antennas, &grid);
        let s = sample_aperture(&obs, &antennas, &grid, &Frame::identity(), [0.01, 0.02]).unwrap();
        assert_eq!(s.nx(), 5);
        let want = 0.5 * (obs.sfcw_row(0)[1] + obs.sfcw_row(1)[1]);
        assert_abs_diff_eq!((s.get(1, 0, 1) - want).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn height_offset_is_compensated() {
        let grid = FrequencyGrid::new(57e9, 3, 11.72e6).unwrap();
        let flat = uniform_aperture(3, 0.01);
        let raised: Vec<Point3> = flat.iter().map(|p| p + Point3::new(0.0, 0.0, 0.004)).collect();
        // A plane wave from +z sees the raised array 4 mm earlier.
        let obs = PathObservation {
            sfcw: raised
                .iter()
                .flat_map(|p| (0..3).map(move |k| Complex64::cis(-TWO_PI_OVER_C * grid.tone(k) * (10.0 - p.z))))
                .collect(),
            ..observation(&[Point3::zeros()], &flat, &grid)
        };
        let s = sample_aperture(&obs, &raised, &grid, &Frame::identity(), [0.01, 0.01]).unwrap();
        for k in 0..3 {
            let want = Complex64::cis(-TWO_PI_OVER_C * grid.tone(k) * 10.0);
            assert_abs_diff_eq!((s.get(1, 1, k) - want).norm(), 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn single_row_is_degenerate() {
        let grid = FrequencyGrid::new(57e9, 2, 11.72e6).unwrap();
        let antennas: Vec<Point3> = (0..5).map(|i| Point3::new(0.01 * i as f64, 0.0, 0.0)).collect();
        let obs = observation(&[Point3::new(0.0, 0.0, 2.0)], &antennas, &grid);
        assert!(matches!(
            sample_aperture(&obs, &antennas, &grid, &Frame::identity(), [0.01, 0.01]),
            Err(Error::DegenerateAperture { .. })
        ));
    }

    fn samples_from(values: Vec<Complex64>, n: usize, grid: FrequencyGrid, x0: f64) -> ApertureSamples {
        let axis: Vec<f64> = (0..n).map(|i| x0 + 0.002 * i as f64).collect();
        ApertureSamples::from_uniform(Frame::identity(), axis.clone(), axis, grid, values).unwrap()
    }

    #[test]
    fn dc_and_impulse_spectra() {
        let grid = FrequencyGrid::new(57e9, 2, 11.72e6).unwrap();
        let ones = samples_from(vec![Complex64::new(1.0, 0.0); 8 * 8 * 2], 8, grid, 0.0);
        let s = forward_2d_spectrum(&ones);
        let dc = (s.fx.iter().position(|f| *f == 0.0).unwrap(), s.fy.iter().position(|f| *f == 0.0).unwrap());
        for iy in 0..8 {
            for ix in 0..8 {
                let want = if (ix, iy) == dc { 64.0 } else { 0.0 };
                assert_abs_diff_eq!(s.get(ix, iy, 1).norm(), want, epsilon = 1e-9);
            }
        }
        let mut imp = vec![Complex64::new(0.0, 0.0); 8 * 8 * 2];
        imp[0] = Complex64::new(1.0, 0.0);
        // Origin of the grid at x = y = 0.
        let s = forward_2d_spectrum(&samples_from(imp, 8, grid, 0.0));
        for v in &s.data[..64] {
            assert_abs_diff_eq!(v.norm(), 1.0, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(*s.fx.last().unwrap() + (s.fx[1] - s.fx[0]), SPEED_OF_LIGHT / (2.0 * 0.002), epsilon = 1.0);
    }

    #[test]
    fn two_d_round_trip() {
        let grid = FrequencyGrid::new(57e9, 3, 11.72e6).unwrap();
        let antennas = uniform_aperture(9, 0.002);
        let obs = observation(&[Point3::new(0.01, -0.02, 0.5)], &antennas, &grid);
        let s = sample_aperture(&obs, &antennas, &grid, &Frame::identity(), [0.002, 0.002]).unwrap();
        let spec = forward_2d_spectrum_padded(&s, 16, 12);
        let back = inverse_2d_spectrum(&spec, s.grid_x[0], s.grid_y[0], s.nx(), s.ny());
        let err = back.iter().zip(&s.samples).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt();
        let norm = s.samples.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        assert!(err / norm < 1e-10);
        // A point target gives a constant-magnitude phase ramp when it is a single sample.
        let mut one = vec![Complex64::new(0.0, 0.0); 81 * 3];
        one[4 * 9 + 4] = Complex64::cis(0.3);
        let spec = forward_2d_spectrum(&samples_from(one, 9, grid, -0.008));
        let m0 = spec.data[0].norm();
        assert!(spec.data[..81].iter().all(|v| (v.norm() - m0).abs() < 1e-12));
    }

    #[test]
    fn remap_shell_rules() {
        let grid = FrequencyGrid::new(57e9, 3, 1e9).unwrap();
        let data: Vec<Complex64> = (0..3).map(|k| Complex64::new(k as f64 + 1.0, -(k as f64))).collect();
        let spec = Spectrum2 {
            fx: vec![0.0],
            fy: vec![0.0],
            grid,
            data,
        };
        let fz = [grid.tone(1), 0.5 * (grid.tone(1) + grid.tone(2)), grid.f1 - 1e6, grid.f_max() + 1e6, grid.f_max()];
        let out = remap_to_sphere(&spec, &fz, 0.0);
        assert_eq!(out.get(0, 0, 0), spec.data[1]);
        assert_abs_diff_eq!((out.get(0, 0, 1) - 0.5 * (spec.data[1] + spec.data[2])).norm(), 0.0, epsilon = 1e-12);
        assert_eq!(out.get(0, 0, 2), Complex64::new(0.0, 0.0));
        assert_eq!(out.get(0, 0, 3), Complex64::new(0.0, 0.0));
        assert_abs_diff_eq!((out.get(0, 0, 4) - spec.data[2]).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_spectrum_gives_zero_image() {
        let spec = Spectrum3 {
            fx: vec![-1e9, 0.0, 1e9],
            fy: vec![0.0],
            fz: vec![57e9, 58e9],
            data: vec![Complex64::new(0.0, 0.0); 6],
        };
        let vbox = VoxelBox {
            origin: [-0.1, 0.0, 7.9],
            spacing: [0.05, 0.05, 0.05],
            shape: [5, 1, 5],
        };
        assert!(inverse_3d_spectrum(&spec, &vbox, 8.0, 1.0).iter().all(|v| v.norm() == 0.0));
    }

    fn small_scene() -> (FrequencyGrid, Vec<Point3>, ImagingParams) {
        let grid = FrequencyGrid::new(57e9, 32, 50e6).unwrap();
        let antennas = uniform_aperture(33, 0.0025);
        let params = ImagingParams {
            nu: 0.5,
            box_extent: [0.4, 0.4, 0.6],
            voxel_pitch: None,
            aperture_spacing: None,
        };
        (grid, antennas, params)
    }

    #[test]
    fn streaming_matches_materialized() {
        let (grid, antennas, params) = small_scene();
        let target = [Point3::new(0.02, -0.03, 2.0), Point3::new(-0.05, 0.04, 2.1)];
        let obs = observation(&target, &antennas, &grid);
        let center = Point3::new(0.0, 0.0, 2.0);
        let plan = ReconstructionPlan::new(&antennas, &grid, &center, &params).unwrap();
        let samples = sample_aperture(&obs, &antennas, &grid, &plan.frame, plan.aperture_spacing).unwrap();
        let fast = reconstruct_with_plan(&plan, &samples, antennas.len()).unwrap();
        let slow = reconstruct_materialized(&plan, &samples, antennas.len());
        let scale = slow.max_abs();
        assert!(scale > 0.0);
        let worst = fast.voxels.iter().zip(&slow.voxels).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(worst / scale < 1e-9, "relative mismatch {}", worst / scale);
    }

    #[test]
    fn single_antenna_peak_and_energy() {
        let (grid, antennas, params) = small_scene();
        let truth = Point3::new(0.03, -0.02, 2.05);
        let obs = observation(&[truth], &antennas, &grid);
        let spec = reconstruct(&obs, &antennas, &grid, &Point3::new(0.0, 0.0, 2.0), &params).unwrap();
        let peaks = find_peaks(&spec, 0.5).unwrap();
        let pitch = spec.voxel_box.spacing;
        let d = spec.frame.to_local(&peaks[0].position) - spec.frame.to_local(&truth);
        for a in 0..3 {
            assert!(d[a].abs() <= pitch[a], "axis {a}: {} vs pitch {}", d[a], pitch[a]);
        }
        let bp = back_projection(&obs, &antennas, &grid, &truth).norm();
        let ratio = spec.max_abs() / bp;
        assert!(ratio >= 0.9, "energy ratio {ratio}");
        assert!(ratio <= 1.3, "energy ratio {ratio}");
    }

    #[test]
    fn linear_in_the_observation() {
        let (grid, antennas, params) = small_scene();
        let center = Point3::new(0.0, 0.0, 2.0);
        let a = [Point3::new(0.02, 0.0, 2.0)];
        let b = [Point3::new(-0.04, 0.03, 1.9)];
        let both = [a[0], b[0]];
        let img = |e: &[Point3]| reconstruct(&observation(e, &antennas, &grid), &antennas, &grid, &center, &params).unwrap();
        let (sa, sb, sab) = (img(&a), img(&b), img(&both));
        let scale = sab.max_abs();
        for i in 0..sab.voxels.len() {
            assert!((sab.voxels[i] - sa.voxels[i] - sb.voxels[i]).norm() <= 1e-10 * scale);
        }
    }

    #[test]
    fn peak_rules() {
        let vbox = VoxelBox {
            origin: [0.0; 3],
            spacing: [1.0; 3],
            shape: [4, 4, 4],
        };
        let mut spec = PowerSpectrum {
            frame: Frame::identity(),
            voxel_box: vbox,
            voxels: vec![Complex64::new(0.0, 0.0); 64],
        };
        assert!(matches!(detect_peaks(&spec, 0.5), Err(Error::EmptySpectrum)));
        let i = spec.index(1, 2, 3);
        spec.voxels[i] = Complex64::new(1.0, 0.0);
        assert_eq!(detect_peaks(&spec, 0.5).unwrap(), vec![Point3::new(1.0, 2.0, 3.0)]);
        let j = spec.index(3, 0, 0);
        spec.voxels[j] = Complex64::new(0.0, 0.7);
        let k = spec.index(0, 0, 0);
        spec.voxels[k] = Complex64::new(1.0, 0.0);
        assert_eq!(detect_peaks(&spec, 0.5).unwrap().len(), 3);
        let top = detect_peaks(&spec, 1.0).unwrap();
        assert_eq!(top, vec![Point3::new(0.0, 0.0, 0.0), Point3::new(1.0, 2.0, 3.0)]);
        assert!(detect_peaks(&spec, 0.0).is_err());
    }

    #[test]
    fn slice_csv_header() {
        let vbox = VoxelBox {
            origin: [0.0; 3],
            spacing: [1.0; 3],
            shape: [2, 3, 4],
        };
        let mut spec = PowerSpectrum {
            frame: Frame::identity(),
            voxel_box: vbox,
            voxels: vec![Complex64::new(0.0, 0.0); 24],
        };
        let i = spec.index(1, 1, 1);
        spec.voxels[i] = Complex64::new(2.0, 0.0);
        let mut buf = Vec::new();
        write_slice_csv(&spec, SlicePlane::Xz, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("x,y,z,abs\n"));
        assert_eq!(text.lines().count(), 1 + 2 * 4);
        assert!("yz".parse::<SlicePlane>().is_ok() && "ab".parse::<SlicePlane>().is_err());
    }

    #[test]
    fn box_deeper_than_unambiguous_range() {
        let (grid, antennas, mut params) = small_scene();
        let far = Point3::new(0.0, 0.0, 2.0 * SPEED_OF_LIGHT / grid.delta);
        assert!(ReconstructionPlan::new(&antennas, &grid, &far, &params).is_ok());
        params.box_extent[2] = 1.1 * SPEED_OF_LIGHT / grid.delta;
        assert!(matches!(
            ReconstructionPlan::new(&antennas, &grid, &far, &params),
            Err(Error::BoxOutOfRange { .. })
        ));
    }
}
