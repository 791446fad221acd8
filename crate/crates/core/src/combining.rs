//! Recover the actual TV from its mirror images.
//!
//! Each reflected path yields a virtual TV: the mirror of the real one across
//! a vertical surface. The anchor segment `a -> b` turns by twice the surface
//! rotation, so once the first back-projection angle `θ₁` is known every other
//! `θ_ℓ = θ₁ + (φ_ℓ - φ₁)/2` follows, and the back-projection rays through the
//! virtual anchors all meet at the real anchor. `θ₁` is found by a 1D search
//! that minimizes the scatter of those intersections.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::f64::consts::PI;

use crate::geometry::{directed_angle_xz, Point3, PointCloud, ReflectionSurface};
use crate::sync::canonical_offset;
use crate::{Error, Result};

/// Per-path result of sync and imaging.
#[derive(Clone, Debug, PartialEq)]
pub struct VirtualDetection {
    pub path_id: u32,
    pub x_a_virtual: Point3,
    pub x_b_virtual: Point3,
    /// Imaged virtual TV; empty when imaging failed for this path.
    pub cloud: PointCloud,
    pub sigma_hat: f64,
    /// Directed angle of `a -> b` in the X-Z plane.
    pub phi: f64,
}

impl VirtualDetection {
    pub fn new(path_id: u32, x_a: Point3, x_b: Point3, cloud: PointCloud, sigma_hat: f64) -> Result<Self> {
        let phi = directed_angle_xz(&x_a, &x_b)?;
        Ok(VirtualDetection {
            path_id,
            x_a_virtual: x_a,
            x_b_virtual: x_b,
            cloud,
            sigma_hat,
            phi,
        })
    }
}

/// Single-linkage clusters of detections whose clock estimates lie within
/// `tolerance` on the circle of length `period`. Returns index groups ordered by
/// their smallest member.
pub fn group_by_clock(sigmas: &[f64], tolerance: f64, period: f64) -> Vec<Vec<usize>> {
    let n = sigmas.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn root(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    let delta = 1.0 / period;
    for i in 0..n {
        for j in i + 1..n {
            let gap = canonical_offset(sigmas[i] - sigmas[j], delta).abs();
            if gap <= tolerance {
                let (a, b) = (root(&mut parent, i), root(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut slot = vec![usize::MAX; n];
    for i in 0..n {
        let r = root(&mut parent, i);
        if slot[r] == usize::MAX {
            slot[r] = groups.len();
            groups.push(Vec::new());
        }
        groups[slot[r]].push(i);
    }
    groups
}

/// `θ_ℓ = θ₁ + (φ_ℓ - φ₁)/2`.
pub fn theta_for(theta1: f64, phi_l: f64, phi_1: f64) -> f64 {
    theta1 + 0.5 * (phi_l - phi_1)
}

/// Intersection in X-Z of the lines through `p` and `q` with directions `theta_p` and `theta_q`.
pub fn intersect_rays(p: &Point3, theta_p: f64, q: &Point3, theta_q: f64) -> Result<Point3> {
    let (sp, cp) = theta_p.sin_cos();
    let (sq, cq) = theta_q.sin_cos();
    let det = cp * sq - sp * cq;
    if det.abs() < 1e-12 {
        return Err(Error::ParallelRays);
    }
    let (dx, dz) = (q.x - p.x, q.z - p.z);
    let t = (dx * sq - dz * cq) / det;
    Ok(Point3::new(p.x + t * cp, 0.5 * (p.y + q.y), p.z + t * sp))
}

/// Back-projection intersections for anchors `a` and `b` of two paths.
pub fn candidate_anchor(
    det_i: &VirtualDetection,
    det_j: &VirtualDetection,
    theta_i: f64,
    theta_j: f64,
) -> Result<(Point3, Point3)> {
    Ok((
        intersect_rays(&det_i.x_a_virtual, theta_i, &det_j.x_a_virtual, theta_j)?,
        intersect_rays(&det_i.x_b_virtual, theta_i, &det_j.x_b_virtual, theta_j)?,
    ))
}

/// Candidates `v^(ℓ) = ray 1 ∩ ray ℓ` for `ℓ = 2..L`.
fn candidates(cluster: &[VirtualDetection], theta1: f64) -> Result<Vec<(Point3, Point3)>> {
    let first = &cluster[0];
    cluster[1..]
        .iter()
        .map(|d| candidate_anchor(first, d, theta1, theta_for(theta1, d.phi, first.phi)))
        .collect()
}

/// Pairwise scatter of the candidate anchors, each unordered pair once.
pub fn scatter_objective(cluster: &[VirtualDetection], theta1: f64) -> f64 {
    let Ok(c) = candidates(cluster, theta1) else {
        return f64::INFINITY;
    };
    let mut sum = 0.0;
    for i in 0..c.len() {
        for j in i + 1..c.len() {
            sum += (c[i].0 - c[j].0).norm() + (c[i].1 - c[j].1).norm();
        }
    }
    sum
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SearchOptions {
    /// Coarse grid step, radians.
    pub step: f64,
    /// Golden-section stopping width, radians.
    pub tolerance: f64,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            step: 1e-3,
            tolerance: 1e-6,
        }
    }
}

fn golden_section(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> (f64, f64) {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = hi - g * (hi - lo);
    let mut d = lo + g * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    while hi - lo > tol {
        if fc <= fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - g * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + g * (hi - lo);
            fd = f(d);
        }
    }
    let x = 0.5 * (lo + hi);
    (x, f(x))
}

/// Wrap into `(-π/2, π/2]`; `θ` and `θ ± π` describe the same ray line.
fn half_turn(theta: f64) -> f64 {
    let r = theta.rem_euclid(PI);
    if r > PI / 2.0 {
        r - PI
    } else {
        r
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThetaSearch {
    pub theta1: f64,
    pub objective: f64,
    pub x_a_star: Point3,
    pub x_b_star: Point3,
    /// Whether the chosen minimum put the anchor nearer the SV than every virtual anchor.
    pub feasible: bool,
}

fn mean(points: impl Iterator<Item = Point3>) -> Point3 {
    let (sum, n) = points.fold((Point3::zeros(), 0usize), |(s, n), p| (s + p, n + 1));
    sum / n as f64
}

/// 1D search of `θ₁` over `(-π/2, π/2]`: coarse grid, golden-section polish of every
/// local minimum, then the lowest minimum whose anchor lies closer to the SV origin
/// than all virtual anchors (falling back to the lowest overall). Ties go to the smaller `θ₁`.
pub fn search_theta1(cluster: &[VirtualDetection], opts: &SearchOptions) -> Result<ThetaSearch> {
    if cluster.len() < 3 {
        return Err(Error::TooFewPaths(cluster.len()));
    }
    let n = (PI / opts.step).ceil() as usize;
    let step = PI / n as f64;
    let thetas: Vec<f64> = (0..n).map(|i| -PI / 2.0 + (i + 1) as f64 * step).collect();
    let values: Vec<f64> = thetas.iter().map(|t| scatter_objective(cluster, *t)).collect();
    if values.iter().all(|v| !v.is_finite()) {
        return Err(Error::DegenerateGeometry);
    }
    let f = |t: f64| scatter_objective(cluster, t);
    let mut minima: Vec<(f64, f64)> = Vec::new();
    for i in 0..n {
        let (prev, next) = (values[(i + n - 1) % n], values[(i + 1) % n]);
        let v = values[i];
        if v.is_finite() && v <= prev && v <= next {
            let (t, fv) = golden_section(f, thetas[i] - step, thetas[i] + step, opts.tolerance);
            let (t, fv) = if fv <= v { (t, fv) } else { (thetas[i], v) };
            minima.push((half_turn(t), fv));
        }
    }
    minima.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.total_cmp(&b.0)));

    let closest_virtual = |which: fn(&VirtualDetection) -> Point3| {
        cluster.iter().map(|d| which(d).norm()).fold(f64::INFINITY, f64::min)
    };
    let limit_a = closest_virtual(|d| d.x_a_virtual);
    let limit_b = closest_virtual(|d| d.x_b_virtual);
    let evaluate = |theta: f64| -> Option<(Point3, Point3)> {
        let c = candidates(cluster, theta).ok()?;
        Some((mean(c.iter().map(|p| p.0)), mean(c.iter().map(|p| p.1))))
    };
    let mut fallback = None;
    for &(theta, objective) in &minima {
        let Some((a, b)) = evaluate(theta) else {
            continue;
        };
        let result = ThetaSearch {
            theta1: theta,
            objective,
            x_a_star: a,
            x_b_star: b,
            feasible: a.norm() < limit_a && b.norm() < limit_b,
        };
        if result.feasible {
            return Ok(result);
        }
        fallback.get_or_insert(result);
    }
    fallback.ok_or(Error::DegenerateGeometry)
}

/// Surface through the midpoint of `x_a_virtual -> x_a_star` whose normal has direction `theta`.
pub fn estimate_surface(x_a_star: &Point3, x_a_virtual: &Point3, theta: f64) -> ReflectionSurface {
    let mid = 0.5 * (x_a_star + x_a_virtual);
    let (s, c) = theta.sin_cos();
    if s.abs() < 1e-12 {
        return ReflectionSurface::vertical(mid.x);
    }
    // Line direction (-s, c): slope = -c/s = -1/tanθ.
    let slope = -c / s;
    ReflectionSurface::line(slope, mid.z - slope * mid.x)
}

/// Mirror every point across the line through the midpoint of `x_a_virtual -> x_a_star`
/// with normal direction `theta`.
pub fn map_virtual_to_actual(cloud: &[Point3], theta: f64, x_a_star: &Point3, x_a_virtual: &Point3) -> PointCloud {
    let (s, c) = theta.sin_cos();
    let sx = x_a_virtual.x + x_a_star.x;
    let sz = x_a_virtual.z + x_a_star.z;
    cloud
        .iter()
        .map(|p| {
            let ex = sx - 2.0 * p.x;
            let ez = sz - 2.0 * p.z;
            Point3::new(p.x + c * c * ex + s * c * ez, p.y, p.z + s * c * ex + s * s * ez)
        })
        .collect()
}

#[derive(Clone, Copy, PartialEq)]
struct Pair {
    dist: f64,
    i: usize,
    j: usize,
}

impl Eq for Pair {}

impl Ord for Pair {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed: BinaryHeap is a max-heap and the closest pair must come first.
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.i.cmp(&self.i))
            .then_with(|| other.j.cmp(&self.j))
    }
}

impl PartialOrd for Pair {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Union of the clouds, then repeated merging of the closest pair nearer than
/// `radius` into its weighted centroid.
pub fn fuse_clouds(clouds: &[PointCloud], radius: f64) -> PointCloud {
    let mut centers: Vec<Point3> = clouds.iter().flatten().copied().collect();
    let mut weights: Vec<f64> = vec![1.0; centers.len()];
    let mut alive = vec![true; centers.len()];
    let mut heap = BinaryHeap::new();
    for i in 0..centers.len() {
        for j in i + 1..centers.len() {
            let dist = (centers[i] - centers[j]).norm();
            if dist < radius {
                heap.push(Pair { dist, i, j });
            }
        }
    }
    while let Some(Pair { i, j, .. }) = heap.pop() {
        if !alive[i] || !alive[j] {
            continue;
        }
        let w = weights[i] + weights[j];
        let merged = (centers[i] * weights[i] + centers[j] * weights[j]) / w;
        alive[j] = false;
        alive[i] = false;
        centers.push(merged);
        weights.push(w);
        alive.push(true);
        let new = centers.len() - 1;
        for k in 0..new {
            if alive[k] {
                let dist = (centers[k] - merged).norm();
                if dist < radius {
                    heap.push(Pair { dist, i: k, j: new });
                }
            }
        }
    }
    centers.into_iter().zip(alive).filter(|(_, a)| *a).map(|(c, _)| c).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathSurface {
    pub path_id: u32,
    pub theta: f64,
    /// `None` for the LoS path, which needs no mapping.
    pub surface: Option<ReflectionSurface>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CombineResult {
    pub theta1_star: f64,
    pub objective: f64,
    pub x_a_star: Point3,
    pub x_b_star: Point3,
    pub surfaces: Vec<PathSurface>,
    /// Mapped cloud of every path with a non-empty image, in input order.
    pub mapped_clouds: Vec<(u32, PointCloud)>,
    pub actual_cloud: PointCloud,
    pub feasible: bool,
}

/// Full NLoS recovery for one clock cluster. With a LoS detection its anchors are
/// taken as the actual anchors directly and any number of reflected paths may join.
pub fn combine(
    reflected: &[VirtualDetection],
    los: Option<&VirtualDetection>,
    opts: &SearchOptions,
    merge_radius: f64,
) -> Result<CombineResult> {
    let (theta1, objective, x_a, x_b, thetas, feasible) = match los {
        Some(direct) => {
            let thetas = reflected
                .iter()
                .map(|d| directed_angle_xz(&d.x_a_virtual, &direct.x_a_virtual).map(half_turn))
                .collect::<Result<Vec<f64>>>()?;
            let t1 = thetas.first().copied().unwrap_or(0.0);
            (t1, 0.0, direct.x_a_virtual, direct.x_b_virtual, thetas, true)
        }
        None => {
            let s = search_theta1(reflected, opts)?;
            let first = reflected[0].phi;
            let thetas = reflected.iter().map(|d| theta_for(s.theta1, d.phi, first)).collect();
            (s.theta1, s.objective, s.x_a_star, s.x_b_star, thetas, s.feasible)
        }
    };

    let mut surfaces = Vec::new();
    let mut mapped = Vec::new();
    if let Some(direct) = los {
        surfaces.push(PathSurface {
            path_id: direct.path_id,
            theta: 0.0,
            surface: None,
        });
        if !direct.cloud.is_empty() {
            mapped.push((direct.path_id, direct.cloud.clone()));
        }
    }
    for (d, &theta) in reflected.iter().zip(&thetas) {
        surfaces.push(PathSurface {
            path_id: d.path_id,
            theta,
            surface: Some(estimate_surface(&x_a, &d.x_a_virtual, theta)),
        });
        if !d.cloud.is_empty() {
            mapped.push((d.path_id, map_virtual_to_actual(&d.cloud, theta, &x_a, &d.x_a_virtual)));
        }
    }
    let clouds: Vec<PointCloud> = mapped.iter().map(|(_, c)| c.clone()).collect();
    let actual_cloud = fuse_clouds(&clouds, merge_radius);
    Ok(CombineResult {
        theta1_star: theta1,
        objective,
        x_a_star: x_a,
        x_b_star: x_b,
        surfaces,
        mapped_clouds: mapped,
        actual_cloud,
        feasible,
    })
}
