//! Coordinates, reflection surfaces and propagation paths.
//!
//! The frame has its origin at the SV center, Y vertical and X parallel to
//! the ground. Reflection surfaces are vertical planes, so every surface is
//! a line in the X-Z plane and mirroring never touches `y`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

pub type Point3 = nalgebra::Vector3<f64>;
pub type PointCloud = Vec<Point3>;

/// A vertical reflector, stored as its trace in the X-Z plane.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ReflectionSurface {
    /// `z = slope * x + intercept`
    Line {
        slope: f64,
        #[serde(rename = "intercept_m")]
        intercept: f64,
    },
    /// `x = x_m`, the tan-singular orientation.
    Vertical {
        #[serde(rename = "x_m")]
        x: f64,
    },
}

impl ReflectionSurface {
    pub fn line(slope: f64, intercept: f64) -> Self {
        ReflectionSurface::Line { slope, intercept }
    }

    pub fn vertical(x: f64) -> Self {
        ReflectionSurface::Vertical { x }
    }

    pub fn is_finite(&self) -> bool {
        match *self {
            ReflectionSurface::Line { slope, intercept } => slope.is_finite() && intercept.is_finite(),
            ReflectionSurface::Vertical { x } => x.is_finite(),
        }
    }

    /// Unit normal `(nx, nz)` and offset `c` with `nx*x + nz*z + c = 0` on the surface.
    pub fn normal_form(&self) -> (f64, f64, f64) {
        match *self {
            ReflectionSurface::Line { slope, intercept } => {
                let norm = slope.hypot(1.0);
                (slope / norm, -1.0 / norm, intercept / norm)
            }
            ReflectionSurface::Vertical { x } => (1.0, 0.0, -x),
        }
    }

    /// Signed X-Z distance from `p` to the surface.
    pub fn signed_distance(&self, p: &Point3) -> f64 {
        let (nx, nz, c) = self.normal_form();
        nx * p.x + nz * p.z + c
    }

    /// Mirror image of `p`. An involution that preserves `y`.
    pub fn mirror(&self, p: &Point3) -> Point3 {
        let (nx, nz, _) = self.normal_form();
        let d = self.signed_distance(p);
        Point3::new(p.x - 2.0 * d * nx, p.y, p.z - 2.0 * d * nz)
    }

    /// Where a ray from `tx` bounces on its way to `rx`, if both lie on the same side.
    pub fn specular_point(&self, tx: &Point3, rx: &Point3) -> Option<Point3> {
        let image = self.mirror(tx);
        let d0 = self.signed_distance(&image);
        let d1 = self.signed_distance(rx);
        if d0 * d1 >= 0.0 || (d0 - d1).abs() < f64::EPSILON {
            return None;
        }
        let t = d0 / (d0 - d1);
        Some(image + (rx - image) * t)
    }
}

/// Mirror `p` across `surface`.
pub fn mirror_point(surface: &ReflectionSurface, p: &Point3) -> Point3 {
    surface.mirror(p)
}

/// A propagation path between one TV antenna and one SV antenna.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Propagation {
    Direct,
    Reflected(ReflectionSurface),
}

/// Geometric length of the path from `tx` to `rx`.
pub fn path_length(path: &Propagation, tx: &Point3, rx: &Point3) -> f64 {
    match path {
        Propagation::Direct => (tx - rx).norm(),
        Propagation::Reflected(surface) => (surface.mirror(tx) - rx).norm(),
    }
}

/// Wrap an angle into `(-pi, pi]`.
pub fn canonical_angle(angle: f64) -> f64 {
    let r = angle.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// Directed angle from the X axis to the segment `from -> to`, projected on X-Z.
pub fn directed_angle_xz(from: &Point3, to: &Point3) -> Result<f64> {
    let dx = to.x - from.x;
    let dz = to.z - from.z;
    if dx == 0.0 && dz == 0.0 {
        return Err(Error::DegenerateAngle);
    }
    Ok(canonical_angle(dz.atan2(dx)))
}

pub fn centroid(points: &[Point3]) -> Option<Point3> {
    if points.is_empty() {
        return None;
    }
    let sum = points.iter().fold(Point3::zeros(), |acc, p| acc + p);
    Some(sum / points.len() as f64)
}

/// Ground truth for one simulated encounter.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub tv_antennas: PointCloud,
    /// Indices into `tv_antennas` of the two signature antennas `a` and `b`.
    pub anchors: (usize, usize),
    pub sv_antennas: Vec<Point3>,
    pub surfaces: Vec<ReflectionSurface>,
    /// TV clock minus SV clock, seconds.
    pub clock_offset: f64,
    pub has_los: bool,
}

impl Scene {
    pub fn new(
        tv_antennas: PointCloud,
        anchors: (usize, usize),
        sv_antennas: Vec<Point3>,
        surfaces: Vec<ReflectionSurface>,
        clock_offset: f64,
        has_los: bool,
    ) -> Result<Self> {
        let scene = Scene {
            tv_antennas,
            anchors,
            sv_antennas,
            surfaces,
            clock_offset,
            has_los,
        };
        scene.check()?;
        Ok(scene)
    }

    fn check(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.tv_antennas.len() < 2 {
            return bad(format!("need at least 2 TV antennas, got {}", self.tv_antennas.len()));
        }
        if self.sv_antennas.is_empty() {
            return bad("SV antenna set is empty".into());
        }
        let (a, b) = self.anchors;
        if a == b || a >= self.tv_antennas.len() || b >= self.tv_antennas.len() {
            return bad(format!("invalid anchor indices ({a}, {b})"));
        }
        for (name, set) in [("TV", &self.tv_antennas), ("SV", &self.sv_antennas)] {
            if set.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
                return bad(format!("{name} antenna with non-finite coordinate"));
            }
            for i in 0..set.len() {
                for j in i + 1..set.len() {
                    if set[i] == set[j] {
                        return bad(format!("duplicate {name} antennas {i} and {j}"));
                    }
                }
            }
        }
        if let Some(s) = self.surfaces.iter().find(|s| !s.is_finite()) {
            return bad(format!("non-finite surface {s:?}"));
        }
        if !self.clock_offset.is_finite() {
            return bad("clock offset must be finite".into());
        }
        Ok(())
    }

    pub fn anchor_a(&self) -> Point3 {
        self.tv_antennas[self.anchors.0]
    }

    pub fn anchor_b(&self) -> Point3 {
        self.tv_antennas[self.anchors.1]
    }

    /// Propagation paths in order: the direct path first when present, then one per surface.
    pub fn paths(&self) -> Vec<Propagation> {
        let mut out = Vec::with_capacity(self.surfaces.len() + 1);
        if self.has_los {
            out.push(Propagation::Direct);
        }
        out.extend(self.surfaces.iter().map(|s| Propagation::Reflected(*s)));
        out
    }

    /// TV antenna cloud as seen along `path` (the virtual TV for reflections).
    pub fn apparent_cloud(&self, path: &Propagation) -> PointCloud {
        match path {
            Propagation::Direct => self.tv_antennas.clone(),
            Propagation::Reflected(s) => self.tv_antennas.iter().map(|p| s.mirror(p)).collect(),
        }
    }

    /// Longest path length between any TV and SV antenna over all paths.
    pub fn max_path_length(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for path in self.paths() {
            for tx in &self.tv_antennas {
                for rx in &self.sv_antennas {
                    worst = worst.max(path_length(&path, tx, rx));
                }
            }
        }
        worst
    }
}
