//! Pinhole projection and ground-plane geometry.
//!
//! Camera coordinates are x right, y down, z forward (meters). Pixel
//! coordinates are u right, v down, in the global large-scene image frame
//! unless a function says otherwise.

use std::ops::{Add, Sub};

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = nalgebra::Point3<f64>;
pub type Vec3 = Vector3<f64>;

/// Homogeneous image point. A third component below
/// [`INFINITY_EPS`] in magnitude marks a point at infinity.
pub type Homogeneous = Vector3<f64>;

pub const INFINITY_EPS: f64 = 1e-12;

/// Denominators below this magnitude are treated as a ray parallel to the plane.
const PARALLEL_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
}

impl From<[f64; 2]> for Pixel {
    fn from(a: [f64; 2]) -> Self {
        Pixel::new(a[0], a[1])
    }
}

impl From<Pixel> for [f64; 2] {
    fn from(p: Pixel) -> Self {
        [p.u, p.v]
    }
}

impl Pixel {
    pub const fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn homogeneous(&self) -> Homogeneous {
        Vector3::new(self.u, self.v, 1.0)
    }

    pub fn to_vector(self) -> Vector2<f64> {
        Vector2::new(self.u, self.v)
    }

    pub fn distance(&self, other: &Pixel) -> f64 {
        (self.u - other.u).hypot(self.v - other.v)
    }

    pub fn is_finite(&self) -> bool {
        self.u.is_finite() && self.v.is_finite()
    }

    /// Dehomogenize, or `None` for a point at infinity.
    pub fn from_homogeneous(h: &Homogeneous) -> Option<Pixel> {
        if h.z.abs() < INFINITY_EPS {
            None
        } else {
            Some(Pixel::new(h.x / h.z, h.y / h.z))
        }
    }
}

impl Add for Pixel {
    type Output = Pixel;
    fn add(self, rhs: Pixel) -> Pixel {
        Pixel::new(self.u + rhs.u, self.v + rhs.v)
    }
}

impl Sub for Pixel {
    type Output = Pixel;
    fn sub(self, rhs: Pixel) -> Pixel {
        Pixel::new(self.u - rhs.u, self.v - rhs.v)
    }
}

/// Square-pixel pinhole intrinsics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub f: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(f: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(f > 0.0 && f.is_finite()) {
            return Err(Error::InvalidCamera(format!("focal length must be positive, got {f}")));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(Error::InvalidCamera("principal point must be finite".into()));
        }
        Ok(Self { f, cx, cy })
    }

    /// Principal point at the image center.
    pub fn centered(f: f64, width: f64, height: f64) -> Result<Self> {
        Self::new(f, width / 2.0, height / 2.0)
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.f, 0.0, self.cx, 0.0, self.f, self.cy, 0.0, 0.0, 1.0)
    }

    /// `K⁻¹ p̄`: the viewing ray through `p` scaled to unit depth.
    pub fn backproject(&self, p: Pixel) -> Vec3 {
        Vector3::new((p.u - self.cx) / self.f, (p.v - self.cy) / self.f, 1.0)
    }

    pub fn principal_point(&self) -> Pixel {
        Pixel::new(self.cx, self.cy)
    }
}

/// Plane `N·P + D = 0` with unit normal pointing toward the camera (`D > 0`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPlane", into = "RawPlane")]
pub struct GroundPlane {
    normal: Vec3,
    d: f64,
}

#[derive(Serialize, Deserialize)]
struct RawPlane {
    normal: [f64; 3],
    d: f64,
}

impl TryFrom<RawPlane> for GroundPlane {
    type Error = Error;
    fn try_from(raw: RawPlane) -> Result<Self> {
        GroundPlane::new(Vector3::from(raw.normal), raw.d)
    }
}

impl From<GroundPlane> for RawPlane {
    fn from(g: GroundPlane) -> Self {
        RawPlane {
            normal: g.normal.into(),
            d: g.d,
        }
    }
}

impl GroundPlane {
    /// Normalizes `normal` and flips the sign of the whole equation if needed
    /// so the camera origin lies on the positive side.
    pub fn new(normal: Vec3, d: f64) -> Result<Self> {
        let norm = normal.norm();
        if !(norm > 0.0 && norm.is_finite() && d.is_finite()) {
            return Err(Error::InvalidPlane(format!(
                "normal {:?} / offset {d} not usable",
                normal.as_slice()
            )));
        }
        let (mut n, mut d) = (normal / norm, d / norm);
        if d < 0.0 {
            n = -n;
            d = -d;
        }
        if d == 0.0 {
            return Err(Error::InvalidPlane("camera center lies on the plane".into()));
        }
        Ok(Self { normal: n, d })
    }

    pub fn normal(&self) -> Vec3 {
        self.normal
    }

    pub fn offset(&self) -> f64 {
        self.d
    }

    /// `[Nᵀ, D]ᵀ`.
    pub fn coefficients(&self) -> nalgebra::Vector4<f64> {
        nalgebra::Vector4::new(self.normal.x, self.normal.y, self.normal.z, self.d)
    }

    /// Orthogonal projection of `p` onto the plane.
    pub fn project_point(&self, p: &Point3) -> Point3 {
        p - self.normal * signed_distance(p, self)
    }
}

/// Perspective projection of a camera-frame point.
pub fn project(p: &Point3, k: &CameraIntrinsics) -> Result<Pixel> {
    if !(p.z > 0.0) {
        return Err(Error::BehindCamera { depth: p.z });
    }
    Ok(Pixel::new(k.f * p.x / p.z + k.cx, k.f * p.y / p.z + k.cy))
}

/// Intersection of the viewing ray through `p` with the plane.
pub fn ground_intersect(p: Pixel, k: &CameraIntrinsics, g: &GroundPlane) -> Result<Point3> {
    let ray = k.backproject(p);
    let denom = g.normal.dot(&ray);
    if denom.abs() < PARALLEL_EPS {
        return Err(Error::NoIntersection);
    }
    let z = -g.d / denom;
    if !(z > 0.0) {
        return Err(Error::BehindCamera { depth: z });
    }
    Ok(Point3::from(ray * z))
}

/// `N·P + D`; negative values are penetration depths in meters.
pub fn signed_distance(p: &Point3, g: &GroundPlane) -> f64 {
    g.normal.dot(&p.coords) + g.d
}

/// Image of the direction `n`, i.e. `K n`.
pub fn vanishing_point(k: &CameraIntrinsics, n: &Vec3) -> Homogeneous {
    k.matrix() * n
}

/// Moves the plane by `delta` meters along its normal: points at signed
/// distance `delta` end up on the new plane.
pub fn offset_plane(g: &GroundPlane, delta: f64) -> Result<GroundPlane> {
    GroundPlane::new(g.normal, g.d - delta)
}
