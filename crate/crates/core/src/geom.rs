//! Geometric primitives: homogeneous points, quaternion rotations, rigid
//! transforms, pinhole projection and least-squares planes.
//!
//! Conventions: cameras are right-handed and look down `+z`; image origin is
//! the top-left pixel with `u` to the right and `v` downwards. Quaternions
//! are Hamilton and stored as `(w, x, y, z)`.

use nalgebra::{Matrix3, Matrix3x4, SymmetricEigen, Vector4};

use crate::error::{Error, Result};
use crate::tol;

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// A point in homogeneous coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
}

impl HomPoint {
    pub fn new(x: f64, y: f64, z: f64, w: f64) -> Self {
        Self { x, y, z, w }
    }

    pub fn from_point(p: &Vec3) -> Self {
        Self::new(p.x, p.y, p.z, 1.0)
    }

    /// Euclidean point, or `None` for points at infinity.
    pub fn dehomogenize(&self) -> Option<Vec3> {
        if self.w == 0.0 || !self.w.is_finite() {
            return None;
        }
        Some(Vec3::new(self.x / self.w, self.y / self.w, self.z / self.w))
    }

    /// Same point rescaled so that `w = 1`.
    pub fn normalized(&self) -> Option<Self> {
        self.dehomogenize().map(|p| Self::from_point(&p))
    }

    pub fn to_vector(&self) -> Vector4<f64> {
        Vector4::new(self.x, self.y, self.z, self.w)
    }
}

impl From<Vec3> for HomPoint {
    fn from(p: Vec3) -> Self {
        Self::from_point(&p)
    }
}

/// Image location in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelPoint {
    pub u: f64,
    pub v: f64,
}

impl PixelPoint {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn distance(&self, other: &PixelPoint) -> f64 {
        (self.u - other.u).hypot(self.v - other.v)
    }
}

/// Rotation stored as a unit quaternion `(w, x, y, z)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitQuaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl UnitQuaternion {
    pub const IDENTITY: Self = Self {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    /// Normalises the given components. Fails on zero or non-finite input.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if !n.is_finite() || n < 1e-300 {
            return Err(Error::InvalidInput(format!(
                "quaternion ({w}, {x}, {y}, {z}) cannot be normalised"
            )));
        }
        Ok(Self {
            w: w / n,
            x: x / n,
            y: y / n,
            z: z / n,
        })
    }

    pub fn from_array(q: [f64; 4]) -> Result<Self> {
        Self::new(q[0], q[1], q[2], q[3])
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    /// Rotation of `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Result<Self> {
        let n = axis.norm();
        if n < 1e-300 {
            return Err(Error::InvalidInput("zero rotation axis".into()));
        }
        let a = axis / n;
        let (s, c) = (0.5 * angle).sin_cos();
        Self::new(c, a.x * s, a.y * s, a.z * s)
    }

    /// Rotation about the `+z` axis.
    pub fn from_yaw(angle: f64) -> Self {
        let (s, c) = (0.5 * angle).sin_cos();
        Self {
            w: c,
            x: 0.0,
            y: 0.0,
            z: s,
        }
    }

    /// Exponential map of a rotation vector.
    pub fn from_rotation_vector(v: &Vec3) -> Self {
        let angle = v.norm();
        if angle < 1e-12 {
            let q = Self {
                w: 1.0,
                x: 0.5 * v.x,
                y: 0.5 * v.y,
                z: 0.5 * v.z,
            };
            return q.renormalized();
        }
        let (s, c) = (0.5 * angle).sin_cos();
        let a = v / angle;
        Self {
            w: c,
            x: a.x * s,
            y: a.y * s,
            z: a.z * s,
        }
    }

    pub fn renormalized(&self) -> Self {
        let n = self.norm();
        Self {
            w: self.w / n,
            x: self.x / n,
            y: self.y / n,
            z: self.z / n,
        }
    }

    /// Sign-canonical form with `w >= 0`.
    pub fn canonical(&self) -> Self {
        if self.w < 0.0 {
            Self {
                w: -self.w,
                x: -self.x,
                y: -self.y,
                z: -self.z,
            }
        } else {
            *self
        }
    }

    pub fn conjugate(&self) -> Self {
        Self {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    /// Hamilton product `self * rhs` (apply `rhs` first).
    pub fn mul(&self, rhs: &Self) -> Self {
        let (a, b) = (self, rhs);
        Self {
            w: a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            x: a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            y: a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            z: a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        }
        .renormalized()
    }

    pub fn to_matrix(&self) -> Mat3 {
        quat_to_matrix(self)
    }

    pub fn rotate(&self, p: &Vec3) -> Vec3 {
        self.to_matrix() * p
    }

    /// Geodesic angle in radians between the two rotations.
    pub fn angle_to(&self, other: &Self) -> f64 {
        let d = (self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z).abs();
        2.0 * d.min(1.0).acos()
    }
}

/// Rotation matrix of `q`. Inputs off the unit sphere are renormalised first.
pub fn quat_to_matrix(q: &UnitQuaternion) -> Mat3 {
    let n2 = q.w * q.w + q.x * q.x + q.y * q.y + q.z * q.z;
    let q = if (n2.sqrt() - 1.0).abs() > tol::DEFAULT.quat_norm {
        q.renormalized()
    } else {
        *q
    };
    let (w, x, y, z) = (q.w, q.x, q.y, q.z);
    Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Quaternion of a rotation matrix (Shepperd's method), canonicalised to `w >= 0`.
pub fn matrix_to_quat(m: &Mat3) -> UnitQuaternion {
    let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
    let (w, x, y, z);
    if trace > 0.0 {
        let s = (trace + 1.0).sqrt() * 2.0;
        w = 0.25 * s;
        x = (m[(2, 1)] - m[(1, 2)]) / s;
        y = (m[(0, 2)] - m[(2, 0)]) / s;
        z = (m[(1, 0)] - m[(0, 1)]) / s;
    } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
        let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
        w = (m[(2, 1)] - m[(1, 2)]) / s;
        x = 0.25 * s;
        y = (m[(0, 1)] + m[(1, 0)]) / s;
        z = (m[(0, 2)] + m[(2, 0)]) / s;
    } else if m[(1, 1)] > m[(2, 2)] {
        let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
        w = (m[(0, 2)] - m[(2, 0)]) / s;
        x = (m[(0, 1)] + m[(1, 0)]) / s;
        y = 0.25 * s;
        z = (m[(1, 2)] + m[(2, 1)]) / s;
    } else {
        let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
        w = (m[(1, 0)] - m[(0, 1)]) / s;
        x = (m[(0, 2)] + m[(2, 0)]) / s;
        y = (m[(1, 2)] + m[(2, 1)]) / s;
        z = 0.25 * s;
    }
    UnitQuaternion { w, x, y, z }.renormalized().canonical()
}

/// Rigid transform `p ↦ R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: UnitQuaternion,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl RigidTransform {
    pub const IDENTITY: Self = Self {
        rotation: UnitQuaternion::IDENTITY,
        translation: Vec3::new(0.0, 0.0, 0.0),
    };

    pub fn new(rotation: UnitQuaternion, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self::new(UnitQuaternion::IDENTITY, t)
    }

    pub fn from_matrix(r: &Mat3, t: Vec3) -> Self {
        Self::new(matrix_to_quat(r), t)
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        self.rotation.to_matrix()
    }

    /// The `[R|T]` matrix.
    pub fn matrix(&self) -> Matrix3x4<f64> {
        let mut m = Matrix3x4::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation_matrix());
        m.set_column(3, &self.translation);
        m
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation_matrix() * p + self.translation
    }

    /// `self ∘ rhs`: applies `rhs` first.
    pub fn compose(&self, rhs: &Self) -> Self {
        Self::new(
            self.rotation.mul(&rhs.rotation),
            self.rotation_matrix() * rhs.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Self {
        let r_inv = self.rotation.conjugate();
        Self::new(r_inv, -(r_inv.to_matrix() * self.translation))
    }

    pub fn canonical(&self) -> Self {
        Self::new(self.rotation.canonical(), self.translation)
    }
}

/// Pinhole intrinsics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub skew: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        Self::with_skew(fx, fy, cx, cy, 0.0)
    }

    pub fn with_skew(fx: f64, fy: f64, cx: f64, cy: f64, skew: f64) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            skew,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy, self.skew]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "focal lengths must be positive and finite (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        Ok(())
    }

    /// Square pixels, principal point at the image centre, given vertical field of view.
    pub fn from_vertical_fov(width: f64, height: f64, fov_y: f64) -> Result<Self> {
        let f = 0.5 * height / (0.5 * fov_y).tan();
        Self::new(f, f, 0.5 * width, 0.5 * height)
    }

    pub fn matrix(&self) -> Mat3 {
        Mat3::new(
            self.fx, self.skew, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0,
        )
    }

    /// Pixel coordinates of a point already in the camera frame.
    pub fn project_camera_point(&self, p: &Vec3) -> Result<PixelPoint> {
        if p.z.is_nan() || p.z <= tol::DEFAULT.min_depth {
            return Err(Error::DepthNonPositive(p.z));
        }
        let (x, y) = (p.x / p.z, p.y / p.z);
        Ok(PixelPoint::new(
            self.fx * x + self.skew * y + self.cx,
            self.fy * y + self.cy,
        ))
    }

    /// Unit bearing vector through a pixel.
    pub fn bearing(&self, px: &PixelPoint) -> Vec3 {
        let y = (px.v - self.cy) / self.fy;
        let x = (px.u - self.cx - self.skew * y) / self.fx;
        Vec3::new(x, y, 1.0).normalize()
    }
}

/// `s·U = K [R|T] P`, returning `U`.
pub fn project(k: &CameraIntrinsics, tr: &RigidTransform, p: &HomPoint) -> Result<PixelPoint> {
    let h = k.matrix() * tr.matrix() * p.to_vector();
    let s = h.z;
    if s.is_nan() || s <= tol::DEFAULT.min_depth {
        return Err(Error::DepthNonPositive(s));
    }
    Ok(PixelPoint::new(h.x / s, h.y / s))
}

/// Plane `a·x + b·y + c·z + d = 0` with unit normal `(a, b, c)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub coeffs: [f64; 4],
}

impl Plane {
    /// Normalises the coefficients so the normal has unit length.
    pub fn new(a: f64, b: f64, c: f64, d: f64) -> Result<Self> {
        let n = (a * a + b * b + c * c).sqrt();
        if !n.is_finite() || n < 1e-300 || !d.is_finite() {
            return Err(Error::InvalidInput("plane normal must be non-zero".into()));
        }
        Ok(Self {
            coeffs: [a / n, b / n, c / n, d / n],
        })
    }

    pub fn from_array(c: [f64; 4]) -> Result<Self> {
        Self::new(c[0], c[1], c[2], c[3])
    }

    /// The horizontal floor `z = 0` with upward normal.
    pub fn ground() -> Self {
        Self {
            coeffs: [0.0, 0.0, 1.0, 0.0],
        }
    }

    pub fn normal(&self) -> Vec3 {
        Vec3::new(self.coeffs[0], self.coeffs[1], self.coeffs[2])
    }

    pub fn offset(&self) -> f64 {
        self.coeffs[3]
    }

    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        plane_residual(self, p)
    }
}

/// Signed distance of `p` from the plane.
pub fn plane_residual(pl: &Plane, p: &Vec3) -> f64 {
    let c = &pl.coeffs;
    c[0] * p.x + c[1] * p.y + c[2] * p.z + c[3]
}

/// Total least-squares plane through `points`.
///
/// The normal is the eigenvector of the smallest eigenvalue of the centred
/// covariance, signed so that its largest-magnitude component is positive.
pub fn fit_plane(points: &[Vec3]) -> Result<Plane> {
    if points.len() < 3 {
        return Err(Error::DegenerateGeometry("plane fit needs at least 3 points"));
    }
    let n = points.len() as f64;
    let centroid = points.iter().fold(Vec3::zeros(), |acc, p| acc + p) / n;
    let cov = points.iter().fold(Mat3::zeros(), |acc, p| {
        let d = p - centroid;
        acc + d * d.transpose()
    }) / n;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (smallest, middle, largest) = (order[0], order[1], order[2]);
    let scale = eig.eigenvalues[largest].abs();
    if scale <= 0.0 || eig.eigenvalues[middle] <= tol::DEFAULT.degenerate * scale {
        return Err(Error::DegenerateGeometry("points are collinear"));
    }
    let mut normal: Vec3 = eig.eigenvectors.column(smallest).into_owned().normalize();
    let mut dominant = 0;
    for i in 1..3 {
        if normal[i].abs() > normal[dominant].abs() {
            dominant = i;
        }
    }
    if normal[dominant] < 0.0 {
        normal = -normal;
    }
    let d = -normal.dot(&centroid);
    Ok(Plane {
        coeffs: [normal.x, normal.y, normal.z, d],
    })
}
