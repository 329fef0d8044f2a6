//! Shared geometric primitives: rigid transforms, the rectified pinhole stereo
//! rig, triangulation and the device-frame spherical mapping.
//!
//! Frame conventions used throughout the crate:
//!
//! * Operating space is the left camera frame of the default rig: `+z` looks
//!   into the scene, `+x` to the right, `+y` down the image.
//! * The device frame has `+z` along the needle rest axis and `+y` "up".
//!   Azimuth rotates about `y` (positive toward `+x`), elevation tilts toward
//!   `+y`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Point3 = nalgebra::Point3<f64>;

/// Disparities below this many pixels are triangulated but logged as
/// ill-conditioned.
pub const MIN_WELL_CONDITIONED_DISPARITY: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("point is behind the camera (depth {depth:.3} mm)")]
    BehindCamera { depth: f64 },
    #[error("non-positive disparity {0:.6} px")]
    NonPositiveDisparity(f64),
    #[error("rays are parallel; cannot triangulate")]
    ParallelRays,
    #[error("zero-length vector has no direction")]
    ZeroVector,
    #[error("invalid stereo rig: {0}")]
    InvalidRig(&'static str),
}

/// Subpixel image coordinate. Pixel `(i, j)` covers `[i - 0.5, i + 0.5]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
}

impl Pixel {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }
}

/// Rotation followed by translation: `p -> R p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity(), Vector3::zeros())
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Matrix3::identity(), t)
    }

    /// Rotation about a unit axis by `angle` radians (Rodrigues), no translation.
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let rot = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(*axis), angle);
        Self::new(*rot.matrix(), Vector3::zeros())
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn apply_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self::new(rt, -(rt * self.translation))
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        Self::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    /// Orthonormality and determinant check.
    pub fn is_proper(&self, tol: f64) -> bool {
        let gram = self.rotation.transpose() * self.rotation;
        (gram - Matrix3::identity()).abs().max() <= tol
            && (self.rotation.determinant() - 1.0).abs() <= tol
    }
}

/// Free-function form of [`RigidTransform::apply`].
pub fn rigid_apply(t: &RigidTransform, p: &Point3) -> Point3 {
    t.apply(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Camera {
    Left,
    Right,
}

/// Two pinhole cameras sharing intrinsics.
///
/// Camera poses map operating-space points into each camera frame. The default
/// rig is rectified: identical orientation and a pure `x` offset of one
/// baseline between the optical centres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StereoRig {
    pub focal_px: f64,
    pub cx: f64,
    pub cy: f64,
    pub baseline_mm: f64,
    pub width: u32,
    pub height: u32,
    pub left_pose: RigidTransform,
    pub right_pose: RigidTransform,
    /// Working depth range in millimetres; bounds admissible disparities.
    pub depth_range_mm: [f64; 2],
}

impl Default for StereoRig {
    fn default() -> Self {
        Self::rectified(700.0, 120.0, 1280, 720)
    }
}

impl StereoRig {
    /// Rectified rig with the principal point at the image centre and the left
    /// camera at the operating-space origin.
    pub fn rectified(focal_px: f64, baseline_mm: f64, width: u32, height: u32) -> Self {
        Self {
            focal_px,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            baseline_mm,
            width,
            height,
            left_pose: RigidTransform::identity(),
            right_pose: RigidTransform::from_translation(Vector3::new(-baseline_mm, 0.0, 0.0)),
            depth_range_mm: [300.0, 2000.0],
        }
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        if !(self.focal_px > 0.0) {
            return Err(GeomError::InvalidRig("focal length must be positive"));
        }
        if !(self.baseline_mm > 0.0) {
            return Err(GeomError::InvalidRig("baseline must be positive"));
        }
        if !(self.depth_range_mm[0] > 0.0 && self.depth_range_mm[0] < self.depth_range_mm[1]) {
            return Err(GeomError::InvalidRig("depth range must be positive and ordered"));
        }
        Ok(())
    }

    pub fn pose(&self, camera: Camera) -> &RigidTransform {
        match camera {
            Camera::Left => &self.left_pose,
            Camera::Right => &self.right_pose,
        }
    }

    /// True when both cameras share orientation and the right centre sits one
    /// baseline along the left camera's `+x`.
    pub fn is_rectified(&self) -> bool {
        let same_rot = (self.left_pose.rotation - self.right_pose.rotation).abs().max() < 1e-12;
        let offset = self.left_pose.translation - self.right_pose.translation;
        same_rot
            && (offset.x - self.baseline_mm).abs() < 1e-9
            && offset.y.abs() < 1e-9
            && offset.z.abs() < 1e-9
    }

    /// Admissible disparity window implied by the working depth range.
    pub fn disparity_window(&self) -> (f64, f64) {
        let fb = self.focal_px * self.baseline_mm;
        (fb / self.depth_range_mm[1], fb / self.depth_range_mm[0])
    }

    pub fn in_image(&self, px: &Pixel) -> bool {
        px.u >= -0.5
            && px.v >= -0.5
            && px.u <= self.width as f64 - 0.5
            && px.v <= self.height as f64 - 0.5
    }

    /// Optical centre of a camera in operating space.
    pub fn centre(&self, camera: Camera) -> Point3 {
        let pose = self.pose(camera);
        pose.inverse().apply(&Point3::origin())
    }
}

/// Pinhole projection of an operating-space point into one camera.
pub fn project(p: &Point3, rig: &StereoRig, camera: Camera) -> Result<Pixel, GeomError> {
    let pc = rig.pose(camera).apply(p);
    if !(pc.z > 0.0) {
        return Err(GeomError::BehindCamera { depth: pc.z });
    }
    Ok(Pixel::new(
        rig.focal_px * pc.x / pc.z + rig.cx,
        rig.focal_px * pc.y / pc.z + rig.cy,
    ))
}

/// Reconstruct a point from a left/right correspondence.
///
/// Rectified rigs use the closed form `Z = f·B/d` with the two rows averaged;
/// other rigs fall back to the midpoint of the shortest segment between the
/// back-projected rays.
pub fn triangulate(left: &Pixel, right: &Pixel, rig: &StereoRig) -> Result<Point3, GeomError> {
    if rig.is_rectified() {
        let disparity = left.u - right.u;
        if !(disparity > 0.0) {
            return Err(GeomError::NonPositiveDisparity(disparity));
        }
        if disparity < MIN_WELL_CONDITIONED_DISPARITY {
            log::warn!("ill-conditioned triangulation: disparity {disparity:.3} px");
        }
        let z = rig.focal_px * rig.baseline_mm / disparity;
        let v = 0.5 * (left.v + right.v);
        let pc = Point3::new((left.u - rig.cx) * z / rig.focal_px, (v - rig.cy) * z / rig.focal_px, z);
        return Ok(rig.left_pose.inverse().apply(&pc));
    }
    triangulate_midpoint(left, right, rig)
}

fn back_project(px: &Pixel, rig: &StereoRig, camera: Camera) -> (Point3, Vector3<f64>) {
    let inv = rig.pose(camera).inverse();
    let dir_cam = Vector3::new((px.u - rig.cx) / rig.focal_px, (px.v - rig.cy) / rig.focal_px, 1.0);
    (inv.apply(&Point3::origin()), inv.apply_vector(&dir_cam).normalize())
}

/// Least-squares ray intersection for arbitrary camera poses.
pub fn triangulate_midpoint(left: &Pixel, right: &Pixel, rig: &StereoRig) -> Result<Point3, GeomError> {
    let (o1, d1) = back_project(left, rig, Camera::Left);
    let (o2, d2) = back_project(right, rig, Camera::Right);
    let w0 = o1 - o2;
    let b = d1.dot(&d2);
    let denom = 1.0 - b * b;
    if denom < 1e-14 {
        return Err(GeomError::ParallelRays);
    }
    if denom < 1e-6 {
        log::warn!("ill-conditioned triangulation: ray angle {:.2e} rad", denom.sqrt());
    }
    let d = d1.dot(&w0);
    let e = d2.dot(&w0);
    let s = (b * e - d) / denom;
    let t = (e - b * d) / denom;
    let p1 = o1 + d1 * s;
    let p2 = o2 + d2 * t;
    if s <= 0.0 || t <= 0.0 {
        return Err(GeomError::NonPositiveDisparity(0.0));
    }
    Ok(Point3::from((p1.coords + p2.coords) * 0.5))
}

/// Needle-angle target in the device frame. Angles in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SphericalTarget {
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub radius_mm: f64,
}

/// Map a device-frame vector to azimuth/elevation/radius.
pub fn to_spherical(v: &Vector3<f64>) -> Result<SphericalTarget, GeomError> {
    let r = v.norm();
    if !(r > 0.0) || !r.is_finite() {
        return Err(GeomError::ZeroVector);
    }
    Ok(SphericalTarget {
        azimuth_deg: v.x.atan2(v.z).to_degrees(),
        elevation_deg: (v.y / r).clamp(-1.0, 1.0).asin().to_degrees(),
        radius_mm: r,
    })
}

/// Unit direction for the given azimuth and elevation (degrees).
pub fn direction(azimuth_deg: f64, elevation_deg: f64) -> Vector3<f64> {
    let (sa, ca) = azimuth_deg.to_radians().sin_cos();
    let (se, ce) = elevation_deg.to_radians().sin_cos();
    Vector3::new(ce * sa, se, ce * ca)
}

pub fn from_spherical(s: &SphericalTarget) -> Vector3<f64> {
    direction(s.azimuth_deg, s.elevation_deg) * s.radius_mm
}

/// Rotation whose `+z` column is `dir` and whose `+x` column is orthogonal to
/// `up`. Panics only on a zero `dir` or `dir` parallel to `up`.
pub fn look_rotation(dir: &Vector3<f64>, up: &Vector3<f64>) -> Matrix3<f64> {
    let z = dir.normalize();
    let x = up.cross(&z).normalize();
    let y = z.cross(&x);
    Matrix3::from_columns(&[x, y, z])
}

/// Rotation taking the device rest axis `+z` onto the needle direction for the
/// given angles: `R_y(az) · R_x(-el)`.
pub fn needle_rotation(azimuth_deg: f64, elevation_deg: f64) -> Matrix3<f64> {
    let ry = nalgebra::Rotation3::from_axis_angle(&Vector3::y_axis(), azimuth_deg.to_radians());
    let rx = nalgebra::Rotation3::from_axis_angle(&Vector3::x_axis(), -elevation_deg.to_radians());
    (ry * rx).into_inner()
}
