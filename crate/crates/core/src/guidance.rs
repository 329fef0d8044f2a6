//! Needle steering: desired azimuth/elevation toward the lesion, smoothing,
//! range and rate limiting, differential-gear kinematics and proximity
//! feedback.
//!
//! The device frame has its origin at the needle pivot and `+z` along the
//! needle rest axis. The needle passes through the pivot, so the commanded
//! angles are those of the pivot→lesion vector; once settled the tip→lesion
//! vector is collinear with the needle.

use std::io::{self, Write};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{direction, to_spherical, Point3, RigidTransform};
use crate::register::LesionEstimate;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GuidanceError {
    #[error("needle tip is at the target")]
    TargetReached,
    #[error("target coincides with the needle pivot")]
    TargetAtPivot,
    #[error("device pose is not a proper rotation")]
    InvalidPose,
    #[error("lesion estimate is not finite")]
    NonFiniteLesion,
    #[error("smoothing factor must lie in (0, 1], got {0}")]
    InvalidSmoothing(f64),
    #[error("azimuth {azimuth:.3}° / elevation {elevation:.3}° outside the admissible range")]
    OutOfRange { azimuth: f64, elevation: f64 },
    #[error("gear ratios must be non-zero and finite")]
    InvalidRatios,
    #[error("distance must be non-negative, got {0}")]
    NegativeDistance(f64),
    #[error("invalid feedback schedule: {0}")]
    InvalidFeedback(&'static str),
    #[error("invalid angle limits: {0}")]
    InvalidLimits(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    #[default]
    Positioning,
    Inserting,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Positioning => "positioning",
            Phase::Inserting => "inserting",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AngleLimits {
    pub azimuth_deg: [f64; 2],
    pub elevation_deg: [f64; 2],
    /// Per-axis bound on consecutive commands while inserting.
    pub delta_cap_deg: f64,
}

impl Default for AngleLimits {
    fn default() -> Self {
        Self {
            azimuth_deg: [-90.0, 90.0],
            elevation_deg: [-40.0, 45.0],
            delta_cap_deg: 2.0,
        }
    }
}

impl AngleLimits {
    pub fn validate(&self) -> Result<(), GuidanceError> {
        let ok = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] < r[1];
        if !ok(self.azimuth_deg) || !ok(self.elevation_deg) {
            return Err(GuidanceError::InvalidLimits("ranges must be finite and increasing"));
        }
        if self.elevation_deg[0] < -90.0 || self.elevation_deg[1] > 90.0 {
            return Err(GuidanceError::InvalidLimits("elevation must stay within ±90°"));
        }
        if !(self.delta_cap_deg > 0.0) {
            return Err(GuidanceError::InvalidLimits("delta cap must be positive"));
        }
        Ok(())
    }

    pub fn contains(&self, azimuth: f64, elevation: f64) -> bool {
        (self.azimuth_deg[0]..=self.azimuth_deg[1]).contains(&azimuth)
            && (self.elevation_deg[0]..=self.elevation_deg[1]).contains(&elevation)
    }

    pub fn clamp(&self, azimuth: f64, elevation: f64) -> (f64, f64) {
        (
            azimuth.clamp(self.azimuth_deg[0], self.azimuth_deg[1]),
            elevation.clamp(self.elevation_deg[0], self.elevation_deg[1]),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GearRatios {
    pub k_az: f64,
    pub k_el: f64,
}

impl Default for GearRatios {
    fn default() -> Self {
        Self { k_az: 1.0, k_el: 1.0 }
    }
}

impl GearRatios {
    pub fn validate(&self) -> Result<(), GuidanceError> {
        let ok = |k: f64| k.is_finite() && k != 0.0;
        if ok(self.k_az) && ok(self.k_el) {
            Ok(())
        } else {
            Err(GuidanceError::InvalidRatios)
        }
    }
}

/// `(azimuth, elevation)` in degrees for gear angles `θ₁, θ₂`.
pub fn gear_forward(theta1: f64, theta2: f64, ratios: &GearRatios) -> (f64, f64) {
    (
        ratios.k_az * (theta1 - theta2) / 2.0,
        ratios.k_el * (theta1 + theta2) / 2.0,
    )
}

/// Gear angles `(θ₁, θ₂)` producing the given azimuth and elevation.
pub fn gear_inverse(
    azimuth: f64,
    elevation: f64,
    ratios: &GearRatios,
    limits: &AngleLimits,
) -> Result<(f64, f64), GuidanceError> {
    ratios.validate()?;
    if !limits.contains(azimuth, elevation) {
        return Err(GuidanceError::OutOfRange { azimuth, elevation });
    }
    let e = elevation / ratios.k_el;
    let a = azimuth / ratios.k_az;
    Ok((e + a, e - a))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceState {
    /// Device frame to operating space.
    pub pose: RigidTransform,
    pub theta1_deg: f64,
    pub theta2_deg: f64,
    pub tip: Point3,
    pub phase: Phase,
}

impl DeviceState {
    pub fn pivot(&self) -> Point3 {
        Point3::from(self.pose.translation)
    }

    pub fn angles(&self, ratios: &GearRatios) -> (f64, f64) {
        gear_forward(self.theta1_deg, self.theta2_deg, ratios)
    }

    /// Unit needle axis in the operating space.
    pub fn needle_axis(&self, ratios: &GearRatios) -> Vector3<f64> {
        let (az, el) = self.angles(ratios);
        self.pose.apply_vector(&direction(az, el))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteeringCommand {
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    /// The raw angles fell outside the limits.
    pub clamped: bool,
    pub timestamp: f64,
}

/// Raw, unsmoothed angles toward `target` for a device at `pose`.
pub fn raw_angles(pose: &RigidTransform, target: &Point3) -> Result<(f64, f64), GuidanceError> {
    let local = pose.inverse().apply(target).coords;
    let s = to_spherical(&local).map_err(|_| GuidanceError::TargetAtPivot)?;
    Ok((s.azimuth_deg, s.elevation_deg))
}

/// Next steering command.
///
/// Raw angles are smoothed against `prev` (`α·raw + (1−α)·prev`), clamped to
/// the limits, and while inserting further limited to `delta_cap_deg` per
/// axis away from `prev`.
pub fn compute_command(
    state: &DeviceState,
    lesion: &LesionEstimate,
    limits: &AngleLimits,
    prev: Option<&SteeringCommand>,
    alpha: f64,
    timestamp: f64,
) -> Result<SteeringCommand, GuidanceError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(GuidanceError::InvalidSmoothing(alpha));
    }
    if !state.pose.is_proper(1e-6) || !state.pose.translation.iter().all(|v| v.is_finite()) {
        return Err(GuidanceError::InvalidPose);
    }
    let target = lesion.position;
    if !target.coords.iter().all(|v| v.is_finite()) {
        return Err(GuidanceError::NonFiniteLesion);
    }
    if (target - state.tip).norm() == 0.0 {
        return Err(GuidanceError::TargetReached);
    }
    let (raw_az, raw_el) = raw_angles(&state.pose, &target)?;
    let clamped = !limits.contains(raw_az, raw_el);

    let (mut az, mut el) = match prev {
        Some(p) => (
            alpha * raw_az + (1.0 - alpha) * p.azimuth_deg,
            alpha * raw_el + (1.0 - alpha) * p.elevation_deg,
        ),
        None => (raw_az, raw_el),
    };
    (az, el) = limits.clamp(az, el);
    if let (Phase::Inserting, Some(p)) = (state.phase, prev) {
        let cap = limits.delta_cap_deg;
        az = az.clamp(p.azimuth_deg - cap, p.azimuth_deg + cap);
        el = el.clamp(p.elevation_deg - cap, p.elevation_deg + cap);
        (az, el) = limits.clamp(az, el);
    }
    Ok(SteeringCommand {
        azimuth_deg: az,
        elevation_deg: el,
        clamped,
        timestamp,
    })
}

/// Angle in degrees between two non-zero vectors.
pub fn angle_between_deg(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let c = a.dot(b) / (a.norm() * b.norm());
    c.clamp(-1.0, 1.0).acos().to_degrees()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeedbackConfig {
    pub f_min_hz: f64,
    pub f_max_hz: f64,
    pub d_max_mm: f64,
    pub reach_threshold_mm: f64,
}

impl Default for FeedbackConfig {
    fn default() -> Self {
        Self {
            f_min_hz: 400.0,
            f_max_hz: 2000.0,
            d_max_mm: 50.0,
            reach_threshold_mm: 2.0,
        }
    }
}

impl FeedbackConfig {
    pub fn validate(&self) -> Result<(), GuidanceError> {
        if !(self.f_min_hz >= 0.0 && self.f_max_hz >= self.f_min_hz && self.f_max_hz.is_finite()) {
            return Err(GuidanceError::InvalidFeedback("need 0 ≤ f_min ≤ f_max"));
        }
        if !(self.d_max_mm > 0.0 && self.d_max_mm.is_finite()) {
            return Err(GuidanceError::InvalidFeedback("d_max must be positive"));
        }
        if !(self.reach_threshold_mm >= 0.0) {
            return Err(GuidanceError::InvalidFeedback("reach threshold must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeedbackState {
    pub distance_mm: f64,
    pub freq_hz: f64,
    pub aligned: bool,
    pub reached: bool,
}

/// Proximity tone for a tip–target distance. `aligned` is left false; the
/// caller owns alignment.
pub fn feedback(distance_mm: f64, cfg: &FeedbackConfig) -> Result<FeedbackState, GuidanceError> {
    if !(distance_mm >= 0.0) {
        return Err(GuidanceError::NegativeDistance(distance_mm));
    }
    let closeness = (1.0 - distance_mm / cfg.d_max_mm).clamp(0.0, 1.0);
    Ok(FeedbackState {
        distance_mm,
        freq_hz: cfg.f_min_hz + (cfg.f_max_hz - cfg.f_min_hz) * closeness,
        aligned: false,
        reached: distance_mm <= cfg.reach_threshold_mm,
    })
}

pub const COMMAND_LOG_HEADER: &str = "timestamp,azimuth_deg,elevation_deg,clamped,distance_mm,freq_hz,phase";

/// Append-only CSV log of steering commands.
pub struct CommandLog<W: Write> {
    out: W,
}

impl<W: Write> CommandLog<W> {
    pub fn new(mut out: W) -> io::Result<Self> {
        writeln!(out, "{COMMAND_LOG_HEADER}")?;
        Ok(Self { out })
    }

    pub fn append(&mut self, cmd: &SteeringCommand, fb: &FeedbackState, phase: Phase) -> io::Result<()> {
        writeln!(
            self.out,
            "{:.6},{:.6},{:.6},{},{:.6},{:.3},{}",
            cmd.timestamp,
            cmd.azimuth_deg,
            cmd.elevation_deg,
            cmd.clamped,
            fb.distance_mm,
            fb.freq_hz,
            phase.as_str()
        )
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}
