//! Virtual breast phantom with ground truth: surface markers, an internal
//! lesion, Gaussian-kernel deformation, a steerable needle device and
//! synthetic stereo observation.

use std::io::{self, Write};

use nalgebra::{Rotation3, Unit, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blobdetect::{Blob, GrayImage};
use crate::geom::{direction, look_rotation, project, Camera, Pixel, Point3, RigidTransform, StereoRig};
use crate::guidance::{gear_forward, GearRatios};
use crate::register::{MarkerModel, NamedPoint};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid phantom configuration: {0}")]
    InvalidConfig(String),
    #[error("could not place {0} markers with the requested separation")]
    PlacementFailed(usize),
    #[error("deformation kernel width must be positive and finite")]
    InvalidKernel,
    #[error("scene has no needle device")]
    NoDevice,
    #[error("needle advance must be non-negative, got {0}")]
    NegativeAdvance(f64),
    #[error("invalid noise configuration: {0}")]
    InvalidNoise(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub n_markers: usize,
    pub radius_mm: f64,
    /// Markers lie within this polar angle of the dome apex.
    pub max_polar_deg: f64,
    pub min_separation_mm: f64,
    pub lesion_depth_mm: f64,
    /// Largest polar angle of the lesion direction from the apex.
    pub lesion_polar_deg: f64,
    /// Camera-frame depth of the hemisphere centre.
    pub distance_mm: f64,
    pub max_tilt_deg: f64,
    pub max_offset_mm: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            n_markers: 10,
            radius_mm: 60.0,
            max_polar_deg: 90.0,
            min_separation_mm: 25.0,
            lesion_depth_mm: 25.0,
            lesion_polar_deg: 15.0,
            distance_mm: 600.0,
            max_tilt_deg: 10.0,
            max_offset_mm: 20.0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.to_string()));
        if self.n_markers < 4 {
            return bad("marker count must be at least 4");
        }
        if self.n_markers > crate::correspond::MAX_PERMUTATION_MARKERS {
            return bad("marker count exceeds the correspondence limit");
        }
        if !(self.radius_mm > 0.0) || !(self.distance_mm > self.radius_mm) {
            return bad("need 0 < radius < distance");
        }
        if !(self.lesion_depth_mm > 0.0 && self.lesion_depth_mm < self.radius_mm) {
            return bad("lesion depth must lie inside the phantom");
        }
        if !(self.max_polar_deg > 0.0 && self.max_polar_deg <= 90.0) {
            return bad("max polar angle must lie in (0, 90]");
        }
        if !(self.min_separation_mm >= 0.0) {
            return bad("min separation must be non-negative");
        }
        Ok(())
    }
}

/// Rest configuration: the marker model plus its placement in the operating
/// space (left camera frame).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phantom {
    pub model: MarkerModel,
    pub pose: RigidTransform,
}

impl Phantom {
    pub fn rest_markers(&self) -> Vec<Point3> {
        self.model.markers.iter().map(|m| self.pose.apply(&m.point())).collect()
    }

    pub fn rest_lesions(&self) -> Vec<Point3> {
        self.model.lesions.iter().map(|l| self.pose.apply(&l.point())).collect()
    }

    pub fn centre(&self) -> Point3 {
        Point3::from(self.pose.translation)
    }
}

fn random_unit<R: Rng + ?Sized>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

/// Point on the dome at polar angle `polar` from the apex (`-z`).
fn dome_point(radius: f64, polar: f64, azimuth: f64) -> Point3 {
    Point3::new(
        radius * polar.sin() * azimuth.cos(),
        radius * polar.sin() * azimuth.sin(),
        -radius * polar.cos(),
    )
}

fn random_small_rotation<R: Rng + ?Sized>(rng: &mut R, max_deg: f64) -> Rotation3<f64> {
    let angle = rng.random_range(0.0..=max_deg.max(0.0)).to_radians();
    Rotation3::from_axis_angle(&Unit::new_normalize(random_unit(rng)), angle)
}

/// Deterministic phantom for `seed`. The model frame has the hemisphere centre
/// at the origin and the dome apex toward `-z`, facing the cameras.
pub fn make_phantom(cfg: &PhantomConfig, seed: u64) -> Result<Phantom, SimError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_polar = cfg.max_polar_deg.to_radians();
    let cos_max = max_polar.cos();
    let mut markers: Vec<Point3> = Vec::with_capacity(cfg.n_markers);
    let mut attempts = 0;
    while markers.len() < cfg.n_markers {
        attempts += 1;
        if attempts > 20_000 {
            return Err(SimError::PlacementFailed(cfg.n_markers));
        }
        // Uniform on the spherical cap.
        let polar = rng.random_range(cos_max..=1.0f64).acos();
        let p = dome_point(cfg.radius_mm, polar, rng.random_range(0.0..std::f64::consts::TAU));
        if markers.iter().all(|q| (p - q).norm() >= cfg.min_separation_mm) {
            markers.push(p);
        }
    }
    let lesion_polar = rng.random_range(0.0..=cfg.lesion_polar_deg.to_radians());
    let lesion = dome_point(
        cfg.radius_mm - cfg.lesion_depth_mm,
        lesion_polar,
        rng.random_range(0.0..std::f64::consts::TAU),
    );

    let rotation = random_small_rotation(&mut rng, cfg.max_tilt_deg);
    let offset = Vector3::new(
        rng.random_range(-cfg.max_offset_mm..=cfg.max_offset_mm),
        rng.random_range(-cfg.max_offset_mm..=cfg.max_offset_mm),
        cfg.distance_mm,
    );
    let model = MarkerModel::new(
        markers
            .iter()
            .enumerate()
            .map(|(i, p)| NamedPoint::new(format!("m{}", i + 1), *p))
            .collect(),
        vec![NamedPoint::new("lesion", lesion)],
    )
    .map_err(|e| SimError::InvalidConfig(e.to_string()))?;
    Ok(Phantom {
        model,
        pose: RigidTransform::new(rotation.into_inner(), offset),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    pub center: Point3,
    pub amplitude: Vector3<f64>,
    pub sigma_mm: f64,
}

/// Sum of Gaussian displacement kernels in the operating space.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DeformationField {
    pub kernels: Vec<Kernel>,
}

impl DeformationField {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        for k in &self.kernels {
            let finite = k.center.coords.iter().chain(k.amplitude.iter()).all(|v| v.is_finite());
            if !(k.sigma_mm > 0.0 && k.sigma_mm.is_finite()) || !finite {
                return Err(SimError::InvalidKernel);
            }
        }
        Ok(())
    }

    pub fn displacement(&self, p: &Point3) -> Vector3<f64> {
        self.kernels.iter().fold(Vector3::zeros(), |acc, k| {
            let r2 = (p - k.center).norm_squared();
            acc + k.amplitude * (-r2 / (2.0 * k.sigma_mm * k.sigma_mm)).exp()
        })
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        p + self.displacement(p)
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            kernels: self
                .kernels
                .iter()
                .map(|k| Kernel {
                    amplitude: k.amplitude * s,
                    ..*k
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeformationConfig {
    pub n_kernels: usize,
    pub sigma_mm: [f64; 2],
    /// The field is scaled so the lesion moves by a norm drawn from this range.
    pub lesion_displacement_mm: [f64; 2],
    /// Kernel centres lie within this fraction of the phantom radius.
    pub center_radius_frac: f64,
}

impl Default for DeformationConfig {
    fn default() -> Self {
        Self {
            n_kernels: 3,
            sigma_mm: [40.0, 70.0],
            lesion_displacement_mm: [2.9, 5.7],
            center_radius_frac: 1.0,
        }
    }
}

impl DeformationConfig {
    pub fn none() -> Self {
        Self {
            n_kernels: 0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let [s0, s1] = self.sigma_mm;
        let [d0, d1] = self.lesion_displacement_mm;
        if self.n_kernels > 0 && !(s0 > 0.0 && s0 <= s1 && s1.is_finite()) {
            return Err(SimError::InvalidConfig("kernel width range must be positive".into()));
        }
        if !(d0 >= 0.0 && d0 <= d1 && d1.is_finite()) {
            return Err(SimError::InvalidConfig("displacement range must be non-negative".into()));
        }
        if !(self.center_radius_frac > 0.0 && self.center_radius_frac <= 1.0) {
            return Err(SimError::InvalidConfig("centre radius fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Random interior Gaussian-kernel field, scaled so the first lesion moves by
/// a norm drawn uniformly from `cfg.lesion_displacement_mm`.
pub fn random_field<R: Rng + ?Sized>(
    phantom: &Phantom,
    cfg: &DeformationConfig,
    rng: &mut R,
) -> Result<DeformationField, SimError> {
    cfg.validate()?;
    if cfg.n_kernels == 0 {
        return Ok(DeformationField::identity());
    }
    let radius = phantom
        .model
        .markers
        .iter()
        .map(|m| m.point().coords.norm())
        .fold(0.0, f64::max);
    let lesion = phantom.rest_lesions()[0];
    let target = rng.random_range(cfg.lesion_displacement_mm[0]..=cfg.lesion_displacement_mm[1]);
    loop {
        let kernels: Vec<Kernel> = (0..cfg.n_kernels)
            .map(|_| {
                let local = loop {
                    let p = Vector3::new(
                        rng.random_range(-1.0..=1.0),
                        rng.random_range(-1.0..=1.0),
                        rng.random_range(-1.0..=0.0),
                    );
                    if p.norm() <= 1.0 {
                        break p * cfg.center_radius_frac * radius;
                    }
                };
                Kernel {
                    center: phantom.pose.apply(&Point3::from(local)),
                    amplitude: random_unit(rng) * rng.random_range(0.5..=1.0),
                    sigma_mm: rng.random_range(cfg.sigma_mm[0]..=cfg.sigma_mm[1]),
                }
            })
            .collect();
        let field = DeformationField { kernels };
        let at_lesion = field.displacement(&lesion).norm();
        if at_lesion > 0.2 {
            return Ok(field.scaled(target / at_lesion));
        }
    }
}

/// Steerable needle device: marker asset in the device frame (pivot at the
/// origin, needle rest axis `+z`) and needle length beyond the pivot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeviceModel {
    pub markers: Vec<Point3>,
    pub needle_length_mm: f64,
    pub ratios: GearRatios,
}

impl Default for DeviceModel {
    fn default() -> Self {
        Self {
            markers: vec![
                Point3::new(40.0, 40.0, -75.0),
                Point3::new(-40.0, -20.0, -15.0),
                Point3::new(-35.0, -25.0, -75.0),
                Point3::new(-10.0, -15.0, -35.0),
            ],
            needle_length_mm: 100.0,
            ratios: GearRatios::default(),
        }
    }
}

impl DeviceModel {
    pub fn marker_model(&self) -> MarkerModel {
        MarkerModel::new(
            self.markers
                .iter()
                .enumerate()
                .map(|(i, p)| NamedPoint::new(format!("d{}", i + 1), *p))
                .collect(),
            vec![NamedPoint::new("tip", Point3::new(0.0, 0.0, self.needle_length_mm))],
        )
        .expect("device asset has at least four distinct markers")
    }
}

/// Device placed in the scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeedleDevice {
    pub model: DeviceModel,
    pub pose: RigidTransform,
    pub theta1_deg: f64,
    pub theta2_deg: f64,
    /// Advance of the needle beyond its initial extension.
    pub insertion_mm: f64,
}

impl NeedleDevice {
    pub fn angles(&self) -> (f64, f64) {
        gear_forward(self.theta1_deg, self.theta2_deg, &self.model.ratios)
    }

    pub fn axis(&self) -> Vector3<f64> {
        let (az, el) = self.angles();
        self.pose.apply_vector(&direction(az, el))
    }

    pub fn pivot(&self) -> Point3 {
        Point3::from(self.pose.translation)
    }

    pub fn tip(&self) -> Point3 {
        self.pivot() + self.axis() * (self.model.needle_length_mm + self.insertion_mm)
    }

    pub fn marker_positions(&self) -> Vec<Point3> {
        self.model.markers.iter().map(|m| self.pose.apply(m)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DevicePlacement {
    /// Angle between the approach direction and the camera axis.
    pub approach_deg: [f64; 2],
    /// Initial tip distance short of the lesion.
    pub standoff_mm: [f64; 2],
    /// Random initial misalignment of the device axis.
    pub max_misalignment_deg: f64,
}

impl Default for DevicePlacement {
    fn default() -> Self {
        Self {
            approach_deg: [25.0, 35.0],
            standoff_mm: [40.0, 50.0],
            max_misalignment_deg: 15.0,
        }
    }
}

/// Place `model` so its needle approaches `target` from the camera side.
pub fn place_device<R: Rng + ?Sized>(
    model: &DeviceModel,
    target: &Point3,
    placement: &DevicePlacement,
    rng: &mut R,
) -> NeedleDevice {
    let tilt = rng
        .random_range(placement.approach_deg[0]..=placement.approach_deg[1])
        .to_radians();
    let heading = rng.random_range(0.0..std::f64::consts::TAU);
    let approach = Vector3::new(tilt.sin() * heading.cos(), tilt.sin() * heading.sin(), tilt.cos());
    let standoff = rng.random_range(placement.standoff_mm[0]..=placement.standoff_mm[1]);
    let pivot = target - approach * (model.needle_length_mm + standoff);
    let aligned = look_rotation(&approach, &Vector3::new(0.0, -1.0, 0.0));
    let mis = random_small_rotation(rng, placement.max_misalignment_deg);
    NeedleDevice {
        model: model.clone(),
        pose: RigidTransform::new(mis.into_inner() * aligned, pivot.coords),
        theta1_deg: 0.0,
        theta2_deg: 0.0,
        insertion_mm: 0.0,
    }
}

/// Ground-truth world state at one time step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneState {
    pub markers: Vec<Point3>,
    pub lesions: Vec<Point3>,
    pub device: Option<NeedleDevice>,
    pub time_index: u64,
}

impl SceneState {
    /// Breast markers followed by device markers.
    pub fn all_markers(&self) -> Vec<Point3> {
        let mut v = self.markers.clone();
        if let Some(d) = &self.device {
            v.extend(d.marker_positions());
        }
        v
    }
}

/// Apply `field` to the phantom's rest configuration.
pub fn deform(phantom: &Phantom, field: &DeformationField) -> SceneState {
    SceneState {
        markers: phantom.rest_markers().iter().map(|p| field.apply(p)).collect(),
        lesions: phantom.rest_lesions().iter().map(|p| field.apply(p)).collect(),
        device: None,
        time_index: 0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NeedleTissue {
    /// Fraction of the advance transferred to the lesion at zero distance.
    pub stiffness: f64,
    pub decay_mm: f64,
    /// Relative amplitude of the push felt by surface markers.
    pub marker_coupling: f64,
}

impl Default for NeedleTissue {
    fn default() -> Self {
        Self {
            stiffness: 0.05,
            decay_mm: 20.0,
            marker_coupling: 0.3,
        }
    }
}

/// Advance the needle along its current axis, pushing tissue ahead of it.
pub fn insert_needle(state: &SceneState, advance_mm: f64, tissue: &NeedleTissue) -> Result<SceneState, SimError> {
    if !(advance_mm >= 0.0) {
        return Err(SimError::NegativeAdvance(advance_mm));
    }
    let device = state.device.as_ref().ok_or(SimError::NoDevice)?;
    let axis = device.axis();
    let tip = device.tip();
    let push = |p: &Point3, gain: f64| -> Point3 {
        let d = (tip - p).norm();
        p + axis * (gain * tissue.stiffness * advance_mm * (-d / tissue.decay_mm).exp())
    };
    let mut next = state.clone();
    next.lesions = state.lesions.iter().map(|p| push(p, 1.0)).collect();
    next.markers = state.markers.iter().map(|p| push(p, tissue.marker_coupling)).collect();
    if let Some(d) = next.device.as_mut() {
        d.insertion_mm += advance_mm;
    }
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    /// Standard deviation of centroid noise per coordinate and view.
    pub sigma_px: f64,
    pub dropout: f64,
    /// Mean number of spurious blobs per image.
    pub spurious_rate: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            sigma_px: 0.15,
            dropout: 0.0,
            spurious_rate: 0.0,
        }
    }
}

impl NoiseConfig {
    pub fn none() -> Self {
        Self {
            sigma_px: 0.0,
            dropout: 0.0,
            spurious_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.sigma_px >= 0.0 && self.sigma_px.is_finite()) {
            return Err(SimError::InvalidNoise("sigma_px must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.dropout) {
            return Err(SimError::InvalidNoise("dropout must lie in [0, 1]"));
        }
        if !(self.spurious_rate >= 0.0 && self.spurious_rate.is_finite()) {
            return Err(SimError::InvalidNoise("spurious rate must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationMode {
    Pixel,
    #[default]
    Centroid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub marker_radius_mm: f64,
    pub supersample: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            marker_radius_mm: 5.0,
            supersample: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StereoFrame {
    Centroids { left: Vec<Blob>, right: Vec<Blob> },
    Images { left: GrayImage, right: GrayImage },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub frame: StereoFrame,
    /// Scene marker indices (see [`SceneState::all_markers`]) outside either
    /// camera's view.
    pub excluded: Vec<usize>,
    pub dropped: Vec<usize>,
}

/// Draw an anti-aliased disc, adding coverage-weighted intensity.
pub fn render_disc(img: &mut GrayImage, centre: &Pixel, radius_px: f64, intensity: u8, supersample: usize) {
    let ss = supersample.max(1);
    let x0 = (centre.u - radius_px - 1.0).floor().max(0.0) as usize;
    let y0 = (centre.v - radius_px - 1.0).floor().max(0.0) as usize;
    let x1 = ((centre.u + radius_px + 1.0).ceil().max(0.0) as usize).min(img.width().saturating_sub(1));
    let y1 = ((centre.v + radius_px + 1.0).ceil().max(0.0) as usize).min(img.height().saturating_sub(1));
    let r2 = radius_px * radius_px;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let mut hits = 0usize;
            for sy in 0..ss {
                for sx in 0..ss {
                    let px = x as f64 - 0.5 + (sx as f64 + 0.5) / ss as f64;
                    let py = y as f64 - 0.5 + (sy as f64 + 0.5) / ss as f64;
                    if (px - centre.u).powi(2) + (py - centre.v).powi(2) <= r2 {
                        hits += 1;
                    }
                }
            }
            if hits > 0 {
                img.add(x, y, ((intensity as usize * hits) / (ss * ss)) as u8);
            }
        }
    }
}

/// Synthetic stereo view of every marker in `state`; deterministic in `seed`.
pub fn observe(
    state: &SceneState,
    rig: &StereoRig,
    noise: &NoiseConfig,
    mode: ObservationMode,
    render: &RenderConfig,
    seed: u64,
) -> Observation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, noise.sigma_px).expect("sigma validated non-negative");
    let mut excluded = Vec::new();
    let mut dropped = Vec::new();
    let mut left = Vec::new();
    let mut right = Vec::new();
    for (i, p) in state.all_markers().iter().enumerate() {
        let projected = (project(p, rig, Camera::Left), project(p, rig, Camera::Right));
        let (Ok(l), Ok(r)) = projected else {
            excluded.push(i);
            continue;
        };
        let depth = rig.pose(Camera::Left).inverse().apply(p).z;
        let radius = render.marker_radius_mm * rig.focal_px / depth;
        let margin = |px: &Pixel| {
            px.u - radius >= -0.5
                && px.v - radius >= -0.5
                && px.u + radius <= rig.width as f64 - 0.5
                && px.v + radius <= rig.height as f64 - 0.5
        };
        if !margin(&l) || !margin(&r) {
            excluded.push(i);
            continue;
        }
        if noise.dropout > 0.0 && rng.random_bool(noise.dropout) {
            dropped.push(i);
            continue;
        }
        let mut noisy = |px: Pixel| Pixel::new(px.u + jitter.sample(&mut rng), px.v + jitter.sample(&mut rng));
        left.push(Blob::ideal(noisy(l), radius));
        right.push(Blob::ideal(noisy(r), radius));
    }
    if noise.spurious_rate > 0.0 {
        let count = Poisson::new(noise.spurious_rate).expect("rate validated positive");
        for view in [&mut left, &mut right] {
            let n = count.sample(&mut rng) as usize;
            for _ in 0..n {
                let radius = rng.random_range(3.0..8.0);
                let c = Pixel::new(
                    rng.random_range(radius..rig.width as f64 - radius),
                    rng.random_range(radius..rig.height as f64 - radius),
                );
                view.push(Blob::ideal(c, radius));
            }
        }
    }
    left.shuffle(&mut rng);
    right.shuffle(&mut rng);

    let frame = match mode {
        ObservationMode::Centroid => StereoFrame::Centroids { left, right },
        ObservationMode::Pixel => {
            let draw = |blobs: &[Blob]| {
                let mut img = GrayImage::new(rig.width as usize, rig.height as usize);
                for b in blobs {
                    let r = (b.perimeter / std::f64::consts::TAU).max(0.5);
                    render_disc(&mut img, &b.centroid, r, 255, render.supersample);
                }
                img
            };
            StereoFrame::Images {
                left: draw(&left),
                right: draw(&right),
            }
        }
    };
    Observation {
        frame,
        excluded,
        dropped,
    }
}

/// Per-frame ground-truth trace: `t, lesion xyz, marker xyz…`.
pub struct TraceWriter<W: Write> {
    out: W,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(mut out: W, n_markers: usize) -> io::Result<Self> {
        write!(out, "t,lesion_x,lesion_y,lesion_z")?;
        for i in 0..n_markers {
            write!(out, ",m{i}_x,m{i}_y,m{i}_z")?;
        }
        writeln!(out)?;
        Ok(Self { out })
    }

    pub fn record(&mut self, t: f64, lesion: &Point3, markers: &[Point3]) -> io::Result<()> {
        write!(self.out, "{t:.6},{:.6},{:.6},{:.6}", lesion.x, lesion.y, lesion.z)?;
        for m in markers {
            write!(self.out, ",{:.6},{:.6},{:.6}", m.x, m.y, m.z)?;
        }
        writeln!(self.out)
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}
