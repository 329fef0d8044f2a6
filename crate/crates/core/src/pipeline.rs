//! One simulated tracking-and-guidance loop: observe the scene, segment and
//! triangulate markers, label them, register the breast model, locate the
//! device and steer the needle.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blobdetect::{detect_blobs, stereo_candidates, stereo_match, Blob, BlobFilterParams};
use crate::correspond::{
    arbitrate, build_edm, marker_discrepancy, match_permutation, match_profile, mean_squared_discrepancy,
    prune_inconsistent, resolve, Edm, Labeling, TrackState,
};
use crate::geom::{direction, triangulate, Point3, RigidTransform, StereoRig};
use crate::guidance::{
    angle_between_deg, compute_command, feedback, gear_inverse, AngleLimits, DeviceState, FeedbackConfig,
    FeedbackState, GuidanceError, Phase, SteeringCommand,
};
use crate::phantomsim::{
    deform, insert_needle, make_phantom, observe, place_device, random_field, DeformationConfig, DeformationField,
    DeviceModel, DevicePlacement, NeedleTissue, NoiseConfig, ObservationMode, Phantom, PhantomConfig,
    RenderConfig, SceneState, SimError, StereoFrame,
};
use crate::register::{fit_transform, procrustes, LesionEstimate, MarkerModel, TransformKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("needle can only advance while inserting")]
    NotInserting,
    #[error("unknown lesion id {0:?}")]
    UnknownLesion(String),
}

/// Every tunable of a simulated procedure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub rig: StereoRig,
    pub phantom: PhantomConfig,
    pub deformation: DeformationConfig,
    pub device: DeviceModel,
    pub placement: DevicePlacement,
    pub tissue: NeedleTissue,
    pub noise: NoiseConfig,
    pub observation: ObservationMode,
    pub render: RenderConfig,
    pub blob: BlobFilterParams,
    pub row_tol_px: f64,
    /// Alternative stereo pairings whose row discrepancy is within this are
    /// triangulated too and left for the distance matching to reject.
    pub stereo_ambiguity_px: f64,
    /// Labels whose mean absolute distance discrepancy exceeds this are dropped.
    pub gate_mm: f64,
    pub min_breast_markers: usize,
    pub tps_lambda: f64,
    /// Registration used for steering.
    pub guide_with: TransformKind,
    pub alpha: f64,
    pub limits: AngleLimits,
    pub feedback: FeedbackConfig,
    pub align_tol_deg: f64,
    pub tick_hz: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            rig: StereoRig::default(),
            phantom: PhantomConfig::default(),
            deformation: DeformationConfig::default(),
            device: DeviceModel::default(),
            placement: DevicePlacement::default(),
            tissue: NeedleTissue::default(),
            noise: NoiseConfig::default(),
            observation: ObservationMode::Centroid,
            render: RenderConfig::default(),
            blob: BlobFilterParams::default(),
            row_tol_px: 1.5,
            stereo_ambiguity_px: 0.75,
            gate_mm: 8.0,
            min_breast_markers: 4,
            tps_lambda: 0.0,
            guide_with: TransformKind::Tps,
            alpha: 0.3,
            limits: AngleLimits::default(),
            feedback: FeedbackConfig::default(),
            align_tol_deg: 1.0,
            tick_hz: 30.0,
        }
    }
}

impl SimConfig {
    /// No observation noise, no deformation and a needle that does not push
    /// tissue.
    pub fn noiseless() -> Self {
        Self {
            deformation: DeformationConfig::none(),
            tissue: NeedleTissue {
                stiffness: 0.0,
                ..NeedleTissue::default()
            },
            noise: NoiseConfig::none(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::InvalidConfig(m));
        self.rig.validate().map_err(|e| PipelineError::InvalidConfig(e.to_string()))?;
        self.phantom.validate()?;
        self.deformation.validate()?;
        self.noise.validate()?;
        self.blob.validate().map_err(|e| PipelineError::InvalidConfig(e.to_string()))?;
        self.limits.validate().map_err(|e| PipelineError::InvalidConfig(e.to_string()))?;
        self.feedback.validate().map_err(|e| PipelineError::InvalidConfig(e.to_string()))?;
        self.device.ratios.validate().map_err(|e| PipelineError::InvalidConfig(e.to_string()))?;
        if self.device.markers.len() < 3 {
            return bad("device needs at least three markers".into());
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad(format!("alpha must lie in (0, 1], got {}", self.alpha));
        }
        if !(self.tps_lambda >= 0.0) {
            return bad("tps_lambda must be non-negative".into());
        }
        if self.min_breast_markers < 4 {
            return bad("min_breast_markers must be at least 4".into());
        }
        if !(self.tick_hz > 0.0) || !(self.row_tol_px >= 0.0) || !(self.gate_mm > 0.0) {
            return bad("tick_hz, row_tol_px and gate_mm must be positive".into());
        }
        if !(self.align_tol_deg > 0.0) {
            return bad("align_tol_deg must be positive".into());
        }
        Ok(())
    }
}

/// Stream seed for frame `index` of a run seeded with `seed`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(0x2545_F491_4F6C_DD1D);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Everything the loop computed in one tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub tick: u64,
    pub time_s: f64,
    pub phase: Phase,
    pub reconstructed: usize,
    /// `(model marker index, position)`.
    pub breast_markers: Vec<(usize, Point3)>,
    pub device_markers: Vec<(usize, Point3)>,
    pub lesion_tps: Option<LesionEstimate>,
    pub lesion_rigid: Option<LesionEstimate>,
    pub device_pose: Option<RigidTransform>,
    pub tip_estimate: Option<Point3>,
    pub command: Option<SteeringCommand>,
    pub feedback: Option<FeedbackState>,
    pub alignment_error_deg: Option<f64>,
    /// Estimated distance left along the needle axis.
    pub remaining_mm: Option<f64>,
    pub match_residual: f64,
    pub registration_residual: Option<f64>,
    pub frames_since_valid: u64,
    pub reached_signal: bool,
    pub true_lesion: Point3,
    pub true_tip: Point3,
    pub gear_deg: (f64, f64),
}

impl FrameResult {
    pub fn valid(&self) -> bool {
        self.lesion_tps.is_some() || self.lesion_rigid.is_some()
    }
}

pub struct Simulation {
    cfg: SimConfig,
    seed: u64,
    phantom: Phantom,
    field: DeformationField,
    scene: SceneState,
    breast_edm: Edm,
    device_model: MarkerModel,
    device_edm: Edm,
    breast_track: TrackState,
    device_track: TrackState,
    lesion: usize,
    phase: Phase,
    align_hold: bool,
    prev_command: Option<SteeringCommand>,
    last_lesion: Option<LesionEstimate>,
    tick: u64,
    frames_since_valid: u64,
}

impl Simulation {
    pub fn new(cfg: SimConfig, seed: u64) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let phantom = make_phantom(&cfg.phantom, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX));
        let field = random_field(&phantom, &cfg.deformation, &mut rng)?;
        let mut scene = deform(&phantom, &field);
        scene.device = Some(place_device(&cfg.device, &scene.lesions[0], &cfg.placement, &mut rng));
        let breast_edm = build_edm(&phantom.model.marker_points()).expect("at least four markers");
        let device_model = cfg.device.marker_model();
        let device_edm = build_edm(&device_model.marker_points()).expect("at least three markers");
        Ok(Self {
            breast_track: TrackState::new(breast_edm.clone()),
            device_track: TrackState::new(device_edm.clone()),
            cfg,
            seed,
            phantom,
            field,
            scene,
            breast_edm,
            device_model,
            device_edm,
            lesion: 0,
            phase: Phase::Positioning,
            align_hold: false,
            prev_command: None,
            last_lesion: None,
            tick: 0,
            frames_since_valid: 0,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn phantom(&self) -> &Phantom {
        &self.phantom
    }

    pub fn field(&self) -> &DeformationField {
        &self.field
    }

    pub fn scene(&self) -> &SceneState {
        &self.scene
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn set_phase(&mut self, phase: Phase) {
        self.phase = phase;
    }

    pub fn align_hold(&self) -> bool {
        self.align_hold
    }

    pub fn set_align_hold(&mut self, hold: bool) {
        self.align_hold = hold;
    }

    pub fn selected_lesion(&self) -> usize {
        self.lesion
    }

    pub fn select_lesion(&mut self, id: &str) -> Result<(), PipelineError> {
        let index = self
            .phantom
            .model
            .lesion_index(id)
            .ok_or_else(|| PipelineError::UnknownLesion(id.to_string()))?;
        if index != self.lesion {
            self.lesion = index;
            self.last_lesion = None;
        }
        Ok(())
    }

    pub fn config_mut(&mut self) -> &mut SimConfig {
        &mut self.cfg
    }

    pub fn device(&self) -> &crate::phantomsim::NeedleDevice {
        self.scene.device.as_ref().expect("simulation always places a device")
    }

    /// Rest (undeformed) position of the selected lesion.
    pub fn rest_lesion(&self) -> Point3 {
        self.phantom.rest_lesions()[self.lesion]
    }

    pub fn true_lesion(&self) -> Point3 {
        self.scene.lesions[self.lesion]
    }

    /// Push the needle forward by `mm`; only allowed while inserting.
    pub fn advance(&mut self, mm: f64) -> Result<(), PipelineError> {
        if self.phase != Phase::Inserting {
            return Err(PipelineError::NotInserting);
        }
        self.scene = insert_needle(&self.scene, mm, &self.cfg.tissue)?;
        Ok(())
    }

    fn blobs(&self, frame: StereoFrame) -> (Vec<Blob>, Vec<Blob>) {
        match frame {
            StereoFrame::Centroids { left, right } => (left, right),
            StereoFrame::Images { left, right } => {
                (detect_blobs(&left, &self.cfg.blob), detect_blobs(&right, &self.cfg.blob))
            }
        }
    }

    fn label(rm: &Edm, mm: &Edm, track: &mut TrackState, points: &[Point3], gate: f64) -> Labeling {
        let a = match_profile(rm, mm);
        let b = match_permutation(rm, mm).unwrap_or_else(|_| a.clone());
        let merged = resolve(&a, &b, track, points);
        prune_inconsistent(&merged, rm, mm, gate)
    }

    /// Run one tick of the loop.
    pub fn step(&mut self) -> FrameResult {
        let cfg = &self.cfg;
        let tick = self.tick;
        let time_s = tick as f64 / cfg.tick_hz;
        let obs = observe(
            &self.scene,
            &cfg.rig,
            &cfg.noise,
            cfg.observation,
            &cfg.render,
            derive_seed(self.seed, tick),
        );
        let (left, right) = self.blobs(obs.frame);
        let cfg = &self.cfg;
        let mut sources: Vec<(usize, usize)> = stereo_match(&left, &right, &cfg.rig, cfg.row_tol_px);
        for (i, j, dv) in stereo_candidates(&left, &right, &cfg.rig, cfg.row_tol_px) {
            if dv <= cfg.stereo_ambiguity_px && !sources.contains(&(i, j)) {
                sources.push((i, j));
            }
        }
        let (sources, points): (Vec<(usize, usize)>, Vec<Point3>) = sources
            .into_iter()
            .filter_map(|(i, j)| {
                triangulate(&left[i].centroid, &right[j].centroid, &cfg.rig)
                    .ok()
                    .map(|p| ((i, j), p))
            })
            .unzip();

        let (mut breast, mut device) = (Labeling::empty(self.breast_edm.n()), Labeling::empty(self.device_edm.n()));
        if let Ok(rm) = build_edm(&points) {
            breast = Self::label(&rm, &self.breast_edm, &mut self.breast_track, &points, cfg.gate_mm);
            device = Self::label(&rm, &self.device_edm, &mut self.device_track, &points, cfg.gate_mm);
            arbitrate(&mut breast, &mut device, &rm, &self.breast_edm, &self.device_edm);
            exclusive_blobs(&mut breast, &mut device, &sources, &rm, &self.breast_edm, &self.device_edm);
        }
        let breast_markers: Vec<(usize, Point3)> = breast.pairs().map(|(m, r)| (m, points[r])).collect();
        let device_markers: Vec<(usize, Point3)> = device.pairs().map(|(m, r)| (m, points[r])).collect();

        let mut lesion_tps = None;
        let mut lesion_rigid = None;
        let mut registration_residual = None;
        if breast_markers.len() >= cfg.min_breast_markers {
            let model = &self.phantom.model;
            let target = model.lesions[self.lesion].point();
            if let Ok((t, res)) = fit_transform(model, &breast_markers, TransformKind::Tps, cfg.tps_lambda) {
                lesion_tps = Some(LesionEstimate {
                    position: t.apply(&target),
                    kind: TransformKind::Tps,
                    residual_mm: res,
                });
            }
            if let Ok((t, res)) = fit_transform(model, &breast_markers, TransformKind::Rigid, 0.0) {
                lesion_rigid = Some(LesionEstimate {
                    position: t.apply(&target),
                    kind: TransformKind::Rigid,
                    residual_mm: res,
                });
                registration_residual = Some(res);
            }
        }
        let guide = match cfg.guide_with {
            TransformKind::Tps => lesion_tps,
            TransformKind::Rigid => lesion_rigid,
        };
        if guide.is_some() {
            self.frames_since_valid = 0;
            self.last_lesion = guide;
        } else {
            self.frames_since_valid += 1;
        }

        let device_pose = if device_markers.len() >= 3 {
            let src: Vec<Point3> = device_markers.iter().map(|(m, _)| self.device_model.markers[*m].point()).collect();
            let dst: Vec<Point3> = device_markers.iter().map(|(_, p)| *p).collect();
            procrustes(&src, &dst).ok()
        } else {
            None
        };

        let mut command = None;
        let mut reached_signal = false;
        if let (true, Some(pose), Some(lesion)) = (self.align_hold, device_pose, self.last_lesion) {
            let dev = self.scene.device.as_ref().expect("device placed");
            let (az, el) = dev.angles();
            let extension = dev.model.needle_length_mm + dev.insertion_mm;
            let state = DeviceState {
                pose,
                theta1_deg: dev.theta1_deg,
                theta2_deg: dev.theta2_deg,
                tip: pose.apply(&Point3::from(direction(az, el) * extension)),
                phase: self.phase,
            };
            match compute_command(&state, &lesion, &cfg.limits, self.prev_command.as_ref(), cfg.alpha, time_s) {
                Ok(cmd) => {
                    let (t1, t2) = gear_inverse(cmd.azimuth_deg, cmd.elevation_deg, &dev.model.ratios, &cfg.limits)
                        .expect("commands lie within the limits");
                    let dev = self.scene.device.as_mut().expect("device placed");
                    dev.theta1_deg = t1;
                    dev.theta2_deg = t2;
                    self.prev_command = Some(cmd);
                    command = Some(cmd);
                }
                Err(GuidanceError::TargetReached) => reached_signal = true,
                Err(e) => log::debug!("tick {tick}: no steering command: {e}"),
            }
        }

        let dev = self.scene.device.as_ref().expect("device placed");
        let (az, el) = dev.angles();
        let extension = dev.model.needle_length_mm + dev.insertion_mm;
        let mut tip_estimate = None;
        let mut fb = None;
        let mut alignment_error_deg = None;
        let mut remaining_mm = None;
        if let Some(pose) = device_pose {
            let axis = pose.apply_vector(&direction(az, el));
            let tip = pose.apply(&Point3::from(direction(az, el) * extension));
            tip_estimate = Some(tip);
            if let Some(lesion) = self.last_lesion {
                let to_target: Vector3<f64> = lesion.position - tip;
                let distance = to_target.norm();
                let mut state = feedback(distance, &cfg.feedback).expect("distance is non-negative");
                if distance > 0.0 {
                    let err = angle_between_deg(&axis, &to_target);
                    alignment_error_deg = Some(err);
                    state.aligned = err <= cfg.align_tol_deg;
                } else {
                    state.aligned = true;
                }
                remaining_mm = Some(to_target.dot(&axis));
                fb = Some(state);
            }
        }

        let result = FrameResult {
            tick,
            time_s,
            phase: self.phase,
            reconstructed: points.len(),
            breast_markers,
            device_markers,
            lesion_tps,
            lesion_rigid,
            device_pose,
            tip_estimate,
            command,
            feedback: fb,
            alignment_error_deg,
            remaining_mm,
            match_residual: breast.residual,
            registration_residual,
            frames_since_valid: self.frames_since_valid,
            reached_signal,
            true_lesion: self.true_lesion(),
            true_tip: dev.tip(),
            gear_deg: (dev.theta1_deg, dev.theta2_deg),
        };
        self.tick += 1;
        self.scene.time_index = self.tick;
        result
    }
}

/// Two labelled points triangulated from a shared image blob cannot both be
/// markers; the label with the larger discrepancy is dropped until every blob
/// backs at most one label.
fn exclusive_blobs(
    breast: &mut Labeling,
    device: &mut Labeling,
    sources: &[(usize, usize)],
    rm: &Edm,
    mm_breast: &Edm,
    mm_device: &Edm,
) {
    loop {
        let labels: Vec<(bool, usize, usize)> = breast
            .pairs()
            .map(|(m, r)| (true, m, r))
            .chain(device.pairs().map(|(m, r)| (false, m, r)))
            .collect();
        let conflict = labels.iter().enumerate().find_map(|(x, a)| {
            labels[x + 1..].iter().find_map(|b| {
                let (sa, sb) = (sources[a.2], sources[b.2]);
                (a.2 != b.2 && (sa.0 == sb.0 || sa.1 == sb.1)).then_some((*a, *b))
            })
        });
        let Some((a, b)) = conflict else { break };
        let cost = |(is_breast, m, _): (bool, usize, usize), breast: &Labeling, device: &Labeling| {
            if is_breast {
                marker_discrepancy(breast, m, rm, mm_breast)
            } else {
                marker_discrepancy(device, m, rm, mm_device)
            }
        };
        let loser = if cost(a, breast, device) <= cost(b, breast, device) { b } else { a };
        if loser.0 {
            breast.assignment[loser.1] = None;
        } else {
            device.assignment[loser.1] = None;
        }
    }
    breast.residual = mean_squared_discrepancy(&breast.assignment, rm, mm_breast);
    device.residual = mean_squared_discrepancy(&device.assignment, rm, mm_device);
}
