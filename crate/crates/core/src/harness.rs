//! Simulated biopsy trials and experiment statistics.
//!
//! A trial runs the closed loop with a scripted operator: hold the align
//! button until the needle settles, then advance at a steady speed until the
//! estimated remaining distance vanishes. Estimation errors of both
//! registrations are logged every valid frame against ground truth.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::needle_rotation;
use crate::guidance::Phase;
use crate::pipeline::{derive_seed, FrameResult, PipelineError, SimConfig, Simulation};
use crate::stats::{spearman, wilcoxon_signed_rank, StatsError, WilcoxonResult};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("need at least two trials, got {0}")]
    TooFewTrials(usize),
    #[error("all {0} trials failed")]
    AllFailed(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Scripted operator behaviour.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OperatorConfig {
    pub advance_speed_mm_s: f64,
    /// Consecutive aligned frames before insertion starts.
    pub settle_frames: u32,
    /// Insertion starts after this many positioning frames even without a
    /// settled alignment.
    pub max_positioning_frames: u64,
    /// Insertion stops once the estimated distance left is within this.
    pub stop_tolerance_mm: f64,
    pub max_frames: u64,
    /// Consecutive frames without a lesion estimate before the trial fails.
    pub max_invalid_frames: u64,
}

impl Default for OperatorConfig {
    fn default() -> Self {
        Self {
            advance_speed_mm_s: 10.0,
            settle_frames: 5,
            max_positioning_frames: 90,
            stop_tolerance_mm: 0.05,
            max_frames: 1800,
            max_invalid_frames: 30,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "check")]
pub enum Check {
    /// Mean TPS norm error below mean rigid norm error.
    TpsBeatsRigid,
    WilcoxonBelow { alpha: f64 },
    TargetingNormAtMost { mm: f64 },
    /// Mean lesion displacement norm within `rel_tol` of `target_mm`.
    DisplacementNear { target_mm: f64, rel_tol: f64 },
    /// Camera-z is the largest mean absolute targeting component.
    DepthDominance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub sim: SimConfig,
    pub operator: OperatorConfig,
    pub checks: Vec<Check>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            operator: OperatorConfig::default(),
            checks: vec![
                Check::TpsBeatsRigid,
                Check::WilcoxonBelow { alpha: 0.05 },
                Check::TargetingNormAtMost { mm: 3.0 },
                Check::DisplacementNear {
                    target_mm: 4.3,
                    rel_tol: 0.3,
                },
                Check::DepthDominance,
            ],
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.sim.validate()?;
        let op = &self.operator;
        if !(op.advance_speed_mm_s > 0.0) || !(op.stop_tolerance_mm >= 0.0) || op.max_frames == 0 {
            return Err(HarnessError::InvalidConfig(
                "operator speed and frame cap must be positive, stop tolerance non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "reason")]
pub enum TrialStatus {
    Reached,
    StepCap,
    Failed(String),
}

impl TrialStatus {
    pub fn label(&self) -> &'static str {
        match self {
            TrialStatus::Reached => "reached",
            TrialStatus::StepCap => "step_cap",
            TrialStatus::Failed(_) => "failed",
        }
    }

    pub fn completed(&self) -> bool {
        !matches!(self, TrialStatus::Failed(_))
    }
}

/// Per-trial mean absolute components and mean norm of an error series.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub abs_mean: [f64; 3],
    pub norm_mean: f64,
}

impl ErrorSummary {
    pub fn of(errors: &[Vector3<f64>]) -> Self {
        if errors.is_empty() {
            return Self::default();
        }
        let n = errors.len() as f64;
        let mut abs_mean = [0.0; 3];
        let mut norm_mean = 0.0;
        for e in errors {
            for k in 0..3 {
                abs_mean[k] += e[k].abs() / n;
            }
            norm_mean += e.norm() / n;
        }
        Self { abs_mean, norm_mean }
    }

    pub fn columns(&self) -> [f64; 4] {
        [self.abs_mean[0], self.abs_mean[1], self.abs_mean[2], self.norm_mean]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetError {
    pub d: Vector3<f64>,
    pub norm: f64,
}

impl TargetError {
    pub fn new(d: Vector3<f64>) -> Self {
        Self { d, norm: d.norm() }
    }

    pub fn columns(&self) -> [f64; 4] {
        [self.d.x.abs(), self.d.y.abs(), self.d.z.abs(), self.norm]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub index: usize,
    pub seed: u64,
    pub status: TrialStatus,
    pub frames: u64,
    pub valid_frames: u64,
    /// Estimated minus true lesion position, one entry per valid frame.
    pub tps_errors: Vec<Vector3<f64>>,
    pub rigid_errors: Vec<Vector3<f64>>,
    /// True lesion position minus its rest position, per valid frame.
    pub displacements: Vec<Vector3<f64>>,
    /// Final tip minus true lesion in the needle frame (`z` along the needle).
    pub target_needle: TargetError,
    pub target_camera: TargetError,
}

impl TrialRecord {
    pub fn tps(&self) -> ErrorSummary {
        ErrorSummary::of(&self.tps_errors)
    }

    pub fn rigid(&self) -> ErrorSummary {
        ErrorSummary::of(&self.rigid_errors)
    }

    pub fn displacement(&self) -> ErrorSummary {
        ErrorSummary::of(&self.displacements)
    }
}

/// Run one closed-loop trial.
pub fn run_trial(cfg: &ExperimentConfig, index: usize, seed: u64) -> Result<TrialRecord, HarnessError> {
    run_trial_observed(cfg, index, seed, |_, _| {})
}

/// [`run_trial`] calling `observer` after every simulated frame.
pub fn run_trial_observed<F>(
    cfg: &ExperimentConfig,
    index: usize,
    seed: u64,
    mut observer: F,
) -> Result<TrialRecord, HarnessError>
where
    F: FnMut(&Simulation, &FrameResult),
{
    let op = cfg.operator;
    let mut sim = Simulation::new(cfg.sim.clone(), seed)?;
    let rest = sim.rest_lesion();
    let dt = 1.0 / cfg.sim.tick_hz;
    let step_mm = op.advance_speed_mm_s * dt;

    let mut tps_errors = Vec::new();
    let mut rigid_errors = Vec::new();
    let mut displacements = Vec::new();
    let mut settled = 0u32;
    let mut status = TrialStatus::StepCap;
    let mut frames = 0;

    sim.set_align_hold(true);
    while frames < op.max_frames {
        let r = sim.step();
        observer(&sim, &r);
        frames += 1;
        if let (Some(t), Some(g)) = (r.lesion_tps, r.lesion_rigid) {
            tps_errors.push(t.position - r.true_lesion);
            rigid_errors.push(g.position - r.true_lesion);
            displacements.push(r.true_lesion - rest);
        }
        if r.frames_since_valid > op.max_invalid_frames {
            status = TrialStatus::Failed(format!(
                "no lesion estimate for {} consecutive frames",
                r.frames_since_valid
            ));
            break;
        }
        if r.reached_signal {
            status = TrialStatus::Reached;
            break;
        }
        let Some(fb) = r.feedback else { continue };
        match sim.phase() {
            Phase::Positioning => {
                settled = if fb.aligned { settled + 1 } else { 0 };
                if settled >= op.settle_frames || frames >= op.max_positioning_frames {
                    sim.set_phase(Phase::Inserting);
                }
            }
            Phase::Inserting => {
                let remaining = r.remaining_mm.unwrap_or(0.0);
                if remaining <= op.stop_tolerance_mm {
                    status = TrialStatus::Reached;
                    break;
                }
                sim.advance(remaining.min(step_mm))?;
            }
        }
    }

    let dev = sim.device();
    let (az, el) = dev.angles();
    let offset = dev.tip() - sim.true_lesion();
    let needle_frame = dev.pose.rotation * needle_rotation(az, el);
    Ok(TrialRecord {
        index,
        seed,
        status,
        frames,
        valid_frames: tps_errors.len() as u64,
        tps_errors,
        rigid_errors,
        displacements,
        target_needle: TargetError::new(needle_frame.transpose() * offset),
        target_camera: TargetError::new(offset),
    })
}

/// One table row: per-column mean and max over trials.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub mean: [f64; 4],
    pub max: [f64; 4],
}

impl TableRow {
    fn of(rows: &[[f64; 4]]) -> Self {
        let n = rows.len() as f64;
        let mut mean = [0.0; 4];
        let mut max = [f64::NEG_INFINITY; 4];
        for r in rows {
            for k in 0..4 {
                mean[k] += r[k] / n;
                max[k] = max[k].max(r[k]);
            }
        }
        Self { mean, max }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimationTable {
    pub tps: TableRow,
    pub rigid: TableRow,
    pub target_displacement: TableRow,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetingTable {
    pub needle_frame: TableRow,
    pub camera_frame: TableRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub check: Check,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seed: u64,
    pub n_trials: usize,
    pub n_completed: usize,
    pub failures: Vec<(usize, String)>,
    pub table1: EstimationTable,
    pub table2: TargetingTable,
    /// TPS vs rigid per-trial mean norm errors; `None` when fewer than five
    /// pairs differ.
    pub wilcoxon: Option<WilcoxonResult>,
    /// Per-trial TPS norm error vs lesion displacement norm.
    pub spearman_rs: Option<f64>,
    pub checks: Vec<CheckOutcome>,
    pub notes: Vec<String>,
}

impl ExperimentReport {
    pub fn all_checks_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Seed of trial `index` in an experiment seeded with `seed`.
pub fn trial_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, index as u64)
}

/// Run `n_trials` trials in parallel; results are ordered by trial index.
pub fn run_trials(cfg: &ExperimentConfig, n_trials: usize, seed: u64) -> Result<Vec<TrialRecord>, HarnessError> {
    cfg.validate()?;
    (0..n_trials)
        .into_par_iter()
        .map(|i| run_trial(cfg, i, trial_seed(seed, i)))
        .collect()
}

fn paired_wilcoxon(tps: &[f64], rigid: &[f64]) -> Option<WilcoxonResult> {
    match wilcoxon_signed_rank(tps, rigid) {
        Ok(w) => Some(w),
        Err(StatsError::InsufficientData { got: 0, .. }) => Some(WilcoxonResult {
            w: 0.0,
            w_plus: 0.0,
            w_minus: 0.0,
            n_effective: 0,
            p_two_sided: 1.0,
            exact: true,
        }),
        Err(_) => None,
    }
}

fn evaluate(check: Check, t1: &EstimationTable, t2: &TargetingTable, w: Option<&WilcoxonResult>) -> CheckOutcome {
    let (passed, detail) = match check {
        Check::TpsBeatsRigid => (
            t1.tps.mean[3] < t1.rigid.mean[3],
            format!("tps {:.4} mm vs rigid {:.4} mm", t1.tps.mean[3], t1.rigid.mean[3]),
        ),
        Check::WilcoxonBelow { alpha } => match w {
            Some(w) => (w.p_two_sided < alpha, format!("p = {:.4e} (alpha {alpha})", w.p_two_sided)),
            None => (false, "test not computable".to_string()),
        },
        Check::TargetingNormAtMost { mm } => (
            t2.needle_frame.mean[3] <= mm,
            format!("mean targeting norm {:.4} mm (limit {mm})", t2.needle_frame.mean[3]),
        ),
        Check::DisplacementNear { target_mm, rel_tol } => {
            let d = t1.target_displacement.mean[3];
            (
                (d - target_mm).abs() <= rel_tol * target_mm,
                format!("mean displacement {d:.4} mm (target {target_mm} ± {:.0}%)", rel_tol * 100.0),
            )
        }
        Check::DepthDominance => {
            let m = t2.camera_frame.mean;
            (
                m[2] > m[0] && m[2] > m[1],
                format!("camera |d| means x {:.4}, y {:.4}, z {:.4}", m[0], m[1], m[2]),
            )
        }
    };
    CheckOutcome { check, passed, detail }
}

/// Aggregate completed trials into the two tables and the paired statistics.
pub fn aggregate(cfg: &ExperimentConfig, seed: u64, trials: &[TrialRecord]) -> Result<ExperimentReport, HarnessError> {
    let done: Vec<&TrialRecord> = trials.iter().filter(|t| t.status.completed() && t.valid_frames > 0).collect();
    if done.is_empty() {
        return Err(HarnessError::AllFailed(trials.len()));
    }
    let failures = trials
        .iter()
        .filter(|t| !(t.status.completed() && t.valid_frames > 0))
        .map(|t| {
            let reason = match &t.status {
                TrialStatus::Failed(r) => r.clone(),
                _ => "no valid frames".to_string(),
            };
            (t.index, reason)
        })
        .collect();

    let col = |f: &dyn Fn(&TrialRecord) -> [f64; 4]| -> TableRow {
        TableRow::of(&done.iter().map(|t| f(t)).collect::<Vec<_>>())
    };
    let table1 = EstimationTable {
        tps: col(&|t| t.tps().columns()),
        rigid: col(&|t| t.rigid().columns()),
        target_displacement: col(&|t| t.displacement().columns()),
    };
    let table2 = TargetingTable {
        needle_frame: col(&|t| t.target_needle.columns()),
        camera_frame: col(&|t| t.target_camera.columns()),
    };

    let tps: Vec<f64> = done.iter().map(|t| t.tps().norm_mean).collect();
    let rigid: Vec<f64> = done.iter().map(|t| t.rigid().norm_mean).collect();
    let disp: Vec<f64> = done.iter().map(|t| t.displacement().norm_mean).collect();
    let wilcoxon = paired_wilcoxon(&tps, &rigid);
    let spearman_rs = spearman(&tps, &disp).ok();
    let checks = cfg
        .checks
        .iter()
        .map(|&c| evaluate(c, &table1, &table2, wilcoxon.as_ref()))
        .collect();

    Ok(ExperimentReport {
        seed,
        n_trials: trials.len(),
        n_completed: done.len(),
        failures,
        table1,
        table2,
        wilcoxon,
        spearman_rs,
        checks,
        notes: vec![
            "estimation errors are per-trial means over valid frames; max columns are maxima over trials".into(),
            "targeting errors are measured once, at the end of each trial".into(),
            "p-values are two-sided; identical paired errors give p = 1".into(),
        ],
    })
}

pub fn run_experiment(
    cfg: &ExperimentConfig,
    n_trials: usize,
    seed: u64,
) -> Result<(ExperimentReport, Vec<TrialRecord>), HarnessError> {
    if n_trials < 2 {
        return Err(HarnessError::TooFewTrials(n_trials));
    }
    let trials = run_trials(cfg, n_trials, seed)?;
    Ok((aggregate(cfg, seed, &trials)?, trials))
}

fn row_csv(out: &mut String, name: &str, row: &TableRow) {
    let _ = write!(out, "{name}");
    for k in 0..4 {
        let _ = write!(out, ",{:.6},{:.6}", row.mean[k], row.max[k]);
    }
    out.push('\n');
}

pub fn table1_csv(t: &EstimationTable) -> String {
    let mut s = String::from("row,e_x_mean,e_x_max,e_y_mean,e_y_max,e_z_mean,e_z_max,norm_mean,norm_max\n");
    row_csv(&mut s, "TPS", &t.tps);
    row_csv(&mut s, "Rigid", &t.rigid);
    row_csv(&mut s, "TargetDisplacement", &t.target_displacement);
    s
}

pub fn table2_csv(t: &TargetingTable) -> String {
    let mut s = String::from("row,d_x_mean,d_x_max,d_y_mean,d_y_max,d_z_mean,d_z_max,norm_mean,norm_max\n");
    row_csv(&mut s, "needle_frame", &t.needle_frame);
    row_csv(&mut s, "camera_frame", &t.camera_frame);
    s
}

pub const TRIALS_HEADER: &str = "trial,seed,status,frames,valid_frames,\
tps_e_x,tps_e_y,tps_e_z,tps_norm,rigid_e_x,rigid_e_y,rigid_e_z,rigid_norm,\
disp_x,disp_y,disp_z,disp_norm,d_x,d_y,d_z,d_norm,cam_d_x,cam_d_y,cam_d_z,cam_d_norm";

pub fn trials_csv(trials: &[TrialRecord]) -> String {
    let mut s = String::from(TRIALS_HEADER);
    s.push('\n');
    for t in trials {
        let _ = write!(s, "{},{},{},{},{}", t.index, t.seed, t.status.label(), t.frames, t.valid_frames);
        let cols = [
            t.tps().columns(),
            t.rigid().columns(),
            t.displacement().columns(),
            [t.target_needle.d.x, t.target_needle.d.y, t.target_needle.d.z, t.target_needle.norm],
            [t.target_camera.d.x, t.target_camera.d.y, t.target_camera.d.z, t.target_camera.norm],
        ];
        for v in cols.iter().flatten() {
            let _ = write!(s, ",{v:.6}");
        }
        s.push('\n');
    }
    s
}

/// Write `table1.csv`, `table2.csv`, `trials.csv` and `report.json`.
pub fn write_outputs(dir: impl AsRef<Path>, report: &ExperimentReport, trials: &[TrialRecord]) -> Result<(), HarnessError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(dir.join("table1.csv"), table1_csv(&report.table1))?;
    fs::write(dir.join("table2.csv"), table2_csv(&report.table2))?;
    fs::write(dir.join("trials.csv"), trials_csv(trials))?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)?)?;
    Ok(())
}
