//! Model-to-scene registration: rigid Procrustes alignment and a 3D
//! thin-plate spline, plus lesion projection through either.
//!
//! The spline uses the 3D biharmonic kernel `φ(r) = r`:
//!
//! ```text
//! u(p) = A·p + b + Σ wᵢ ‖p − cᵢ‖
//! ```
//!
//! with side conditions `Σ wᵢ = 0` and `Σ wᵢ cᵢᵀ = 0`. In three dimensions the
//! bending energy of this expansion is `-Σᵢⱼ wᵢ·wⱼ φ(‖cᵢ − cⱼ‖)` (the kernel
//! matrix is conditionally negative definite), so a smoothing weight `λ`
//! enters the linear system as `K − λI`. `λ = 0` interpolates exactly.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::geom::{Point3, RigidTransform};

/// Systems whose condition number exceeds this are fitted but logged.
pub const CONDITION_WARNING: f64 = 1e10;
const SINGULAR_RCOND: f64 = 1e-13;

#[derive(Debug, Error)]
pub enum RegisterError {
    #[error("source has {src} points but target has {dst}")]
    LengthMismatch { src: usize, dst: usize },
    #[error("need at least {needed} point pairs, got {got}")]
    TooFewPairs { needed: usize, got: usize },
    #[error("point configuration is degenerate ({0})")]
    Degenerate(&'static str),
    #[error("thin-plate system is singular (rcond {rcond:.1e}); use a positive regularisation λ")]
    Singular { rcond: f64 },
    #[error("regularisation must be non-negative, got {0}")]
    NegativeLambda(f64),
    #[error("invalid marker model: {0}")]
    InvalidModel(String),
    #[error("lesion index {index} out of range ({count} lesions)")]
    NoSuchLesion { index: usize, count: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedPoint {
    #[serde(deserialize_with = "id_from_string_or_number")]
    pub id: String,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl NamedPoint {
    pub fn new(id: impl Into<String>, p: Point3) -> Self {
        Self {
            id: id.into(),
            x: p.x,
            y: p.y,
            z: p.z,
        }
    }

    pub fn point(&self) -> Point3 {
        Point3::new(self.x, self.y, self.z)
    }
}

fn id_from_string_or_number<'de, D: Deserializer<'de>>(d: D) -> Result<String, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Id {
        Text(String),
        Number(serde_json::Number),
    }
    Ok(match Id::deserialize(d)? {
        Id::Text(s) => s,
        Id::Number(n) => n.to_string(),
    })
}

/// Preoperative marker and lesion centroids in model space (mm).
///
/// JSON form: `{"markers": [{"id", "x", "y", "z"}], "lesions": [...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawModel")]
pub struct MarkerModel {
    pub markers: Vec<NamedPoint>,
    pub lesions: Vec<NamedPoint>,
}

#[derive(Deserialize)]
struct RawModel {
    markers: Vec<NamedPoint>,
    lesions: Vec<NamedPoint>,
}

impl TryFrom<RawModel> for MarkerModel {
    type Error = RegisterError;

    fn try_from(raw: RawModel) -> Result<Self, Self::Error> {
        MarkerModel::new(raw.markers, raw.lesions)
    }
}

impl MarkerModel {
    pub fn new(markers: Vec<NamedPoint>, lesions: Vec<NamedPoint>) -> Result<Self, RegisterError> {
        if markers.len() < 4 {
            return Err(RegisterError::InvalidModel(format!(
                "need at least 4 markers, got {}",
                markers.len()
            )));
        }
        if lesions.is_empty() {
            return Err(RegisterError::InvalidModel("need at least one lesion".into()));
        }
        for p in markers.iter().chain(&lesions) {
            if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
                return Err(RegisterError::InvalidModel(format!("non-finite coordinate for {}", p.id)));
            }
        }
        for i in 0..markers.len() {
            for j in i + 1..markers.len() {
                if (markers[i].point() - markers[j].point()).norm() <= 0.0 {
                    return Err(RegisterError::InvalidModel(format!(
                        "markers {} and {} coincide",
                        markers[i].id, markers[j].id
                    )));
                }
            }
        }
        Ok(Self { markers, lesions })
    }

    pub fn marker_points(&self) -> Vec<Point3> {
        self.markers.iter().map(NamedPoint::point).collect()
    }

    pub fn lesion_points(&self) -> Vec<Point3> {
        self.lesions.iter().map(NamedPoint::point).collect()
    }

    pub fn lesion_index(&self, id: &str) -> Option<usize> {
        self.lesions.iter().position(|l| l.id == id)
    }

    pub fn from_json(text: &str) -> Result<Self, RegisterError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RegisterError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serialises")
    }
}

fn centroid(points: &[Point3]) -> Vector3<f64> {
    points.iter().fold(Vector3::zeros(), |acc, p| acc + p.coords) / points.len() as f64
}

/// Least-squares rotation and translation taking `src` onto `dst`.
///
/// Reflections are excluded by flipping the smallest singular direction when
/// the unconstrained solution has negative determinant.
pub fn procrustes(src: &[Point3], dst: &[Point3]) -> Result<RigidTransform, RegisterError> {
    if src.len() != dst.len() {
        return Err(RegisterError::LengthMismatch {
            src: src.len(),
            dst: dst.len(),
        });
    }
    if src.len() < 3 {
        return Err(RegisterError::TooFewPairs {
            needed: 3,
            got: src.len(),
        });
    }
    let mu_s = centroid(src);
    let mu_d = centroid(dst);

    let mut spread = Matrix3::zeros();
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        let sc = s.coords - mu_s;
        spread += sc * sc.transpose();
        h += sc * (d.coords - mu_d).transpose();
    }
    let ev = spread.symmetric_eigenvalues();
    let mut ev: Vec<f64> = ev.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if !(ev[0] > 0.0) || ev[1] <= 1e-12 * ev[0] {
        return Err(RegisterError::Degenerate("source points are collinear"));
    }

    let svd = h.svd(true, true);
    let u = svd.u.expect("u requested");
    let v = svd.v_t.expect("v_t requested").transpose();
    let mut fix = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        // nalgebra sorts singular values descending: the last is the smallest.
        fix[(2, 2)] = -1.0;
    }
    let rotation = v * fix * u.transpose();
    Ok(RigidTransform::new(rotation, mu_d - rotation * mu_s))
}

/// Sum of squared residuals of `t` on the pairs.
pub fn rigid_sse(t: &RigidTransform, src: &[Point3], dst: &[Point3]) -> f64 {
    src.iter().zip(dst).map(|(s, d)| (t.apply(s) - d).norm_squared()).sum()
}

/// Fitted 3D thin-plate spline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TpsModel {
    pub control_points: Vec<Point3>,
    pub weights: Vec<Vector3<f64>>,
    pub linear: Matrix3<f64>,
    pub offset: Vector3<f64>,
    pub lambda: f64,
}

impl TpsModel {
    /// `Σ wᵢ` and `Σ wᵢ cᵢᵀ`, both zero for a well-posed fit.
    pub fn side_conditions(&self) -> (Vector3<f64>, Matrix3<f64>) {
        let mut sum = Vector3::zeros();
        let mut moment = Matrix3::zeros();
        for (w, c) in self.weights.iter().zip(&self.control_points) {
            sum += w;
            moment += w * c.coords.transpose();
        }
        (sum, moment)
    }

    /// Frobenius norm of the warp coefficients.
    pub fn warp_norm(&self) -> f64 {
        self.weights.iter().map(|w| w.norm_squared()).sum::<f64>().sqrt()
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        let mut out = self.linear * p.coords + self.offset;
        for (w, c) in self.weights.iter().zip(&self.control_points) {
            out += w * (p - c).norm();
        }
        Point3::from(out)
    }
}

pub fn tps_apply(model: &TpsModel, p: &Point3) -> Point3 {
    model.apply(p)
}

/// Fit a thin-plate spline mapping `src[i]` toward `dst[i]`.
pub fn fit_tps(src: &[Point3], dst: &[Point3], lambda: f64) -> Result<TpsModel, RegisterError> {
    if src.len() != dst.len() {
        return Err(RegisterError::LengthMismatch {
            src: src.len(),
            dst: dst.len(),
        });
    }
    if src.len() < 4 {
        return Err(RegisterError::TooFewPairs {
            needed: 4,
            got: src.len(),
        });
    }
    if !(lambda >= 0.0) {
        return Err(RegisterError::NegativeLambda(lambda));
    }
    let n = src.len();
    let size = n + 4;
    let mut sys = DMatrix::<f64>::zeros(size, size);
    for i in 0..n {
        for j in 0..n {
            sys[(i, j)] = (src[i] - src[j]).norm();
        }
        sys[(i, i)] -= lambda;
        let row = [1.0, src[i].x, src[i].y, src[i].z];
        for (k, v) in row.into_iter().enumerate() {
            sys[(i, n + k)] = v;
            sys[(n + k, i)] = v;
        }
    }
    let mut rhs = DMatrix::<f64>::zeros(size, 3);
    for i in 0..n {
        rhs[(i, 0)] = dst[i].x;
        rhs[(i, 1)] = dst[i].y;
        rhs[(i, 2)] = dst[i].z;
    }

    let sv = sys.clone().singular_values();
    let smax = sv.max();
    let smin = sv.min();
    let rcond = if smax > 0.0 { smin / smax } else { 0.0 };
    if rcond < SINGULAR_RCOND {
        return Err(RegisterError::Singular { rcond });
    }
    if 1.0 / rcond > CONDITION_WARNING {
        log::warn!("thin-plate system poorly conditioned: cond {:.2e}", 1.0 / rcond);
    }
    let sol = sys
        .full_piv_lu()
        .solve(&rhs)
        .ok_or(RegisterError::Singular { rcond })?;

    let weights = (0..n)
        .map(|i| Vector3::new(sol[(i, 0)], sol[(i, 1)], sol[(i, 2)]))
        .collect();
    let offset = Vector3::new(sol[(n, 0)], sol[(n, 1)], sol[(n, 2)]);
    let linear = Matrix3::from_fn(|k, j| sol[(n + 1 + j, k)]);
    Ok(TpsModel {
        control_points: src.to_vec(),
        weights,
        linear,
        offset,
        lambda,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Rigid,
    Tps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FittedTransform {
    Rigid(RigidTransform),
    Tps(TpsModel),
}

impl FittedTransform {
    pub fn apply(&self, p: &Point3) -> Point3 {
        match self {
            FittedTransform::Rigid(t) => t.apply(p),
            FittedTransform::Tps(m) => m.apply(p),
        }
    }

    pub fn kind(&self) -> TransformKind {
        match self {
            FittedTransform::Rigid(_) => TransformKind::Rigid,
            FittedTransform::Tps(_) => TransformKind::Tps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LesionEstimate {
    pub position: Point3,
    pub kind: TransformKind,
    /// RMS marker residual of the fitted transform (mm).
    pub residual_mm: f64,
}

/// Fit `kind` on labelled `(model marker index, scene point)` pairs. Returns the
/// transform and its RMS marker residual.
pub fn fit_transform(
    model: &MarkerModel,
    pairs: &[(usize, Point3)],
    kind: TransformKind,
    lambda: f64,
) -> Result<(FittedTransform, f64), RegisterError> {
    let needed = match kind {
        TransformKind::Rigid => 3,
        TransformKind::Tps => 4,
    };
    if pairs.len() < needed {
        return Err(RegisterError::TooFewPairs {
            needed,
            got: pairs.len(),
        });
    }
    let src: Vec<Point3> = pairs.iter().map(|(m, _)| model.markers[*m].point()).collect();
    let dst: Vec<Point3> = pairs.iter().map(|(_, p)| *p).collect();
    let fitted = match kind {
        TransformKind::Rigid => FittedTransform::Rigid(procrustes(&src, &dst)?),
        TransformKind::Tps => FittedTransform::Tps(fit_tps(&src, &dst, lambda)?),
    };
    let sse: f64 = src.iter().zip(&dst).map(|(s, d)| (fitted.apply(s) - d).norm_squared()).sum();
    Ok((fitted, (sse / src.len() as f64).sqrt()))
}

/// Map lesion `lesion` of `model` into the scene through a transform fitted on
/// the labelled marker pairs.
pub fn estimate_lesion(
    model: &MarkerModel,
    pairs: &[(usize, Point3)],
    kind: TransformKind,
    lambda: f64,
    lesion: usize,
) -> Result<LesionEstimate, RegisterError> {
    let target = model.lesions.get(lesion).ok_or(RegisterError::NoSuchLesion {
        index: lesion,
        count: model.lesions.len(),
    })?;
    let (fitted, residual_mm) = fit_transform(model, pairs, kind, lambda)?;
    Ok(LesionEstimate {
        position: fitted.apply(&target.point()),
        kind,
        residual_mm,
    })
}
