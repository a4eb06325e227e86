//! Evaluation metrics: PCK, MPJPE and PA-MPJPE, MPVPE and PA-MPVPE,
//! similarity Procrustes alignment, and the joint-limit violation audit.
//!
//! Distances are reported in the units of the inputs.

use std::fmt::Write as _;

use nalgebra::{Matrix3, UnitQuaternion, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::body_model::{DofKind, ModelDefinition, PoseVector};
use crate::error::{Error, Result};
use crate::losses::KeypointSet2D;
use crate::rotations::{rotmat_to_euler, Axis, EulerConvention, RotMat};

/// Relative singular-value floor below which a point set counts as
/// collinear.
const RANK_TOL: f64 = 1e-12;
const ORTHOGONAL_AXES_TOL: f64 = 1e-6;

fn same_len(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::dims(what, expected, actual));
    }
    Ok(())
}

/// Fraction of visible keypoints whose distance to the ground truth is
/// strictly below `threshold * normalizer`. Keypoints with zero ground-truth
/// confidence are excluded.
pub fn pck(pred: &[Vector2<f64>], gt: &KeypointSet2D, threshold: f64, normalizer: f64) -> Result<f64> {
    same_len("keypoint count", gt.len(), pred.len())?;
    if !(normalizer > 0.0 && normalizer.is_finite()) {
        return Err(Error::NonPositiveNormalizer(normalizer));
    }
    let radius = threshold * normalizer;
    let (mut hit, mut total) = (0usize, 0usize);
    for ((p, g), c) in pred.iter().zip(gt.points()).zip(gt.confidence()) {
        if *c > 0.0 {
            total += 1;
            if (p - g).norm() < radius {
                hit += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::DegeneratePoints("no visible keypoints"));
    }
    Ok(hit as f64 / total as f64)
}

fn mean_distance(pred: &[Vector3<f64>], gt: &[Vector3<f64>], offset: Vector3<f64>) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(gt).map(|(p, g)| (p - g - offset).norm()).sum::<f64>() / pred.len() as f64
}

/// Mean per-joint position error. With `root` set, both sets are first
/// translated so that joint `root` sits at the origin.
pub fn mpjpe(pred: &[Vector3<f64>], gt: &[Vector3<f64>], root: Option<usize>) -> Result<f64> {
    same_len("joint count", gt.len(), pred.len())?;
    let offset = match root {
        Some(r) if r >= pred.len() => return Err(Error::dims("root joint index bound", pred.len(), r)),
        Some(r) => pred[r] - gt[r],
        None => Vector3::zeros(),
    };
    Ok(mean_distance(pred, gt, offset))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: RotMat,
    pub translation: Vector3<f64>,
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        SimilarityTransform {
            scale: 1.0,
            rotation: RotMat::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.matrix() * p * self.scale + self.translation
    }

    pub fn apply_all(&self, points: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
        points.iter().map(|p| self.apply(p)).collect()
    }

    /// Mean squared distance between the transformed source and the target.
    pub fn residual(&self, source: &[Vector3<f64>], target: &[Vector3<f64>]) -> f64 {
        if source.is_empty() {
            return 0.0;
        }
        source
            .iter()
            .zip(target)
            .map(|(s, t)| (self.apply(s) - t).norm_squared())
            .sum::<f64>()
            / source.len() as f64
    }
}

fn centroid(points: &[Vector3<f64>]) -> Vector3<f64> {
    points.iter().sum::<Vector3<f64>>() / points.len() as f64
}

/// Least-squares similarity transform taking `source` onto `target`
/// (Umeyama). Reflections are excluded by flipping the sign of the weakest
/// singular direction when needed.
pub fn procrustes_align(source: &[Vector3<f64>], target: &[Vector3<f64>]) -> Result<SimilarityTransform> {
    same_len("point count", source.len(), target.len())?;
    if source.len() < 3 {
        return Err(Error::DegeneratePoints("at least three points are required"));
    }
    let n = source.len() as f64;
    let (mx, my) = (centroid(source), centroid(target));
    let mut cov = Matrix3::zeros();
    let mut src_scatter = Matrix3::zeros();
    for (x, y) in source.iter().zip(target) {
        let (dx, dy) = (x - mx, y - my);
        cov += dy * dx.transpose();
        src_scatter += dx * dx.transpose();
    }
    cov /= n;
    src_scatter /= n;
    let var_x = src_scatter.trace();
    let sv = src_scatter.symmetric_eigenvalues();
    let mut sv: Vec<f64> = sv.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if !(var_x > 0.0) || sv[1] <= RANK_TOL * sv[0] {
        return Err(Error::DegeneratePoints("source points are coincident or collinear"));
    }

    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let d = svd.singular_values;
    // nalgebra does not sort singular values; find the weakest direction.
    let weakest = (0..3).min_by(|&a, &b| d[a].total_cmp(&d[b])).unwrap();
    let mut s = Vector3::new(1.0, 1.0, 1.0);
    if (u * v_t).determinant() < 0.0 {
        s[weakest] = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&s) * v_t;
    let scale = d.component_mul(&s).sum() / var_x;
    if !(scale > 0.0) {
        return Err(Error::DegeneratePoints("target points are coincident"));
    }
    let translation = my - rotation * mx * scale;
    Ok(SimilarityTransform {
        scale,
        rotation: RotMat::from_matrix_tol(rotation, 1e-8)?,
        translation,
    })
}

/// Mean per-joint position error after similarity alignment of `pred` onto
/// `gt`.
pub fn pa_mpjpe(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<f64> {
    let t = procrustes_align(pred, gt)?;
    Ok(mean_distance(&t.apply_all(pred), gt, Vector3::zeros()))
}

/// Mean per-vertex position error. `roots` optionally gives the root joint
/// positions of the predicted and ground-truth bodies; their difference is
/// removed first.
pub fn mpvpe(pred: &[Vector3<f64>], gt: &[Vector3<f64>], roots: Option<(Vector3<f64>, Vector3<f64>)>) -> Result<f64> {
    same_len("vertex count", gt.len(), pred.len())?;
    let offset = roots.map_or(Vector3::zeros(), |(p, g)| p - g);
    Ok(mean_distance(pred, gt, offset))
}

pub fn pa_mpvpe(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<f64> {
    same_len("vertex count", gt.len(), pred.len())?;
    pa_mpjpe(pred, gt)
}

/// Axes and limits of one joint's rotational DoFs, in composition order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointLimitSpec {
    pub name: String,
    pub axes: Vec<Vector3<f64>>,
    pub limits: Vec<(Option<f64>, Option<f64>)>,
}

impl JointLimitSpec {
    /// Rotational DoFs of joint `j`; `None` when it has none.
    pub fn from_model(model: &ModelDefinition, j: usize) -> Option<Self> {
        let joint = &model.joints()[j];
        let rot: Vec<_> = joint.dofs.iter().filter(|d| d.kind == DofKind::Rotation).collect();
        (!rot.is_empty()).then(|| JointLimitSpec {
            name: joint.name.clone(),
            axes: rot.iter().map(|d| d.axis()).collect(),
            limits: rot.iter().map(|d| (d.lower, d.upper)).collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointViolation {
    /// Decomposed angle per DoF, radians.
    pub angles: Vec<f64>,
    /// Limit excess per DoF, radians, never negative.
    pub dof_violations: Vec<f64>,
    /// Rotation angle left over after projecting onto the joint's DoFs.
    pub off_axis: f64,
    /// Largest of the DoF violations and the off-axis residual.
    pub magnitude: f64,
}

fn limit_excess(v: f64, (lower, upper): (Option<f64>, Option<f64>)) -> f64 {
    let below = lower.map_or(0.0, |l| l - v);
    let above = upper.map_or(0.0, |u| v - u);
    below.max(above).max(0.0)
}

/// Picks the `2 pi` representative of `v` with the smallest limit excess.
fn best_branch(v: f64, limits: (Option<f64>, Option<f64>)) -> (f64, f64) {
    use std::f64::consts::TAU;
    [v - TAU, v, v + TAU]
        .into_iter()
        .map(|a| (a, limit_excess(a, limits)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap()
}

fn wrap(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let w = a.rem_euclid(TAU);
    if w > PI {
        w - TAU
    } else {
        w
    }
}

fn finish_violation(angles: Vec<f64>, dof_violations: Vec<f64>, off_axis: f64) -> JointViolation {
    let magnitude = dof_violations.iter().copied().fold(off_axis, f64::max);
    JointViolation {
        angles,
        dof_violations,
        off_axis,
        magnitude,
    }
}

/// Decomposes a free rotation into the joint's DoF angles and measures how
/// far it lies outside the joint's range.
///
/// One-DoF joints use a swing-twist split about the hinge axis: the twist
/// angle is the DoF value and the swing angle is the off-axis residual.
/// Two- and three-DoF joints must have mutually orthogonal axes; the
/// rotation is expressed in the frame those axes span and split into
/// intrinsic Euler angles. For two DoFs the third Euler angle is the off-axis
/// residual. Among equivalent angle sets the one with the smallest violation
/// is reported.
pub fn decompose_against_limits(rotation: &RotMat, spec: &JointLimitSpec) -> Result<JointViolation> {
    let k = spec.axes.len();
    if !(1..=3).contains(&k) {
        return Err(Error::InvalidConfig(format!(
            "joint {} has {k} rotational DoFs, expected 1 to 3",
            spec.name
        )));
    }
    same_len("joint limit count", k, spec.limits.len())?;
    let axes: Vec<Vector3<f64>> = spec.axes.iter().map(|a| a.normalize()).collect();

    if k == 1 {
        let q = UnitQuaternion::from_matrix(rotation.matrix());
        let a = axes[0];
        let twist = wrap(2.0 * q.imag().dot(&a).atan2(q.w));
        let (angle, violation) = best_branch(twist, spec.limits[0]);
        let twist_rot = UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_unchecked(a), twist);
        let swing = (q * twist_rot.inverse()).angle();
        return Ok(finish_violation(vec![angle], vec![violation], swing));
    }

    for i in 0..k {
        for j in i + 1..k {
            if axes[i].dot(&axes[j]).abs() > ORTHOGONAL_AXES_TOL {
                return Err(Error::InvalidConfig(format!(
                    "joint {}: DoF axes {i} and {j} are not orthogonal",
                    spec.name
                )));
            }
        }
    }
    let third = if k == 3 { axes[2] } else { axes[0].cross(&axes[1]) };
    // A left-handed axis triple is made proper by flipping the third axis,
    // which flips the sign of the third angle.
    let flip = if axes[0].cross(&axes[1]).dot(&third) < 0.0 {
        -1.0
    } else {
        1.0
    };
    let frame = Matrix3::from_columns(&[axes[0], axes[1], third * flip]);
    let local = RotMat::from_matrix_tol(frame.transpose() * rotation.matrix() * frame, 1e-6)?;
    let conv = EulerConvention::new(vec![Axis::X, Axis::Y, Axis::Z])?;
    let e = rotmat_to_euler(&local, &conv);
    let (a, b, c) = (e.angles()[0], e.angles()[1], e.angles()[2] * flip);
    // (a, b, c) and (a + pi, pi - b, c + pi) describe the same rotation.
    let pi = std::f64::consts::PI;
    let c_alt = wrap(c + pi);
    let candidates = [[a, b, c], [wrap(a + pi), wrap(pi - b), c_alt]];

    let mut best: Option<JointViolation> = None;
    for cand in candidates {
        let mut angles = Vec::with_capacity(k);
        let mut violations = Vec::with_capacity(k);
        for (i, limits) in spec.limits.iter().enumerate() {
            let (angle, v) = best_branch(cand[i], *limits);
            angles.push(angle);
            violations.push(v);
        }
        let off_axis = if k == 2 { cand[2].abs() } else { 0.0 };
        let v = finish_violation(angles, violations, off_axis);
        if best.as_ref().is_none_or(|b| v.magnitude < b.magnitude) {
            best = Some(v);
        }
    }
    Ok(best.unwrap())
}

/// A batch of poses to audit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseBatch {
    /// DoF vectors of the model itself; violations are read off directly.
    Dofs(Vec<PoseVector>),
    /// One free local rotation per model joint per sample, as predicted by a
    /// ball-joint model.
    Rotations(Vec<Vec<RotMat>>),
}

impl PoseBatch {
    pub fn len(&self) -> usize {
        match self {
            PoseBatch::Dofs(v) => v.len(),
            PoseBatch::Rotations(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Fraction of samples whose violation exceeds each threshold, per joint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViolationTable {
    pub thresholds_deg: Vec<f64>,
    pub joints: Vec<String>,
    /// `frequencies[joint][threshold]`
    pub frequencies: Vec<Vec<f64>>,
    pub samples: usize,
}

impl ViolationTable {
    /// Aligned plain-text table with one row per joint and one column per
    /// threshold, frequencies in percent.
    pub fn render(&self) -> String {
        let name_w = self
            .joints
            .iter()
            .map(|j| j.len())
            .max()
            .unwrap_or(0)
            .max("joint".len());
        let headers: Vec<String> = self.thresholds_deg.iter().map(|t| format!(">{t}°")).collect();
        let col_w = headers.iter().map(|h| h.chars().count()).max().unwrap_or(0).max(7);
        let mut out = format!("{:<name_w$}", "joint");
        for h in &headers {
            let pad = col_w - h.chars().count();
            let _ = write!(out, "  {}{h}", " ".repeat(pad));
        }
        out.push('\n');
        for (name, row) in self.joints.iter().zip(&self.frequencies) {
            let _ = write!(out, "{name:<name_w$}");
            for f in row {
                let _ = write!(out, "  {:>col_w$}", format!("{:.1}%", f * 100.0));
            }
            out.push('\n');
        }
        out
    }
}

fn dof_violation_magnitude(model: &ModelDefinition, j: usize, q: &[f64]) -> f64 {
    let range = model.dof_range(j);
    model.joints()[j]
        .dofs
        .iter()
        .zip(&q[range])
        .filter(|(d, _)| d.kind == DofKind::Rotation)
        .map(|(d, v)| limit_excess(*v, (d.lower, d.upper)))
        .fold(0.0, f64::max)
}

/// Counts, for each joint and threshold, the fraction of samples whose
/// violation magnitude strictly exceeds the threshold. `joints` defaults to
/// every joint with a bounded rotational DoF.
pub fn violation_audit(
    batch: &PoseBatch,
    model: &ModelDefinition,
    thresholds_deg: &[f64],
    joints: Option<&[String]>,
) -> Result<ViolationTable> {
    if thresholds_deg.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::InvalidConfig("thresholds must be sorted ascending".into()));
    }
    let indices: Vec<usize> = match joints {
        Some(names) => names
            .iter()
            .map(|n| {
                model
                    .joint_index(n)
                    .ok_or_else(|| Error::InvalidConfig(format!("unknown joint {n:?}")))
            })
            .collect::<Result<_>>()?,
        None => (0..model.joint_count())
            .filter(|&j| {
                model.joints()[j]
                    .dofs
                    .iter()
                    .any(|d| d.kind == DofKind::Rotation && d.is_bounded())
            })
            .collect(),
    };
    let specs: Vec<Option<JointLimitSpec>> = indices.iter().map(|&j| JointLimitSpec::from_model(model, j)).collect();

    let magnitudes: Vec<Vec<f64>> = match batch {
        PoseBatch::Dofs(poses) => poses
            .par_iter()
            .map(|q| {
                model.check_pose(q)?;
                Ok(indices.iter().map(|&j| dof_violation_magnitude(model, j, q)).collect())
            })
            .collect::<Result<_>>()?,
        PoseBatch::Rotations(samples) => samples
            .par_iter()
            .map(|rots| {
                same_len("rotations per sample", model.joint_count(), rots.len())?;
                indices
                    .iter()
                    .zip(&specs)
                    .map(|(&j, spec)| match spec {
                        Some(s) => decompose_against_limits(&rots[j], s).map(|v| v.magnitude),
                        None => Ok(0.0),
                    })
                    .collect()
            })
            .collect::<Result<_>>()?,
    };

    let n = magnitudes.len();
    let thresholds_rad: Vec<f64> = thresholds_deg.iter().map(|t| t.to_radians()).collect();
    let frequencies = (0..indices.len())
        .map(|ji| {
            thresholds_rad
                .iter()
                .map(|&t| {
                    if n == 0 {
                        return 0.0;
                    }
                    magnitudes.iter().filter(|m| m[ji] > t).count() as f64 / n as f64
                })
                .collect()
        })
        .collect();
    Ok(ViolationTable {
        thresholds_deg: thresholds_deg.to_vec(),
        joints: indices.iter().map(|&j| model.joints()[j].name.clone()).collect(),
        frequencies,
        samples: n,
    })
}
