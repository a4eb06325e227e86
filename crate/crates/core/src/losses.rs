//! Parameter and keypoint losses for supervising a regressor.
//!
//! Keypoint losses are averaged over points rather than summed so their
//! scale does not depend on the keypoint count.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rotations::RotMat;

/// Observed 2D keypoints in normalized image units with per-point
/// confidences in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawKeypoints", into = "RawKeypoints")]
pub struct KeypointSet2D {
    points: Vec<Vector2<f64>>,
    confidence: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawKeypoints {
    points: Vec<[f64; 2]>,
    confidence: Vec<f64>,
}

impl TryFrom<RawKeypoints> for KeypointSet2D {
    type Error = Error;

    fn try_from(raw: RawKeypoints) -> Result<Self> {
        KeypointSet2D::new(raw.points.into_iter().map(Vector2::from).collect(), raw.confidence)
    }
}

impl From<KeypointSet2D> for RawKeypoints {
    fn from(k: KeypointSet2D) -> Self {
        RawKeypoints {
            points: k.points.iter().map(|p| [p.x, p.y]).collect(),
            confidence: k.confidence,
        }
    }
}

impl KeypointSet2D {
    pub fn new(points: Vec<Vector2<f64>>, confidence: Vec<f64>) -> Result<Self> {
        if points.len() != confidence.len() {
            return Err(Error::dims("keypoint confidence count", points.len(), confidence.len()));
        }
        if let Some(c) = confidence.iter().find(|c| !(0.0..=1.0).contains(*c)) {
            return Err(Error::InvalidConfig(format!("keypoint confidence {c} outside [0, 1]")));
        }
        Ok(KeypointSet2D { points, confidence })
    }

    /// All points fully confident.
    pub fn visible(points: Vec<Vector2<f64>>) -> Self {
        let confidence = vec![1.0; points.len()];
        KeypointSet2D { points, confidence }
    }

    pub fn points(&self) -> &[Vector2<f64>] {
        &self.points
    }

    pub fn confidence(&self) -> &[f64] {
        &self.confidence
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn same_len(what: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::dims(what, a, b));
    }
    Ok(())
}

/// Squared Frobenius distance summed over all matrices.
pub fn loss_pose(pred: &[RotMat], target: &[RotMat]) -> Result<f64> {
    same_len("rotation count", target.len(), pred.len())?;
    Ok(pred
        .iter()
        .zip(target)
        .map(|(a, b)| (a.matrix() - b.matrix()).norm_squared())
        .sum())
}

pub fn loss_pose_grad(pred: &[RotMat], target: &[RotMat]) -> Result<Vec<Matrix3<f64>>> {
    same_len("rotation count", target.len(), pred.len())?;
    Ok(pred
        .iter()
        .zip(target)
        .map(|(a, b)| (a.matrix() - b.matrix()) * 2.0)
        .collect())
}

pub fn loss_shape(pred: &[f64], target: &[f64]) -> Result<f64> {
    same_len("shape length", target.len(), pred.len())?;
    Ok(pred.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum())
}

pub fn loss_shape_grad(pred: &[f64], target: &[f64]) -> Result<Vec<f64>> {
    same_len("shape length", target.len(), pred.len())?;
    Ok(pred.iter().zip(target).map(|(a, b)| 2.0 * (a - b)).collect())
}

/// Mean L1 distance between 3D keypoint sets.
pub fn loss_kp3d(pred: &[Vector3<f64>], target: &[Vector3<f64>]) -> Result<f64> {
    same_len("3D keypoint count", target.len(), pred.len())?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = pred.iter().zip(target).map(|(a, b)| (a - b).abs().sum()).sum();
    Ok(total / pred.len() as f64)
}

/// Subgradient; zero where a coordinate difference is exactly zero.
pub fn loss_kp3d_grad(pred: &[Vector3<f64>], target: &[Vector3<f64>]) -> Result<Vec<Vector3<f64>>> {
    same_len("3D keypoint count", target.len(), pred.len())?;
    let k = pred.len().max(1) as f64;
    Ok(pred.iter().zip(target).map(|(a, b)| (a - b).map(sign) / k).collect())
}

/// Mean confidence-weighted L1 reprojection distance.
pub fn loss_kp2d(projected: &[Vector2<f64>], target: &KeypointSet2D) -> Result<f64> {
    same_len("2D keypoint count", target.len(), projected.len())?;
    if projected.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = projected
        .iter()
        .zip(target.points())
        .zip(target.confidence())
        .map(|((a, b), c)| c * (a - b).abs().sum())
        .sum();
    Ok(total / projected.len() as f64)
}

pub fn loss_kp2d_grad(projected: &[Vector2<f64>], target: &KeypointSet2D) -> Result<Vec<Vector2<f64>>> {
    same_len("2D keypoint count", target.len(), projected.len())?;
    let k = projected.len().max(1) as f64;
    Ok(projected
        .iter()
        .zip(target.points())
        .zip(target.confidence())
        .map(|((a, b), c)| (a - b).map(sign) * (c / k))
        .collect())
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Relative weights of the four supervision terms. The defaults are
/// placeholders (all 1); tune them for the regressor being trained.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub pose: f64,
    pub shape: f64,
    pub kp3d: f64,
    pub kp2d: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            pose: 1.0,
            shape: 1.0,
            kp3d: 1.0,
            kp2d: 1.0,
        }
    }
}

/// Individual loss values; a term is `None` when its label is unavailable.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub pose: Option<f64>,
    pub shape: Option<f64>,
    pub kp3d: Option<f64>,
    pub kp2d: Option<f64>,
}

impl LossTerms {
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        [
            (self.pose, w.pose),
            (self.shape, w.shape),
            (self.kp3d, w.kp3d),
            (self.kp2d, w.kp2d),
        ]
        .iter()
        .filter_map(|(v, w)| v.map(|v| v * w))
        .sum()
    }
}
