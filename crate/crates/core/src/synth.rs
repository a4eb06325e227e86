//! Seeded synthetic fitting problems: a ground-truth pose, shape and camera,
//! the keypoints they project to, and a perturbed starting point.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::body_model::{forward_kinematics, DofKind, ModelDefinition, PoseVector, ShapeVector};
use crate::camera::{project, WeakPerspectiveCamera};
use crate::error::Result;
use crate::losses::KeypointSet2D;
use crate::skelify::FitState;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSettings {
    /// Half-width of the uniform noise added to every rotational DoF of the
    /// initialization, radians.
    pub init_noise: f64,
    /// Half-width of the uniform range for unbounded root rotations.
    pub root_rotation: f64,
    /// Ground-truth shape coefficients are drawn from `[-shape_range, shape_range]`.
    pub shape_range: f64,
    /// Fraction of each bounded DoF's range kept clear of the limits when
    /// sampling the ground truth.
    pub limit_margin: f64,
}

impl Default for SynthSettings {
    fn default() -> Self {
        SynthSettings {
            init_noise: 0.3,
            root_rotation: 0.4,
            shape_range: 1.0,
            limit_margin: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCase {
    pub seed: u64,
    pub truth: FitState,
    pub init: FitState,
    pub keypoints: KeypointSet2D,
}

/// Draws a pose with every bounded DoF inside its limits. Unbounded
/// rotations are drawn from `[-root_rotation, root_rotation]`; unbounded
/// translations are left at zero since the camera absorbs them.
pub fn sample_pose<R: Rng>(model: &ModelDefinition, settings: &SynthSettings, rng: &mut R) -> PoseVector {
    PoseVector(
        model
            .dofs()
            .map(|(_, dof)| match (dof.kind, dof.lower, dof.upper) {
                (_, Some(l), Some(u)) => {
                    let m = settings.limit_margin * (u - l);
                    rng.random_range(l + m..=u - m)
                }
                (_, Some(l), None) => l + rng.random_range(0.0..settings.root_rotation.max(f64::MIN_POSITIVE)),
                (_, None, Some(u)) => u - rng.random_range(0.0..settings.root_rotation.max(f64::MIN_POSITIVE)),
                (DofKind::Rotation, None, None) if settings.root_rotation > 0.0 => {
                    rng.random_range(-settings.root_rotation..=settings.root_rotation)
                }
                _ => 0.0,
            })
            .collect(),
    )
}

pub fn sample_shape<R: Rng>(model: &ModelDefinition, settings: &SynthSettings, rng: &mut R) -> ShapeVector {
    let r = settings.shape_range;
    ShapeVector(
        (0..model.shape_dim())
            .map(|_| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 })
            .collect(),
    )
}

/// Camera that roughly fits a standing body into `[-1, 1]`.
pub fn sample_camera<R: Rng>(rng: &mut R) -> WeakPerspectiveCamera {
    let scale = rng.random_range(0.8..=1.2);
    WeakPerspectiveCamera {
        scale,
        translation: [
            rng.random_range(-0.1..=0.1),
            -0.85 * scale + rng.random_range(-0.1..=0.1),
        ],
    }
}

/// Adds uniform noise to every rotational DoF.
pub fn perturb_pose<R: Rng>(model: &ModelDefinition, q: &[f64], noise: f64, rng: &mut R) -> PoseVector {
    PoseVector(
        model
            .dofs()
            .zip(q)
            .map(|((_, dof), &v)| match dof.kind {
                DofKind::Rotation if noise > 0.0 => v + rng.random_range(-noise..=noise),
                _ => v,
            })
            .collect(),
    )
}

/// One synthetic keypoint-fitting problem. All keypoints are fully
/// confident and noise-free, so the ground truth has zero reprojection
/// error. The initialization keeps the true shape and camera and perturbs
/// the pose.
pub fn synthetic_case(model: &ModelDefinition, seed: u64, settings: &SynthSettings) -> Result<SyntheticCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = sample_pose(model, settings, &mut rng);
    let beta = sample_shape(model, settings, &mut rng);
    let camera = sample_camera(&mut rng);
    let posed = forward_kinematics(model, &q, &beta)?;
    let joints = model.keypoint_basis().evaluate(&posed, &beta);
    let keypoints = KeypointSet2D::visible(project(&camera, &joints)?);
    let init = FitState {
        q: perturb_pose(model, &q, settings.init_noise, &mut rng),
        beta: beta.clone(),
        camera,
    };
    Ok(SyntheticCase {
        seed,
        truth: FitState { q, beta, camera },
        init,
        keypoints,
    })
}
