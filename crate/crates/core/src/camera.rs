//! Weak-perspective camera: drop depth, scale, translate.
//!
//! Image coordinates are normalized so that the longer side of the person
//! bounding box spans `[-1, 1]`.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeakPerspectiveCamera {
    pub scale: f64,
    pub translation: [f64; 2],
}

impl Default for WeakPerspectiveCamera {
    fn default() -> Self {
        WeakPerspectiveCamera {
            scale: 1.0,
            translation: [0.0, 0.0],
        }
    }
}

impl WeakPerspectiveCamera {
    pub fn new(scale: f64, translation: [f64; 2]) -> Result<Self> {
        let cam = WeakPerspectiveCamera { scale, translation };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale > 0.0 && self.scale.is_finite() {
            Ok(())
        } else {
            Err(Error::NonPositiveScale(self.scale))
        }
    }

    pub fn translation(&self) -> Vector2<f64> {
        Vector2::from(self.translation)
    }

    /// Projects one point without validating the camera.
    pub fn project_point(&self, p: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(p.x, p.y) * self.scale + self.translation()
    }

    /// Pulls a gradient on the projected point back to the camera
    /// parameters `(scale, tx, ty)` and to the 3D point.
    pub fn backprop_point(&self, p: &Vector3<f64>, g: &Vector2<f64>) -> ([f64; 3], Vector3<f64>) {
        (
            [g.x * p.x + g.y * p.y, g.x, g.y],
            Vector3::new(g.x * self.scale, g.y * self.scale, 0.0),
        )
    }
}

pub fn project(cam: &WeakPerspectiveCamera, points: &[Vector3<f64>]) -> Result<Vec<Vector2<f64>>> {
    cam.validate()?;
    Ok(points.iter().map(|p| cam.project_point(p)).collect())
}
