//! Rotation representations: the continuous 6D form, rotation matrices,
//! intrinsic Euler angles and per-joint DoF composition.
//!
//! All Euler conventions here are *intrinsic*: `xyz` means
//! `Rx(a) * Ry(b) * Rz(c)`, each rotation applied about the axes of the frame
//! produced by the previous one.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative norm below which the orthogonalized second 6D vector is rejected.
pub const GRAM_SCHMIDT_EPS: f64 = 1e-8;

/// Tolerance used when validating rotation matrices.
pub const ORTHONORMAL_TOL: f64 = 1e-9;

/// `cos` of the middle Euler angle below which a decomposition is treated as
/// gimbal locked.
const GIMBAL_EPS: f64 = 1e-8;

const UNIT_AXIS_TOL: f64 = 1e-6;

/// Continuous 6D rotation representation: two stacked 3-vectors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cont6D(pub [f64; 6]);

impl Cont6D {
    pub fn from_vectors(a: &Vector3<f64>, b: &Vector3<f64>) -> Self {
        Cont6D([a.x, a.y, a.z, b.x, b.y, b.z])
    }

    pub fn first(&self) -> Vector3<f64> {
        Vector3::new(self.0[0], self.0[1], self.0[2])
    }

    pub fn second(&self) -> Vector3<f64> {
        Vector3::new(self.0[3], self.0[4], self.0[5])
    }

    /// The first two columns of `r`, which maps back to `r` exactly.
    pub fn from_rotmat(r: &RotMat) -> Self {
        let m = r.matrix();
        Self::from_vectors(&m.column(0).into_owned(), &m.column(1).into_owned())
    }
}

/// A proper rotation matrix (orthonormal columns, determinant +1).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Matrix3<f64>", into = "Matrix3<f64>")]
pub struct RotMat(Matrix3<f64>);

impl RotMat {
    pub fn identity() -> Self {
        RotMat(Matrix3::identity())
    }

    /// Validates orthonormality and determinant within [`ORTHONORMAL_TOL`].
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        Self::from_matrix_tol(m, ORTHONORMAL_TOL)
    }

    pub fn from_matrix_tol(m: Matrix3<f64>, tol: f64) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(Error::DegenerateRotation("non-finite matrix entry"));
        }
        let gram = m.transpose() * m - Matrix3::identity();
        if gram.amax() > tol {
            return Err(Error::DegenerateRotation("columns are not orthonormal"));
        }
        if (m.determinant() - 1.0).abs() > tol {
            return Err(Error::DegenerateRotation("determinant is not +1"));
        }
        Ok(RotMat(m))
    }

    /// Wraps a matrix the caller has already constructed as a rotation.
    pub(crate) fn new_unchecked(m: Matrix3<f64>) -> Self {
        RotMat(m)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Matrix3<f64> {
        self.0
    }

    pub fn transpose(&self) -> RotMat {
        RotMat(self.0.transpose())
    }

    pub fn compose(&self, other: &RotMat) -> RotMat {
        RotMat(self.0 * other.0)
    }

    /// Rotation angle in `[0, pi]`.
    pub fn angle(&self) -> f64 {
        let c = ((self.0.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        // acos is badly conditioned near 0 and pi; use the skew part as well.
        let skew = Vector3::new(
            self.0[(2, 1)] - self.0[(1, 2)],
            self.0[(0, 2)] - self.0[(2, 0)],
            self.0[(1, 0)] - self.0[(0, 1)],
        );
        (0.5 * skew.norm()).atan2(c)
    }
}

impl TryFrom<Matrix3<f64>> for RotMat {
    type Error = Error;

    fn try_from(m: Matrix3<f64>) -> Result<Self> {
        // Serialized matrices lose a few ulps; accept a looser bound on input.
        RotMat::from_matrix_tol(m, 1e-6)
    }
}

impl From<RotMat> for Matrix3<f64> {
    fn from(r: RotMat) -> Self {
        r.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    pub fn unit(self) -> Vector3<f64> {
        let mut v = Vector3::zeros();
        v[self.index()] = 1.0;
        v
    }

    fn from_char(c: char) -> Option<Axis> {
        match c.to_ascii_lowercase() {
            'x' => Some(Axis::X),
            'y' => Some(Axis::Y),
            'z' => Some(Axis::Z),
            _ => None,
        }
    }
}

/// An ordered intrinsic axis sequence of one to three axes, with no axis
/// repeated back to back.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct EulerConvention(Vec<Axis>);

impl EulerConvention {
    pub fn new(axes: Vec<Axis>) -> Result<Self> {
        let name: String = axes.iter().map(|a| ['x', 'y', 'z'][a.index()]).collect();
        if axes.is_empty() || axes.len() > 3 {
            return Err(Error::InvalidConvention(name, "expected 1 to 3 axes"));
        }
        if axes.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidConvention(name, "consecutive axes must differ"));
        }
        Ok(EulerConvention(axes))
    }

    pub fn axes(&self) -> &[Axis] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl FromStr for EulerConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let axes = s
            .chars()
            .map(|c| {
                Axis::from_char(c)
                    .ok_or_else(|| Error::InvalidConvention(s.to_string(), "axis letters must be x, y or z"))
            })
            .collect::<Result<Vec<_>>>()?;
        EulerConvention::new(axes)
    }
}

impl TryFrom<String> for EulerConvention {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<EulerConvention> for String {
    fn from(c: EulerConvention) -> Self {
        c.to_string()
    }
}

impl fmt::Display for EulerConvention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for a in &self.0 {
            write!(f, "{}", ['x', 'y', 'z'][a.index()])?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EulerAngles {
    angles: Vec<f64>,
    convention: EulerConvention,
}

impl EulerAngles {
    pub fn new(angles: Vec<f64>, convention: EulerConvention) -> Result<Self> {
        if angles.len() != convention.len() {
            return Err(Error::dims("euler angle count", convention.len(), angles.len()));
        }
        Ok(EulerAngles { angles, convention })
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn convention(&self) -> &EulerConvention {
        &self.convention
    }
}

/// Gram–Schmidt map from the 6D representation to a rotation matrix.
pub fn cont6d_to_rotmat(c: &Cont6D) -> Result<RotMat> {
    let a = c.first();
    let b = c.second();
    let a_norm = a.norm();
    let b_norm = b.norm();
    if !(a_norm.is_finite() && b_norm.is_finite()) {
        return Err(Error::DegenerateRotation("non-finite input"));
    }
    if a_norm == 0.0 || b_norm == 0.0 {
        return Err(Error::DegenerateRotation("zero input vector"));
    }
    let e1 = a / a_norm;
    let ortho = b - e1 * e1.dot(&b);
    let ortho_norm = ortho.norm();
    if ortho_norm < GRAM_SCHMIDT_EPS * b_norm {
        return Err(Error::DegenerateRotation("input vectors are parallel"));
    }
    let e2 = ortho / ortho_norm;
    let e3 = e1.cross(&e2);
    Ok(RotMat(Matrix3::from_columns(&[e1, e2, e3])))
}

/// Rotation by `angle` radians about `axis`. `axis` must be unit length.
pub fn axis_angle(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    let k = axis.cross_matrix();
    Matrix3::identity() + k * s + k * k * (1.0 - c)
}

fn elementary(axis: Axis, angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    match axis {
        Axis::X => Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c),
        Axis::Y => Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c),
        Axis::Z => Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
    }
}

pub fn euler_to_rotmat(e: &EulerAngles) -> RotMat {
    let m = e
        .convention
        .axes()
        .iter()
        .zip(&e.angles)
        .fold(Matrix3::identity(), |acc, (&axis, &angle)| {
            acc * elementary(axis, angle)
        });
    RotMat(m)
}

/// +1 when `(i, j, k)` is a cyclic permutation of `(0, 1, 2)`.
fn parity(i: usize, j: usize) -> f64 {
    if j == (i + 1) % 3 {
        1.0
    } else {
        -1.0
    }
}

/// Decomposes `r` in the given intrinsic convention.
///
/// Three-axis conventions reproduce any rotation. Tait–Bryan sequences return
/// the middle angle in `[-pi/2, pi/2]`, proper Euler sequences (`xyx`, ...) in
/// `[0, pi]`. At gimbal lock the third angle is set to zero. One- and two-axis
/// conventions are exact for rotations inside the subgroup they span and
/// otherwise return the leading angles of the matching three-axis split.
pub fn rotmat_to_euler(r: &RotMat, convention: &EulerConvention) -> EulerAngles {
    let m = r.matrix();
    let axes = convention.axes();
    let angles = match axes.len() {
        1 => {
            let i = axes[0].index();
            let j = (i + 1) % 3;
            let k = (i + 2) % 3;
            vec![m[(k, j)].atan2(m[(j, j)])]
        }
        2 => {
            let (i, j) = (axes[0].index(), axes[1].index());
            let k = 3 - i - j;
            let full = tait_bryan(m, i, j, k);
            vec![full[0], full[1]]
        }
        _ => {
            let (i, j, k) = (axes[0].index(), axes[1].index(), axes[2].index());
            if i == k {
                proper_euler(m, i, j, 3 - i - j).to_vec()
            } else {
                tait_bryan(m, i, j, k).to_vec()
            }
        }
    };
    EulerAngles {
        angles,
        convention: convention.clone(),
    }
}

fn tait_bryan(m: &Matrix3<f64>, i: usize, j: usize, k: usize) -> [f64; 3] {
    let s = parity(i, j);
    let sin_b = s * m[(i, k)];
    let cos_b = m[(i, i)].hypot(m[(i, j)]);
    let b = sin_b.atan2(cos_b);
    if cos_b < GIMBAL_EPS {
        let a = (s * m[(k, j)]).atan2(m[(j, j)]);
        return [a, b, 0.0];
    }
    let a = (-s * m[(j, k)]).atan2(m[(k, k)]);
    let c = (-s * m[(i, j)]).atan2(m[(i, i)]);
    [a, b, c]
}

fn proper_euler(m: &Matrix3<f64>, i: usize, j: usize, k: usize) -> [f64; 3] {
    let s = parity(i, j);
    let cos_b = m[(i, i)];
    let sin_b = m[(i, j)].hypot(m[(i, k)]);
    let b = sin_b.atan2(cos_b);
    if sin_b < GIMBAL_EPS {
        let a = (s * m[(k, j)]).atan2(m[(j, j)]);
        return [a, b, 0.0];
    }
    let a = m[(j, i)].atan2(-s * m[(k, i)]);
    let c = m[(i, j)].atan2(s * m[(i, k)]);
    [a, b, c]
}

fn check_axes(axes: &[Vector3<f64>], angles: &[f64]) -> Result<()> {
    if axes.is_empty() || axes.len() > 3 {
        return Err(Error::dims("dof axis count (1..=3)", 3, axes.len()));
    }
    if axes.len() != angles.len() {
        return Err(Error::dims("dof angle count", axes.len(), angles.len()));
    }
    for (index, a) in axes.iter().enumerate() {
        let norm = a.norm();
        if (norm - 1.0).abs() > UNIT_AXIS_TOL {
            return Err(Error::NonUnitAxis { index, norm });
        }
    }
    Ok(())
}

/// Product of axis-angle rotations in the given order.
pub fn dof_rotation(axes: &[Vector3<f64>], angles: &[f64]) -> Result<RotMat> {
    check_axes(axes, angles)?;
    let m = axes
        .iter()
        .zip(angles)
        .fold(Matrix3::identity(), |acc, (a, &t)| acc * axis_angle(a, t));
    Ok(RotMat(m))
}
