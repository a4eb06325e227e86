//! The parametric body: shape blendshapes, forward kinematics over a
//! constrained kinematic tree, linear blend skinning and joint regression.
//!
//! Each joint's local transform is `translate(offset + sum(t_i * axis_i))`
//! followed by the product of its rotational DoFs in listed order. Translation
//! axes are expressed in the parent frame, rotation axes in the joint frame as
//! built up by the preceding rotations. Rest orientations are the identity, so
//! a joint's rest frame is the translation to its shaped rest location.
//!
//! Shape-dependent joint locations follow the usual construction: the
//! skeleton regressor applied to the shaped rest mesh. Offsets stored in the
//! document are the `beta = 0` values.

use std::collections::VecDeque;
use std::ops::Deref;
use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rotations::{axis_angle, RotMat};

pub const MODEL_FORMAT: &str = "skelkit-model";
pub const MODEL_VERSION: u32 = 1;

const ROW_SUM_TOL: f64 = 1e-6;
const AXIS_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DofKind {
    #[default]
    Rotation,
    Translation,
}

/// One scalar degree of freedom. Limits are radians for rotations and model
/// units for translations; a missing bound is unbounded on that side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dof {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub kind: DofKind,
    pub axis: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper: Option<f64>,
}

impl Dof {
    pub fn axis(&self) -> Vector3<f64> {
        Vector3::from(self.axis)
    }

    pub fn is_bounded(&self) -> bool {
        self.lower.is_some() || self.upper.is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    pub name: String,
    /// Index of the parent joint, `-1` for the root.
    pub parent: i64,
    pub rest_offset: [f64; 3],
    #[serde(default)]
    pub dofs: Vec<Dof>,
}

/// Sparse row entry: `(column index, weight)`.
pub type SparseRow = Vec<(usize, f64)>;

/// The on-disk model definition. See `docs/formats.md`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub format: String,
    pub version: u32,
    #[serde(default)]
    pub name: String,
    pub joints: Vec<Joint>,
    pub template_vertices: Vec<[f64; 3]>,
    /// Per vertex, one displacement per shape coefficient.
    pub shape_blendshapes: Vec<Vec<[f64; 3]>>,
    /// Per vertex, sparse joint weights.
    pub skinning_weights: Vec<SparseRow>,
    /// Keypoint regressor `W`: per keypoint, sparse vertex weights.
    pub joint_regressor: Vec<SparseRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub keypoint_names: Vec<String>,
    /// Per skeleton joint, sparse vertex weights used for shape-dependent
    /// joint locations. Omitted means joints do not move with shape.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skeleton_regressor: Option<Vec<SparseRow>>,
    #[serde(default)]
    pub faces: Vec<[usize; 3]>,
    /// Reserved for pose-corrective blendshapes; must be absent or null.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose_blendshapes: Option<serde_json::Value>,
}

/// Validated model with derived lookup tables. Immutable once built.
#[derive(Clone, Debug)]
pub struct ModelDefinition {
    doc: ModelDocument,
    order: Vec<usize>,
    parents: Vec<Option<usize>>,
    dof_start: Vec<usize>,
    pose_dim: usize,
    shape_dim: usize,
    rest_joints: Vec<Vector3<f64>>,
    joint_shape_dirs: Vec<Vec<Vector3<f64>>>,
    mesh_basis: SkinBasis,
    keypoint_basis: SkinBasis,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PoseVector(pub Vec<f64>);

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ShapeVector(pub Vec<f64>);

impl Deref for PoseVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl Deref for ShapeVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl PoseVector {
    pub fn zeros(n: usize) -> Self {
        PoseVector(vec![0.0; n])
    }
}

impl ShapeVector {
    pub fn zeros(n: usize) -> Self {
        ShapeVector(vec![0.0; n])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vector3<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JointSet3D(pub Vec<Vector3<f64>>);

impl Deref for JointSet3D {
    type Target = [Vector3<f64>];
    fn deref(&self) -> &[Vector3<f64>] {
        &self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

/// Output of forward kinematics.
#[derive(Clone, Debug)]
pub struct Posed {
    /// World transform of each joint frame.
    pub transforms: Vec<RigidTransform>,
    /// Shaped rest location of each joint.
    pub rest_joints: Vec<Vector3<f64>>,
    displacement: Vec<Vector3<f64>>,
    /// World axis (rotations) or direction (translations) of each DoF.
    pub(crate) dof_axes: Vec<Vector3<f64>>,
}

impl Posed {
    pub fn joints(&self) -> JointSet3D {
        JointSet3D(self.transforms.iter().map(|t| t.translation).collect())
    }

    /// Motion of rest point `v` under joint `j`'s rest-to-posed transform,
    /// exactly zero at the zero pose.
    fn skin_offset(&self, j: usize, v: &Vector3<f64>) -> Vector3<f64> {
        let r = self.transforms[j].rotation;
        (r - Matrix3::identity()) * (v - self.rest_joints[j]) + self.displacement[j]
    }

    /// Rest-to-posed transform of joint `j`, as used by skinning.
    pub fn skinning_transform(&self, j: usize) -> RigidTransform {
        let t = &self.transforms[j];
        RigidTransform {
            rotation: t.rotation,
            translation: t.translation - t.rotation * self.rest_joints[j],
        }
    }
}

fn check_rows(rows: &[SparseRow], field: &str, columns: usize, nonneg: bool) -> Result<()> {
    for (r, row) in rows.iter().enumerate() {
        let mut sum = 0.0;
        for (c, &(col, w)) in row.iter().enumerate() {
            if col >= columns {
                return Err(Error::model(
                    format!("{field}[{r}][{c}]"),
                    format!("column {col} out of range (< {columns})"),
                ));
            }
            if !w.is_finite() || (nonneg && w < 0.0) {
                return Err(Error::model(
                    format!("{field}[{r}][{c}]"),
                    format!("invalid weight {w}"),
                ));
            }
            sum += w;
        }
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::model(
                format!("{field}[{r}]"),
                format!("row sums to {sum}, expected 1"),
            ));
        }
    }
    Ok(())
}

impl ModelDefinition {
    pub fn from_document(doc: ModelDocument) -> Result<Self> {
        if doc.format != MODEL_FORMAT {
            return Err(Error::model(
                "format",
                format!("expected {MODEL_FORMAT:?}, got {:?}", doc.format),
            ));
        }
        if doc.version != MODEL_VERSION {
            return Err(Error::model("version", format!("unsupported version {}", doc.version)));
        }
        if doc.pose_blendshapes.as_ref().is_some_and(|v| !v.is_null()) {
            return Err(Error::model("pose_blendshapes", "pose blendshapes are not supported"));
        }
        let j_count = doc.joints.len();
        if j_count == 0 {
            return Err(Error::model("joints", "at least one joint is required"));
        }

        let mut parents = Vec::with_capacity(j_count);
        let mut root = None;
        for (j, joint) in doc.joints.iter().enumerate() {
            let parent = match joint.parent {
                -1 => {
                    if let Some(r) = root {
                        return Err(Error::model(
                            format!("joints[{j}].parent"),
                            format!("second root (joint {r} is already the root)"),
                        ));
                    }
                    root = Some(j);
                    None
                }
                p if p >= 0 && (p as usize) < j_count && p as usize != j => Some(p as usize),
                p => {
                    return Err(Error::model(
                        format!("joints[{j}].parent"),
                        format!("invalid parent index {p}"),
                    ))
                }
            };
            parents.push(parent);
            for (d, dof) in joint.dofs.iter().enumerate() {
                let path = format!("joints[{j}].dofs[{d}]");
                let n = dof.axis().norm();
                if (n - 1.0).abs() > AXIS_TOL {
                    return Err(Error::model(format!("{path}.axis"), format!("axis norm {n} is not 1")));
                }
                if let (Some(l), Some(u)) = (dof.lower, dof.upper) {
                    if !(l < u) {
                        return Err(Error::model(
                            path,
                            format!("lower limit {l} is not below upper limit {u}"),
                        ));
                    }
                }
            }
        }
        let root = root.ok_or_else(|| Error::model("joints", "no root joint (parent -1)"))?;

        // Walk parent chains; any chain longer than the joint count loops.
        for j in 0..j_count {
            let mut cur = j;
            let mut steps = 0;
            while let Some(p) = parents[cur] {
                cur = p;
                steps += 1;
                if steps > j_count {
                    return Err(Error::model(
                        format!("joints[{j}].parent"),
                        "kinematic tree contains a cycle",
                    ));
                }
            }
        }

        let mut children = vec![Vec::new(); j_count];
        for (j, p) in parents.iter().enumerate() {
            if let Some(p) = p {
                children[*p].push(j);
            }
        }
        let mut order = Vec::with_capacity(j_count);
        let mut queue = VecDeque::from([root]);
        while let Some(j) = queue.pop_front() {
            order.push(j);
            queue.extend(children[j].iter().copied());
        }
        debug_assert_eq!(order.len(), j_count);

        let mut dof_start = Vec::with_capacity(j_count);
        let mut pose_dim = 0;
        for joint in &doc.joints {
            dof_start.push(pose_dim);
            pose_dim += joint.dofs.len();
        }

        let n = doc.template_vertices.len();
        if n == 0 {
            return Err(Error::model("template_vertices", "mesh has no vertices"));
        }
        if doc.shape_blendshapes.len() != n {
            return Err(Error::model(
                "shape_blendshapes",
                format!("expected {n} vertex rows, got {}", doc.shape_blendshapes.len()),
            ));
        }
        let shape_dim = doc.shape_blendshapes[0].len();
        if let Some(v) = doc.shape_blendshapes.iter().position(|r| r.len() != shape_dim) {
            return Err(Error::model(
                format!("shape_blendshapes[{v}]"),
                format!("expected {shape_dim} components"),
            ));
        }
        if doc.skinning_weights.len() != n {
            return Err(Error::model(
                "skinning_weights",
                format!("expected {n} vertex rows, got {}", doc.skinning_weights.len()),
            ));
        }
        check_rows(&doc.skinning_weights, "skinning_weights", j_count, true)?;
        if doc.joint_regressor.is_empty() {
            return Err(Error::model("joint_regressor", "no keypoint rows"));
        }
        check_rows(&doc.joint_regressor, "joint_regressor", n, false)?;
        if !doc.keypoint_names.is_empty() && doc.keypoint_names.len() != doc.joint_regressor.len() {
            return Err(Error::model(
                "keypoint_names",
                "length differs from joint_regressor rows",
            ));
        }
        if let Some(sk) = &doc.skeleton_regressor {
            if sk.len() != j_count {
                return Err(Error::model(
                    "skeleton_regressor",
                    format!("expected {j_count} rows, got {}", sk.len()),
                ));
            }
            check_rows(sk, "skeleton_regressor", n, false)?;
        }
        for (f, face) in doc.faces.iter().enumerate() {
            if face.iter().any(|&i| i >= n) {
                return Err(Error::model(format!("faces[{f}]"), "vertex index out of range"));
            }
        }

        let mut rest_joints = vec![Vector3::zeros(); j_count];
        for &j in &order {
            let base = parents[j].map_or(Vector3::zeros(), |p| rest_joints[p]);
            rest_joints[j] = base + Vector3::from(doc.joints[j].rest_offset);
        }
        let joint_shape_dirs = match &doc.skeleton_regressor {
            Some(rows) => rows
                .iter()
                .map(|row| {
                    (0..shape_dim)
                        .map(|b| {
                            row.iter()
                                .map(|&(v, w)| Vector3::from(doc.shape_blendshapes[v][b]) * w)
                                .sum()
                        })
                        .collect()
                })
                .collect(),
            None => vec![vec![Vector3::zeros(); shape_dim]; j_count],
        };

        let mut model = ModelDefinition {
            doc,
            order,
            parents,
            dof_start,
            pose_dim,
            shape_dim,
            rest_joints,
            joint_shape_dirs,
            mesh_basis: SkinBasis::default(),
            keypoint_basis: SkinBasis::default(),
        };
        model.mesh_basis = SkinBasis::for_mesh(&model);
        model.keypoint_basis = SkinBasis::for_keypoints(&model);
        Ok(model)
    }

    pub fn document(&self) -> &ModelDocument {
        &self.doc
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.doc).expect("model document serializes")
    }

    pub fn joints(&self) -> &[Joint] {
        &self.doc.joints
    }

    pub fn joint_count(&self) -> usize {
        self.doc.joints.len()
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.doc.joints.iter().position(|j| j.name == name)
    }

    pub fn parent(&self, j: usize) -> Option<usize> {
        self.parents[j]
    }

    /// Joint indices with every parent before its children.
    pub fn topological_order(&self) -> &[usize] {
        &self.order
    }

    pub fn root(&self) -> usize {
        self.order[0]
    }

    pub fn pose_dim(&self) -> usize {
        self.pose_dim
    }

    pub fn shape_dim(&self) -> usize {
        self.shape_dim
    }

    pub fn vertex_count(&self) -> usize {
        self.doc.template_vertices.len()
    }

    pub fn keypoint_count(&self) -> usize {
        self.doc.joint_regressor.len()
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.doc.faces
    }

    /// Range of pose indices owned by joint `j`.
    pub fn dof_range(&self, j: usize) -> std::ops::Range<usize> {
        let s = self.dof_start[j];
        s..s + self.doc.joints[j].dofs.len()
    }

    /// All DoFs flattened in pose-vector order, with their owning joint.
    pub fn dofs(&self) -> impl Iterator<Item = (usize, &Dof)> {
        self.doc
            .joints
            .iter()
            .enumerate()
            .flat_map(|(j, joint)| joint.dofs.iter().map(move |d| (j, d)))
    }

    /// Rest joint locations at `beta = 0`.
    pub fn rest_joints(&self) -> &[Vector3<f64>] {
        &self.rest_joints
    }

    pub(crate) fn mesh_basis(&self) -> &SkinBasis {
        &self.mesh_basis
    }

    pub(crate) fn keypoint_basis(&self) -> &SkinBasis {
        &self.keypoint_basis
    }

    pub fn check_pose(&self, q: &[f64]) -> Result<()> {
        if q.len() != self.pose_dim {
            return Err(Error::dims("pose vector length", self.pose_dim, q.len()));
        }
        Ok(())
    }

    pub fn check_shape(&self, beta: &[f64]) -> Result<()> {
        if beta.len() != self.shape_dim {
            return Err(Error::dims("shape vector length", self.shape_dim, beta.len()));
        }
        Ok(())
    }

    /// Shaped rest locations of the skeleton joints.
    pub fn shaped_rest_joints(&self, beta: &[f64]) -> Vec<Vector3<f64>> {
        self.rest_joints
            .iter()
            .zip(&self.joint_shape_dirs)
            .map(|(j0, dirs)| j0 + dirs.iter().zip(beta).map(|(d, b)| d * *b).sum::<Vector3<f64>>())
            .collect()
    }
}

pub fn load_model_str(source: &str) -> Result<ModelDefinition> {
    let doc: ModelDocument = serde_json::from_str(source)?;
    ModelDefinition::from_document(doc)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelDefinition> {
    load_model_str(&std::fs::read_to_string(path)?)
}

pub fn shape_mesh(model: &ModelDefinition, beta: &[f64]) -> Result<Mesh> {
    model.check_shape(beta)?;
    let doc = &model.doc;
    let vertices = doc
        .template_vertices
        .iter()
        .zip(&doc.shape_blendshapes)
        .map(|(t, dirs)| {
            let mut v = Vector3::from(*t);
            for (d, b) in dirs.iter().zip(beta) {
                v += Vector3::from(*d) * *b;
            }
            v
        })
        .collect();
    Ok(Mesh { vertices })
}

pub fn forward_kinematics(model: &ModelDefinition, q: &[f64], beta: &[f64]) -> Result<Posed> {
    model.check_pose(q)?;
    model.check_shape(beta)?;
    let rest_joints = model.shaped_rest_joints(beta);
    let j_count = model.joint_count();
    let mut transforms = vec![RigidTransform::identity(); j_count];
    // Displacement of each joint from its rest location. Tracking it rather
    // than the position keeps the zero pose exactly at rest.
    let mut displacement = vec![Vector3::zeros(); j_count];
    let mut dof_axes = vec![Vector3::zeros(); model.pose_dim];

    for &j in &model.order {
        let (parent, parent_d, bone) = match model.parents[j] {
            Some(p) => (transforms[p], displacement[p], rest_joints[j] - rest_joints[p]),
            None => (RigidTransform::identity(), Vector3::zeros(), Vector3::zeros()),
        };
        let mut shift = Vector3::zeros();
        let mut local_r = Matrix3::identity();
        let start = model.dof_start[j];
        for (k, dof) in model.doc.joints[j].dofs.iter().enumerate() {
            let value = q[start + k];
            let axis = dof.axis();
            match dof.kind {
                DofKind::Translation => {
                    shift += axis * value;
                    dof_axes[start + k] = parent.rotation * axis;
                }
                DofKind::Rotation => {
                    dof_axes[start + k] = parent.rotation * local_r * axis;
                    local_r *= axis_angle(&axis, value);
                }
            }
        }
        let d = parent_d + (parent.rotation - Matrix3::identity()) * bone + parent.rotation * shift;
        displacement[j] = d;
        transforms[j] = RigidTransform {
            rotation: parent.rotation * local_r,
            translation: rest_joints[j] + d,
        };
    }

    Ok(Posed {
        transforms,
        rest_joints,
        displacement,
        dof_axes,
    })
}

/// Local rotation of each joint from its rotational DoFs.
pub fn local_rotations(model: &ModelDefinition, q: &[f64]) -> Result<Vec<RotMat>> {
    model.check_pose(q)?;
    Ok(model
        .doc
        .joints
        .iter()
        .enumerate()
        .map(|(j, joint)| {
            let start = model.dof_start[j];
            let m = joint
                .dofs
                .iter()
                .enumerate()
                .filter(|(_, d)| d.kind == DofKind::Rotation)
                .fold(Matrix3::identity(), |acc, (k, d)| {
                    acc * axis_angle(&d.axis(), q[start + k])
                });
            RotMat::new_unchecked(m)
        })
        .collect())
}

pub fn skin_mesh(model: &ModelDefinition, q: &[f64], beta: &[f64]) -> Result<Mesh> {
    let posed = forward_kinematics(model, q, beta)?;
    let rest = shape_mesh(model, beta)?;
    let vertices = rest
        .vertices
        .iter()
        .zip(&model.doc.skinning_weights)
        .map(|(v, row)| {
            v + row
                .iter()
                .map(|&(j, w)| posed.skin_offset(j, v) * w)
                .sum::<Vector3<f64>>()
        })
        .collect();
    Ok(Mesh { vertices })
}

pub fn regress_joints(model: &ModelDefinition, mesh: &Mesh) -> Result<JointSet3D> {
    let n = model.vertex_count();
    if mesh.vertices.len() != n {
        return Err(Error::dims("mesh vertex count", n, mesh.vertices.len()));
    }
    Ok(JointSet3D(
        model
            .doc
            .joint_regressor
            .iter()
            .map(|row| row.iter().map(|&(v, w)| mesh.vertices[v] * w).sum())
            .collect(),
    ))
}

/// Clamps every bounded DoF into its limits.
pub fn clamp_to_limits(model: &ModelDefinition, q: &[f64]) -> PoseVector {
    PoseVector(
        q.iter()
            .zip(model.dofs())
            .map(|(&v, (_, dof))| {
                let v = dof.lower.map_or(v, |l| v.max(l));
                dof.upper.map_or(v, |u| v.min(u))
            })
            .collect(),
    )
}

/// One joint's contribution to an output point:
/// `R_j * (rest + sum_b beta_b * shape[b]) + weight * p_j`.
#[derive(Clone, Debug)]
pub(crate) struct Influence {
    pub joint: usize,
    pub weight: f64,
    pub rest: Vector3<f64>,
    pub shape: Vec<Vector3<f64>>,
}

/// Points that are linear in the skinned mesh, expressed directly in terms
/// of the joint transforms. Used for both the mesh itself and the regressed
/// keypoints so that objectives can be differentiated in closed form.
#[derive(Clone, Debug, Default)]
pub(crate) struct SkinBasis {
    pub points: Vec<Vec<Influence>>,
    /// Rest location of each point and its blendshape directions.
    rest: Vec<(Vector3<f64>, Vec<Vector3<f64>>)>,
}

impl SkinBasis {
    fn vertex_influences(model: &ModelDefinition, v: usize, scale: f64) -> impl Iterator<Item = Influence> + '_ {
        let doc = &model.doc;
        let t = Vector3::from(doc.template_vertices[v]);
        doc.skinning_weights[v].iter().map(move |&(j, w)| {
            let c = w * scale;
            Influence {
                joint: j,
                weight: c,
                rest: (t - model.rest_joints[j]) * c,
                shape: (0..model.shape_dim)
                    .map(|b| (Vector3::from(doc.shape_blendshapes[v][b]) - model.joint_shape_dirs[j][b]) * c)
                    .collect(),
            }
        })
    }

    fn for_mesh(model: &ModelDefinition) -> Self {
        let doc = &model.doc;
        SkinBasis {
            points: (0..model.vertex_count())
                .map(|v| Self::vertex_influences(model, v, 1.0).collect())
                .collect(),
            rest: doc
                .template_vertices
                .iter()
                .zip(&doc.shape_blendshapes)
                .map(|(t, dirs)| (Vector3::from(*t), dirs.iter().map(|d| Vector3::from(*d)).collect()))
                .collect(),
        }
    }

    fn for_keypoints(model: &ModelDefinition) -> Self {
        let points = model
            .doc
            .joint_regressor
            .iter()
            .map(|row| {
                let mut merged: Vec<Option<Influence>> = vec![None; model.joint_count()];
                for &(v, w) in row {
                    for inf in Self::vertex_influences(model, v, w) {
                        match &mut merged[inf.joint] {
                            Some(acc) => {
                                acc.weight += inf.weight;
                                acc.rest += inf.rest;
                                for (a, s) in acc.shape.iter_mut().zip(&inf.shape) {
                                    *a += s;
                                }
                            }
                            slot => *slot = Some(inf),
                        }
                    }
                }
                merged.into_iter().flatten().collect()
            })
            .collect();
        let doc = &model.doc;
        let rest = doc
            .joint_regressor
            .iter()
            .map(|row| {
                let mut base = Vector3::zeros();
                let mut dirs = vec![Vector3::zeros(); model.shape_dim];
                for &(v, w) in row {
                    base += Vector3::from(doc.template_vertices[v]) * w;
                    for (d, b) in dirs.iter_mut().zip(&doc.shape_blendshapes[v]) {
                        *d += Vector3::from(*b) * w;
                    }
                }
                (base, dirs)
            })
            .collect();
        SkinBasis { points, rest }
    }

    /// Posed points, written as the shaped rest point plus the motion each
    /// joint contributes so that the zero pose reproduces the rest points
    /// exactly.
    pub fn evaluate(&self, posed: &Posed, beta: &[f64]) -> Vec<Vector3<f64>> {
        self.points
            .iter()
            .zip(&self.rest)
            .map(|(infl, (base, dirs))| {
                let mut p = *base;
                for (d, b) in dirs.iter().zip(beta) {
                    p += d * *b;
                }
                let motion: Vector3<f64> = infl
                    .iter()
                    .map(|i| {
                        let r = posed.transforms[i.joint].rotation;
                        let local = i.shape.iter().zip(beta).fold(i.rest, |acc, (s, b)| acc + s * *b);
                        (r - Matrix3::identity()) * local + posed.displacement[i.joint] * i.weight
                    })
                    .sum();
                p + motion
            })
            .collect()
    }

    /// Pulls `d objective / d point` back to pose and shape gradients.
    pub fn backprop(
        &self,
        model: &ModelDefinition,
        posed: &Posed,
        beta: &[f64],
        point_grads: &[Vector3<f64>],
    ) -> (Vec<f64>, Vec<f64>) {
        let j_count = model.joint_count();
        let b_count = model.shape_dim;
        let mut torque = vec![Vector3::zeros(); j_count];
        let mut force = vec![Vector3::zeros(); j_count];
        let mut d_beta = vec![0.0; b_count];

        for (infl, g) in self.points.iter().zip(point_grads) {
            if g.iter().all(|v| *v == 0.0) {
                continue;
            }
            for i in infl {
                let t = &posed.transforms[i.joint];
                let local = i.shape.iter().zip(beta).fold(i.rest, |acc, (s, b)| acc + s * *b);
                let u = t.rotation * local + t.translation * i.weight;
                torque[i.joint] += u.cross(g);
                force[i.joint] += g * i.weight;
                let g_local = t.rotation.transpose() * g;
                for (db, s) in d_beta.iter_mut().zip(&i.shape) {
                    *db += g_local.dot(s);
                }
            }
        }

        // Joint positions depend on beta through the shaped rest offsets.
        if b_count > 0 {
            let mut dp = vec![vec![Vector3::zeros(); b_count]; j_count];
            for &j in &model.order {
                for b in 0..b_count {
                    dp[j][b] = match model.parents[j] {
                        Some(p) => {
                            dp[p][b]
                                + posed.transforms[p].rotation
                                    * (model.joint_shape_dirs[j][b] - model.joint_shape_dirs[p][b])
                        }
                        None => model.joint_shape_dirs[j][b],
                    };
                    // Influences carry `-weight * R_j * D_j` in their shape
                    // terms; here only the position term remains.
                    d_beta[b] += force[j].dot(&dp[j][b]);
                }
            }
        }

        for &j in model.order.iter().rev() {
            if let Some(p) = model.parents[j] {
                let (t, f) = (torque[j], force[j]);
                torque[p] += t;
                force[p] += f;
            }
        }

        let mut d_q = vec![0.0; model.pose_dim];
        for (j, joint) in model.doc.joints.iter().enumerate() {
            let pivot = posed.transforms[j].translation;
            let moment = torque[j] - pivot.cross(&force[j]);
            for (k, dof) in joint.dofs.iter().enumerate() {
                let idx = model.dof_start[j] + k;
                let axis = &posed.dof_axes[idx];
                d_q[idx] = match dof.kind {
                    DofKind::Rotation => axis.dot(&moment),
                    DofKind::Translation => axis.dot(&force[j]),
                };
            }
        }
        (d_q, d_beta)
    }
}

/// Size parameters for the built-in toy model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyModelSpec {
    /// Total joint count; values below [`ToyModelSpec::MIN_JOINTS`] are
    /// raised to it. Extra joints lengthen the spine.
    pub joints: usize,
    pub vertices_per_bone: usize,
    pub shape_dim: usize,
}

impl ToyModelSpec {
    pub const MIN_JOINTS: usize = 18;
}

impl Default for ToyModelSpec {
    fn default() -> Self {
        ToyModelSpec {
            joints: Self::MIN_JOINTS,
            vertices_per_bone: 6,
            shape_dim: 10,
        }
    }
}

/// Knee and elbow flexion range: 0 to 135 degrees.
pub const HINGE_LIMITS: (f64, f64) = (0.0, 3.0 * std::f64::consts::FRAC_PI_4);

fn rot_dof(name: &str, axis: [f64; 3], lower: f64, upper: f64) -> Dof {
    Dof {
        name: name.to_string(),
        kind: DofKind::Rotation,
        axis,
        lower: Some(lower),
        upper: Some(upper),
    }
}

fn free_dof(name: &str, kind: DofKind, axis: [f64; 3]) -> Dof {
    Dof {
        name: name.to_string(),
        kind,
        axis,
        lower: None,
        upper: None,
    }
}

fn ball_dofs(prefix: &str, limits: [(f64, f64); 3], mirror: bool) -> Vec<Dof> {
    let names = ["flex", "twist", "abduct"];
    let axes = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    (0..3)
        .map(|i| {
            let (l, u) = limits[i];
            // Mirrored joints flip the sign of rotations about y and z.
            let (l, u) = if mirror && i > 0 { (-u, -l) } else { (l, u) };
            rot_dof(&format!("{prefix}_{}", names[i]), axes[i], l, u)
        })
        .collect()
}

/// Builds the desk-scale biped used in tests and examples.
///
/// Y is up and the body faces +z. The root carries three unbounded
/// translations and three unbounded rotations (x, y, z in that order, which
/// is the `xyz` intrinsic Euler convention). Knees and elbows are 1-DoF
/// hinges limited to `[0, 3pi/4]`, hips and shoulders are 3-DoF, ankles and
/// the neck 2-DoF, wrists, feet and the head top are end joints without
/// DoFs. Each joint is surrounded by a four-vertex ring fully skinned to it;
/// the keypoint and skeleton regressors average that ring, so keypoint `k`
/// coincides with joint `k`. Blendshapes are affine fields plus a girth
/// direction, generated from a fixed seed.
pub fn make_toy_model(spec: &ToyModelSpec) -> ModelDefinition {
    use rand::{Rng, SeedableRng};
    use std::f64::consts::PI;

    let spine_segments = spec.joints.max(ToyModelSpec::MIN_JOINTS) - ToyModelSpec::MIN_JOINTS + 1;
    let mut joints: Vec<Joint> = Vec::new();
    let mut add = |name: &str, parent: i64, offset: [f64; 3], dofs: Vec<Dof>| -> i64 {
        joints.push(Joint {
            name: name.to_string(),
            parent,
            rest_offset: offset,
            dofs,
        });
        joints.len() as i64 - 1
    };

    let pelvis = add(
        "pelvis",
        -1,
        [0.0, 0.95, 0.0],
        vec![
            free_dof("root_tx", DofKind::Translation, [1.0, 0.0, 0.0]),
            free_dof("root_ty", DofKind::Translation, [0.0, 1.0, 0.0]),
            free_dof("root_tz", DofKind::Translation, [0.0, 0.0, 1.0]),
            free_dof("root_rx", DofKind::Rotation, [1.0, 0.0, 0.0]),
            free_dof("root_ry", DofKind::Rotation, [0.0, 1.0, 0.0]),
            free_dof("root_rz", DofKind::Rotation, [0.0, 0.0, 1.0]),
        ],
    );
    let mut chest = pelvis;
    let seg = 0.40 / spine_segments as f64;
    for s in 0..spine_segments {
        chest = add(
            &format!("spine_{}", s + 1),
            chest,
            [0.0, seg, 0.0],
            ball_dofs(
                &format!("spine_{}", s + 1),
                [(-0.5, 0.9), (-0.6, 0.6), (-0.5, 0.5)],
                false,
            ),
        );
    }
    let neck = add(
        "neck",
        chest,
        [0.0, 0.12, 0.0],
        vec![
            rot_dof("neck_flex", [1.0, 0.0, 0.0], -0.7, 0.9),
            rot_dof("neck_twist", [0.0, 1.0, 0.0], -1.2, 1.2),
        ],
    );
    add("head_top", neck, [0.0, 0.22, 0.02], vec![]);

    for (side, sx, mirror) in [("left", 1.0, false), ("right", -1.0, true)] {
        let shoulder = add(
            &format!("{side}_shoulder"),
            chest,
            [0.18 * sx, 0.08, 0.0],
            ball_dofs(
                &format!("{side}_shoulder"),
                [(-1.0, 2.8), (-1.5, 1.5), (-1.6, 1.2)],
                mirror,
            ),
        );
        let elbow = add(
            &format!("{side}_elbow"),
            shoulder,
            [0.28 * sx, 0.0, 0.0],
            vec![rot_dof(
                &format!("{side}_elbow_flex"),
                [0.0, -sx, 0.0],
                HINGE_LIMITS.0,
                HINGE_LIMITS.1,
            )],
        );
        add(&format!("{side}_wrist"), elbow, [0.25 * sx, 0.0, 0.0], vec![]);
    }
    for (side, sx, mirror) in [("left", 1.0, false), ("right", -1.0, true)] {
        let hip = add(
            &format!("{side}_hip"),
            pelvis,
            [0.09 * sx, -0.05, 0.0],
            ball_dofs(&format!("{side}_hip"), [(-2.1, 0.5), (-0.8, 0.8), (-0.5, 0.8)], mirror),
        );
        let knee = add(
            &format!("{side}_knee"),
            hip,
            [0.0, -0.42, 0.0],
            vec![rot_dof(
                &format!("{side}_knee_flex"),
                [1.0, 0.0, 0.0],
                HINGE_LIMITS.0,
                HINGE_LIMITS.1,
            )],
        );
        let ankle = add(
            &format!("{side}_ankle"),
            knee,
            [0.0, -0.40, 0.0],
            vec![
                rot_dof(&format!("{side}_ankle_flex"), [1.0, 0.0, 0.0], -0.9, 0.5),
                rot_dof(&format!("{side}_ankle_inv"), [0.0, 0.0, 1.0], -0.4, 0.4),
            ],
        );
        add(&format!("{side}_foot"), ankle, [0.0, -0.05, 0.15], vec![]);
    }

    let j_count = joints.len();
    let mut world = vec![Vector3::zeros(); j_count];
    for j in 0..j_count {
        let base = if joints[j].parent < 0 {
            Vector3::zeros()
        } else {
            world[joints[j].parent as usize]
        };
        world[j] = base + Vector3::from(joints[j].rest_offset);
    }

    // Vertices carry a radial direction used by the girth blendshape.
    let mut template: Vec<Vector3<f64>> = Vec::new();
    let mut radial: Vec<Vector3<f64>> = Vec::new();
    let mut weights: Vec<SparseRow> = Vec::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();
    let mut rings: Vec<[usize; 4]> = Vec::new();

    let frame = |dir: Vector3<f64>| -> (Vector3<f64>, Vector3<f64>) {
        let d = if dir.norm() > 0.0 {
            dir.normalize()
        } else {
            Vector3::y()
        };
        let helper = if d.x.abs() < 0.9 { Vector3::x() } else { Vector3::z() };
        let e1 = d.cross(&helper).normalize();
        (e1, d.cross(&e1))
    };
    let ring_radius = 0.04;
    for j in 0..j_count {
        let dir = if joints[j].parent < 0 {
            Vector3::y()
        } else {
            world[j] - world[joints[j].parent as usize]
        };
        let (e1, e2) = frame(dir);
        let start = template.len();
        for r in [e1, e2, -e1, -e2] {
            template.push(world[j] + r * ring_radius);
            radial.push(r * ring_radius);
            weights.push(vec![(j, 1.0)]);
        }
        rings.push([start, start + 1, start + 2, start + 3]);
        faces.push([start, start + 1, start + 2]);
        faces.push([start, start + 2, start + 3]);
    }
    let bone_radius = 0.05;
    let golden = PI * (3.0 - 5f64.sqrt());
    for j in 0..j_count {
        if joints[j].parent < 0 {
            continue;
        }
        let p = joints[j].parent as usize;
        let (e1, e2) = frame(world[j] - world[p]);
        let start = template.len();
        let n = spec.vertices_per_bone;
        for i in 0..n {
            let t = (i + 1) as f64 / (n + 1) as f64;
            let phi = golden * i as f64;
            let r = (e1 * phi.cos() + e2 * phi.sin()) * bone_radius;
            template.push(world[p] + (world[j] - world[p]) * t + r);
            radial.push(r);
            let wj = 0.5 * t * t;
            weights.push(vec![(p, 1.0 - wj), (j, wj)]);
        }
        for i in 0..n {
            let next = if i + 1 < n { start + i + 1 } else { rings[j][0] };
            faces.push([start + i, next, rings[j][i % 4]]);
        }
    }

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x5EED_B0D1);
    let center = world[pelvis as usize];
    let mut fields: Vec<Matrix3<f64>> = Vec::with_capacity(spec.shape_dim);
    for b in 0..spec.shape_dim {
        let m = match b {
            0 => Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.06, 0.0, 0.0, 0.0, 0.0),
            1 => Matrix3::new(0.05, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0),
            2 => Matrix3::zeros(),
            _ => Matrix3::from_fn(|_, _| rng.random_range(-0.03..0.03)),
        };
        fields.push(m);
    }
    let blendshapes: Vec<Vec<[f64; 3]>> = template
        .iter()
        .zip(&radial)
        .map(|(v, r)| {
            fields
                .iter()
                .enumerate()
                .map(|(b, m)| {
                    let d = if b == 2 { r * 0.3 } else { m * (v - center) };
                    [d.x, d.y, d.z]
                })
                .collect()
        })
        .collect();

    let regressor: Vec<SparseRow> = rings
        .iter()
        .map(|ring| ring.iter().map(|&v| (v, 0.25)).collect())
        .collect();

    let doc = ModelDocument {
        format: MODEL_FORMAT.to_string(),
        version: MODEL_VERSION,
        name: format!("toy-biped-j{}-v{}-b{}", j_count, spec.vertices_per_bone, spec.shape_dim),
        keypoint_names: joints.iter().map(|j| j.name.clone()).collect(),
        joints,
        template_vertices: template.iter().map(|v| [v.x, v.y, v.z]).collect(),
        shape_blendshapes: blendshapes,
        skinning_weights: weights,
        joint_regressor: regressor.clone(),
        skeleton_regressor: Some(regressor),
        faces,
        pose_blendshapes: None,
    };
    ModelDefinition::from_document(doc).expect("toy model is valid by construction")
}
