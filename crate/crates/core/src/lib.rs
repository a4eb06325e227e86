//! Biomechanical body model toolkit: a constrained skeleton with per-DoF
//! joint limits, keypoint and mesh fitting, pseudo-label refinement and pose
//! evaluation metrics.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod body_model;
pub mod camera;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod refine;
pub mod rotations;
pub mod skelify;
pub mod synth;

pub use body_model::{
    clamp_to_limits, forward_kinematics, load_model, load_model_str, local_rotations, make_toy_model, regress_joints,
    shape_mesh, skin_mesh, Dof, DofKind, Joint, JointSet3D, Mesh, ModelDefinition, ModelDocument, PoseVector, Posed,
    RigidTransform, ShapeVector, ToyModelSpec,
};
pub use camera::{project, WeakPerspectiveCamera};
pub use error::{Error, Result};
pub use losses::KeypointSet2D;
pub use metrics::{
    decompose_against_limits, mpjpe, mpvpe, pa_mpjpe, pa_mpvpe, pck, procrustes_align, violation_audit, JointLimitSpec,
    JointViolation, PoseBatch, SimilarityTransform, ViolationTable,
};
pub use refine::{
    load_dataset, parse_dataset, refine_batch, save_dataset, write_dataset, DatasetRecord, InitPolicy, InitSource,
    Provenance, PseudoGt, RecordOutcome, RecordStatus, RefinementReport, RegressorEstimate,
};
pub use rotations::{
    cont6d_to_rotmat, dof_rotation, euler_to_rotmat, rotmat_to_euler, Cont6D, EulerAngles, EulerConvention, RotMat,
};
pub use skelify::{
    e_kp2d, e_pose, e_pose_terms, e_shape, estimate_camera, fit, fit_to_mesh, gradient, mesh_gradient, mesh_objective,
    rho_gm, total_objective, FitConfig, FitResult, FitState, Gradient, ObjectiveBreakdown, OptimizerSettings,
    ParamGroup, Stage, StageReport, TermWeights,
};
pub use synth::{synthetic_case, SynthSettings, SyntheticCase};
