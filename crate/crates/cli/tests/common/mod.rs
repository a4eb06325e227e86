#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skelkit::refine::RECORD_VERSION;
use skelkit::{
    make_toy_model, synthetic_case, DatasetRecord, FitConfig, FitState, ModelDefinition, ParamGroup, Provenance,
    PseudoGt, RegressorEstimate, Stage, SynthSettings, ToyModelSpec,
};

pub fn toy() -> &'static ModelDefinition {
    static MODEL: std::sync::OnceLock<ModelDefinition> = std::sync::OnceLock::new();
    MODEL.get_or_init(|| make_toy_model(&ToyModelSpec::default()))
}

pub fn skelkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skelkit"))
        .args(args)
        .env_remove("SKELKIT_MODEL")
        .env_remove("SKELKIT_CONFIG")
        .env_remove("SKELKIT_IN")
        .env_remove("SKELKIT_OUT")
        .env_remove("SKELKIT_GT")
        .env_remove("SKELKIT_REPORT")
        .output()
        .expect("run skelkit")
}

pub fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Synthetic record with the regressor estimate at the perturbed start.
/// Corrupted records store a label whose knees bend backwards.
pub fn synthetic_record(seed: u64, corrupt: bool) -> DatasetRecord {
    let m = toy();
    let case = synthetic_case(m, seed, &SynthSettings::default()).unwrap();
    let mut label = case.truth.q.clone();
    if corrupt {
        for name in ["left_knee", "right_knee"] {
            label.0[m.dof_range(m.joint_index(name).unwrap()).start] = -0.6;
        }
    }
    DatasetRecord {
        version: RECORD_VERSION,
        example_id: format!("ex{seed:04}"),
        image_id: format!("img{seed:04}"),
        bbox: [0.0, 0.0, 256.0, 256.0],
        keypoints2d: Some(case.keypoints.clone()),
        keypoints3d: None,
        pseudo_gt: Some(PseudoGt {
            q: label,
            beta: case.truth.beta.clone(),
            camera: None,
            objective: None,
        }),
        regressor: Some(RegressorEstimate {
            q: case.init.q.clone(),
            beta: case.init.beta.clone(),
            camera: case.init.camera,
        }),
        provenance: Provenance::InitialConversion,
    }
}

/// The state with every parameter jittered slightly.
pub fn near(state: &FitState, seed: u64) -> FitState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = state.clone();
    s.q.0.iter_mut().for_each(|v| *v += rng.random_range(-0.05..0.05));
    s.beta.0.iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
    s
}

/// Every parameter free in a single stage, as a one-shot conversion would
/// run.
pub fn joint_stage_config() -> FitConfig {
    FitConfig {
        stages: vec![Stage {
            free: vec![ParamGroup::Root, ParamGroup::Pose, ParamGroup::Shape],
            max_iterations: 3000,
            tolerance: 1e-6,
        }],
        ..FitConfig::default()
    }
}
