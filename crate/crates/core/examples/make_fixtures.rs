//! Writes the toy model and a small synthetic dataset.
//!
//! ```text
//! cargo run -p skelkit --example make_fixtures -- <out-dir> [records]
//! ```

use std::path::PathBuf;

use skelkit::refine::RECORD_VERSION;
use skelkit::{
    make_toy_model, regress_joints, save_dataset, skin_mesh, synthetic_case, DatasetRecord, Provenance, PseudoGt,
    RegressorEstimate, SynthSettings, ToyModelSpec,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().ok_or("usage: make_fixtures <out-dir> [records]")?);
    let count: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(6);
    std::fs::create_dir_all(&dir)?;

    let model = make_toy_model(&ToyModelSpec::default());
    std::fs::write(
        dir.join("toy_model.json"),
        serde_json::to_string_pretty(model.document())? + "\n",
    )?;

    let knees: Vec<usize> = ["left_knee", "right_knee"]
        .iter()
        .map(|n| model.dof_range(model.joint_index(n).unwrap()).start)
        .collect();
    let mut records = Vec::new();
    for seed in 0..count {
        let case = synthetic_case(&model, seed, &SynthSettings::default())?;
        let joints = regress_joints(&model, &skin_mesh(&model, &case.truth.q, &case.truth.beta)?)?;
        // Every other stored label has its knees bent backwards.
        let mut label = case.truth.q.clone();
        if seed % 2 == 0 {
            for &k in &knees {
                label.0[k] = -0.6;
            }
        }
        records.push(DatasetRecord {
            version: RECORD_VERSION,
            example_id: format!("ex{seed:04}"),
            image_id: format!("img{seed:04}"),
            bbox: [0.0, 0.0, 256.0, 256.0],
            keypoints2d: Some(case.keypoints.clone()),
            keypoints3d: Some(joints.iter().map(|p| [p.x, p.y, p.z]).collect()),
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
        });
    }
    save_dataset(&records, dir.join("sample_dataset.jsonl"))?;
    Ok(())
}
