use std::collections::HashMap;
use std::path::Path;

use anyhow::{anyhow, bail, Context};
use nalgebra::{Matrix3, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;
use skelkit::synth::perturb_pose;
use skelkit::{
    e_kp2d, estimate_camera, fit, fit_to_mesh, load_dataset, mpjpe, mpvpe, pa_mpjpe, pa_mpvpe, pck, project,
    refine_batch, regress_joints, save_dataset, skin_mesh, violation_audit, DatasetRecord, FitState, KeypointSet2D,
    Mesh, ModelDefinition, ObjectiveBreakdown, PoseBatch, PoseVector, RefinementReport, RotMat, ShapeVector,
    WeakPerspectiveCamera,
};

use crate::config::RunConfig;
use crate::io;

/// Keypoints are stored in crop coordinates where the longer side of the
/// bounding box spans `[-1, 1]`, so the box's longer side measures 2.
pub const CROP_EXTENT: f64 = 2.0;

/// Independent random stream for record `index`, so results do not depend
/// on which worker thread handles which record.
fn record_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// First error in input order, so diagnostics do not depend on scheduling.
fn first_error<T>(results: Vec<anyhow::Result<T>>) -> anyhow::Result<Vec<T>> {
    results.into_iter().collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum FitInit {
    /// The record's regressor estimate.
    Regressor,
    /// The record's stored pseudo-ground truth.
    PseudoGt,
    /// Rest pose and mean shape with a least-squares camera.
    Rest,
}

#[derive(Clone, Debug, Serialize)]
pub struct FitOutput {
    pub example_id: String,
    pub init: FitInit,
    pub q: PoseVector,
    pub beta: ShapeVector,
    pub camera: WeakPerspectiveCamera,
    pub objective: ObjectiveBreakdown,
    pub initial_objective: ObjectiveBreakdown,
    pub converged: bool,
    pub iterations: usize,
    /// Final over initial reprojection energy; absent when the start
    /// already had none.
    pub residual_reduction: Option<f64>,
    /// Model keypoints projected with the fitted camera.
    pub keypoints2d: KeypointSet2D,
    pub keypoints3d: Vec<[f64; 3]>,
}

fn fit_init(
    model: &ModelDefinition,
    record: &DatasetRecord,
    keypoints: &KeypointSet2D,
    init: FitInit,
    config: &RunConfig,
) -> anyhow::Result<FitState> {
    let state = match init {
        FitInit::Regressor => {
            let r = record
                .regressor
                .as_ref()
                .ok_or_else(|| anyhow!("no regressor estimate"))?;
            FitState {
                q: r.q.clone(),
                beta: r.beta.clone(),
                camera: r.camera,
            }
        }
        FitInit::PseudoGt => {
            let p = record
                .pseudo_gt
                .as_ref()
                .ok_or_else(|| anyhow!("no pseudo-ground truth"))?;
            let camera = match p.camera {
                Some(c) => c,
                None => estimate_camera(model, &p.q, &p.beta, keypoints, config.fit.min_confidence)?,
            };
            FitState {
                q: p.q.clone(),
                beta: p.beta.clone(),
                camera,
            }
        }
        FitInit::Rest => {
            let mut s = FitState::rest(model);
            s.camera = estimate_camera(model, &s.q, &s.beta, keypoints, config.fit.min_confidence)?;
            s
        }
    };
    Ok(state)
}

fn fit_record(
    model: &ModelDefinition,
    record: &DatasetRecord,
    index: usize,
    init: FitInit,
    config: &RunConfig,
) -> anyhow::Result<FitOutput> {
    let keypoints = record.keypoints2d.as_ref().ok_or_else(|| anyhow!("no 2D keypoints"))?;
    record.check_model(model)?;
    let mut state = fit_init(model, record, keypoints, init, config)?;
    if config.init_noise > 0.0 {
        state.q = perturb_pose(model, &state.q, config.init_noise, &mut record_rng(config.seed, index));
    }
    let result = fit(model, keypoints, &state, &config.fit)?;
    let initial_data = e_kp2d(model, &state.q, &state.beta, &state.camera, keypoints, config.fit.sigma)?;
    let final_data = e_kp2d(
        model,
        &result.q,
        &result.beta,
        &result.camera,
        keypoints,
        config.fit.sigma,
    )?;
    let joints = regress_joints(model, &skin_mesh(model, &result.q, &result.beta)?)?;
    let projected = project(&result.camera, &joints)?;
    Ok(FitOutput {
        example_id: record.example_id.clone(),
        init,
        residual_reduction: (initial_data > 0.0).then(|| final_data / initial_data),
        keypoints2d: KeypointSet2D::visible(projected),
        keypoints3d: joints.iter().map(|p| [p.x, p.y, p.z]).collect(),
        q: result.q,
        beta: result.beta,
        camera: result.camera,
        objective: result.objective,
        initial_objective: result.initial_objective,
        converged: result.converged,
        iterations: result.iterations,
    })
}

fn mesh_file_name(example_id: &str) -> anyhow::Result<String> {
    let ok = !example_id.is_empty()
        && !example_id.starts_with('.')
        && example_id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c));
    if !ok {
        bail!("example id {example_id:?} cannot be used as a file name");
    }
    Ok(format!("{example_id}.obj"))
}

pub fn cmd_fit(config: &RunConfig, init: FitInit, mesh_dir: Option<&Path>) -> anyhow::Result<()> {
    let model = config.model()?;
    let input = &config.inputs[0];
    let records = load_dataset(input).with_context(|| format!("reading {}", input.display()))?;
    if let Some(dir) = mesh_dir {
        if !dir.is_dir() {
            bail!("mesh directory {} does not exist", dir.display());
        }
    }
    let outputs = first_error(
        records
            .par_iter()
            .enumerate()
            .map(|(i, r)| fit_record(&model, r, i, init, config).with_context(|| format!("record {:?}", r.example_id)))
            .collect(),
    )?;
    if let Some(dir) = mesh_dir {
        for out in &outputs {
            let mesh = skin_mesh(&model, &out.q, &out.beta)?;
            io::write_file(
                &dir.join(mesh_file_name(&out.example_id)?),
                io::render_obj(&mesh, model.faces()).as_bytes(),
            )?;
        }
    }
    io::write_json_lines(config.output.as_deref().expect("fit output"), &outputs)?;

    let reductions: Vec<f64> = outputs.iter().filter_map(|o| o.residual_reduction).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    eprintln!(
        "fit: {} records, {} converged, mean residual reduction {:.3e}",
        outputs.len(),
        outputs.iter().filter(|o| o.converged).count(),
        mean(&reductions)
    );
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct ConvertOutput {
    pub q: PoseVector,
    pub beta: ShapeVector,
    pub objective: ObjectiveBreakdown,
    pub initial_objective: ObjectiveBreakdown,
    pub converged: bool,
    pub iterations: usize,
    pub mean_vertex_error: f64,
    pub max_vertex_error: f64,
    pub residual_threshold: f64,
    /// Set when the mean vertex error exceeds the threshold, which usually
    /// means the fit stalled in a local minimum far from the target.
    pub high_residual: bool,
}

fn params_or_rest(model: &ModelDefinition, value: Option<Value>) -> anyhow::Result<(PoseVector, ShapeVector)> {
    let Some(value) = value else {
        return Ok((
            PoseVector::zeros(model.pose_dim()),
            ShapeVector::zeros(model.shape_dim()),
        ));
    };
    let (q, mut beta) = io::params_of(&value)?.ok_or_else(|| anyhow!("no q/beta or pseudo_gt parameters found"))?;
    if beta.is_empty() {
        beta = ShapeVector::zeros(model.shape_dim());
    }
    Ok((q, beta))
}

pub fn cmd_convert(config: &RunConfig, init: Option<&Path>) -> anyhow::Result<()> {
    let model = config.model()?;
    let target = io::read_obj(&config.inputs[0])?;
    if !target.faces.is_empty() && !model.faces().is_empty() && target.faces != model.faces() {
        bail!("target mesh faces do not match the model topology");
    }
    let init_value = init.map(|p| io::read_json_record(p, None)).transpose()?;
    let (mut q, beta) = params_or_rest(&model, init_value)?;
    if config.init_noise > 0.0 {
        q = perturb_pose(&model, &q, config.init_noise, &mut record_rng(config.seed, 0));
    }
    let start = FitState {
        q,
        beta,
        camera: WeakPerspectiveCamera::default(),
    };
    let target = Mesh {
        vertices: target.vertices,
    };
    let result = fit_to_mesh(&model, &target, &start, &config.fit)?;
    let fitted = skin_mesh(&model, &result.q, &result.beta)?;
    let errors: Vec<f64> = fitted
        .vertices
        .iter()
        .zip(&target.vertices)
        .map(|(a, b)| (a - b).norm())
        .collect();
    let mean_vertex_error = errors.iter().sum::<f64>() / errors.len().max(1) as f64;
    let out = ConvertOutput {
        q: result.q,
        beta: result.beta,
        objective: result.objective,
        initial_objective: result.initial_objective,
        converged: result.converged,
        iterations: result.iterations,
        mean_vertex_error,
        max_vertex_error: errors.iter().copied().fold(0.0, f64::max),
        residual_threshold: config.residual_threshold,
        high_residual: !(mean_vertex_error <= config.residual_threshold),
    };
    io::write_json(config.output.as_deref().expect("convert output"), &out)?;
    if out.high_residual {
        eprintln!(
            "convert: warning: mean vertex error {:.3e} exceeds {:.3e}; the fit likely stopped in a local minimum",
            out.mean_vertex_error, out.residual_threshold
        );
    } else {
        eprintln!("convert: mean vertex error {:.3e}", out.mean_vertex_error);
    }
    Ok(())
}

#[derive(Serialize)]
struct RefineSummary<'a> {
    rounds: &'a [RefinementReport],
}

pub fn cmd_refine(config: &RunConfig, report: Option<&Path>) -> anyhow::Result<()> {
    let model = config.model()?;
    let input = &config.inputs[0];
    let mut records = load_dataset(input).with_context(|| format!("reading {}", input.display()))?;
    let mut reports = Vec::new();
    for round in 1..=config.rounds {
        let (next, r) = refine_batch(&records, &model, &config.fit, config.policy)?;
        eprintln!(
            "refine: round {round}: {} accepted, {} rejected, {} passed through, {} skipped, mean objective {}",
            r.accepted,
            r.rejected,
            r.passed_through,
            r.skipped,
            r.mean_objective_after()
                .map_or("n/a".to_string(), |m| format!("{m:.6e}"))
        );
        records = next;
        reports.push(r);
    }
    save_dataset(&records, config.output.as_deref().expect("refine output"))?;
    if let Some(path) = report {
        io::write_json(path, &RefineSummary { rounds: &reports })?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Metric {
    Pck,
    Mpjpe,
    PaMpjpe,
    Mpvpe,
    PaMpvpe,
}

pub const ALL_METRICS: [Metric; 5] = [
    Metric::Pck,
    Metric::Mpjpe,
    Metric::PaMpjpe,
    Metric::Mpvpe,
    Metric::PaMpvpe,
];

struct EvalSample {
    keypoints2d: Option<KeypointSet2D>,
    keypoints3d: Option<Vec<Vector3<f64>>>,
    vertices: Option<Vec<Vector3<f64>>>,
}

fn eval_sample(value: &Value, model: Option<&ModelDefinition>) -> anyhow::Result<EvalSample> {
    let to_points = |v: Vec<[f64; 3]>| v.into_iter().map(Vector3::from).collect::<Vec<_>>();
    let mut vertices = io::field::<Vec<[f64; 3]>>(value, "vertices")?.map(to_points);
    if vertices.is_none() {
        if let (Some(m), Some((q, beta))) = (model, io::params_of(value)?) {
            vertices = Some(skin_mesh(m, &q, &beta)?.vertices);
        }
    }
    Ok(EvalSample {
        keypoints2d: io::field(value, "keypoints2d")?,
        keypoints3d: io::field::<Vec<[f64; 3]>>(value, "keypoints3d")?.map(to_points),
        vertices,
    })
}

#[derive(Default)]
struct Column {
    sum: f64,
    count: usize,
}

impl Column {
    fn push(&mut self, v: f64) {
        self.sum += v;
        self.count += 1;
    }

    fn cell(&self) -> String {
        if self.count == 0 {
            "n/a".into()
        } else {
            format!("{:.6}", self.sum / self.count as f64)
        }
    }
}

pub struct EvalOptions {
    pub metrics: Vec<Metric>,
    pub root: Option<usize>,
    pub pck_normalizer: f64,
}

pub fn cmd_eval(config: &RunConfig, options: &EvalOptions) -> anyhow::Result<()> {
    let model = config.model.as_ref().map(|m| m.load()).transpose()?;
    let (pred_path, gt_path) = (&config.inputs[0], &config.inputs[1]);
    let mut gt = HashMap::new();
    for (line, value) in io::read_json_lines(gt_path)? {
        let id = io::example_id(&value, line).with_context(|| gt_path.display().to_string())?;
        if gt.insert(id.clone(), value).is_some() {
            bail!("{}: duplicate example_id {id:?}", gt_path.display());
        }
    }
    let preds = io::read_json_lines(pred_path)?;
    let mut pairs = Vec::with_capacity(preds.len());
    for (line, value) in &preds {
        let id = io::example_id(value, *line).with_context(|| pred_path.display().to_string())?;
        let g = gt.remove(&id).ok_or_else(|| {
            anyhow!(
                "{}: example {id:?} has no ground truth (or appears twice)",
                pred_path.display()
            )
        })?;
        pairs.push((id, value, g));
    }
    let unmatched = gt.len();

    let samples = first_error(
        pairs
            .par_iter()
            .map(|(id, p, g)| {
                let m = model.as_ref();
                let pair = || -> anyhow::Result<_> { Ok((eval_sample(p, m)?, eval_sample(g, m)?)) };
                pair().with_context(|| format!("example {id:?}"))
            })
            .collect(),
    )?;

    let thresholds = &config.pck_thresholds;
    let mut pck_cols: Vec<Column> = thresholds.iter().map(|_| Column::default()).collect();
    let (mut jpe, mut pa_jpe, mut vpe, mut pa_vpe) = (
        Column::default(),
        Column::default(),
        Column::default(),
        Column::default(),
    );
    let wants = |m: Metric| options.metrics.contains(&m);
    for ((id, _, _), (p, g)) in pairs.iter().zip(&samples) {
        let ctx = || format!("example {id:?}");
        if let (Some(pk), Some(gk)) = (&p.keypoints2d, &g.keypoints2d) {
            if wants(Metric::Pck) && gk.confidence().iter().any(|c| *c > 0.0) {
                let pred: Vec<Vector2<f64>> = pk.points().to_vec();
                for (col, t) in pck_cols.iter_mut().zip(thresholds) {
                    col.push(pck(&pred, gk, *t, options.pck_normalizer).with_context(ctx)?);
                }
            }
        }
        let mut roots = None;
        if let (Some(pj), Some(gj)) = (&p.keypoints3d, &g.keypoints3d) {
            if wants(Metric::Mpjpe) {
                jpe.push(mpjpe(pj, gj, options.root).with_context(ctx)?);
            }
            if wants(Metric::PaMpjpe) {
                pa_jpe.push(pa_mpjpe(pj, gj).with_context(ctx)?);
            }
            if let Some(r) = options.root {
                roots = pj.get(r).zip(gj.get(r)).map(|(a, b)| (*a, *b));
            }
        }
        if let (Some(pv), Some(gv)) = (&p.vertices, &g.vertices) {
            if wants(Metric::Mpvpe) {
                vpe.push(mpvpe(pv, gv, roots).with_context(ctx)?);
            }
            if wants(Metric::PaMpvpe) {
                pa_vpe.push(pa_mpvpe(pv, gv).with_context(ctx)?);
            }
        }
    }

    let mut rows: Vec<(String, &Column)> = Vec::new();
    if wants(Metric::Pck) {
        for (col, t) in pck_cols.iter().zip(thresholds) {
            rows.push((format!("PCK@{t}"), col));
        }
    }
    for (m, name, col) in [
        (Metric::Mpjpe, "MPJPE", &jpe),
        (Metric::PaMpjpe, "PA-MPJPE", &pa_jpe),
        (Metric::Mpvpe, "MPVPE", &vpe),
        (Metric::PaMpvpe, "PA-MPVPE", &pa_vpe),
    ] {
        if wants(m) {
            rows.push((name.to_string(), col));
        }
    }
    let name_w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max("metric".len());
    let cells: Vec<String> = rows.iter().map(|(_, c)| c.cell()).collect();
    let value_w = cells.iter().map(String::len).max().unwrap_or(0).max("value".len());
    let mut table = format!("{:<name_w$}  {:>value_w$}  {:>7}\n", "metric", "value", "samples");
    for ((name, col), cell) in rows.iter().zip(&cells) {
        table.push_str(&format!("{name:<name_w$}  {cell:>value_w$}  {:>7}\n", col.count));
    }
    table.push_str(&format!(
        "pairs {}, ground truth without prediction {unmatched}\n",
        pairs.len()
    ));
    io::emit(config.output.as_deref(), &table)
}

fn rotations_of(value: &Value) -> anyhow::Result<Option<Vec<RotMat>>> {
    let Some(rows) = io::field::<Vec<[[f64; 3]; 3]>>(value, "rotations")? else {
        return Ok(None);
    };
    rows.iter()
        .enumerate()
        .map(|(j, r)| {
            let m = Matrix3::from_fn(|i, k| r[i][k]);
            RotMat::from_matrix(m).with_context(|| format!("rotation of joint {j}"))
        })
        .collect::<anyhow::Result<Vec<_>>>()
        .map(Some)
}

pub fn cmd_audit(config: &RunConfig, joints: Option<&[String]>) -> anyhow::Result<()> {
    let model = config.model()?;
    let input = &config.inputs[0];
    let mut poses = Vec::new();
    let mut rotations = Vec::new();
    for (line, value) in io::read_json_lines(input)? {
        let ctx = || format!("{}: line {line}", input.display());
        if let Some(r) = rotations_of(&value).with_context(ctx)? {
            rotations.push(r);
        } else if let Some((q, _)) = io::params_of(&value).with_context(ctx)? {
            poses.push(q);
        } else {
            return Err(anyhow!("record has neither rotations nor pose parameters")).with_context(ctx);
        }
    }
    let batch = match (poses.is_empty(), rotations.is_empty()) {
        (_, true) => PoseBatch::Dofs(poses),
        (true, false) => PoseBatch::Rotations(rotations),
        (false, false) => bail!("{} mixes pose parameters and rotation matrices", input.display()),
    };
    let table = violation_audit(&batch, &model, &config.thresholds, joints)?;
    io::emit(config.output.as_deref(), &table.render())
}

pub fn cmd_export(config: &RunConfig, index: Option<usize>) -> anyhow::Result<()> {
    let model = config.model()?;
    let value = config
        .inputs
        .first()
        .map(|p| io::read_json_record(p, index))
        .transpose()?;
    let (q, beta) = params_or_rest(&model, value)?;
    let mesh = skin_mesh(&model, &q, &beta)?;
    io::write_file(
        config.output.as_deref().expect("export output"),
        io::render_obj(&mesh, model.faces()).as_bytes(),
    )?;
    eprintln!(
        "export: {} vertices, {} faces",
        mesh.vertices.len(),
        model.faces().len()
    );
    Ok(())
}
