//! Keypoint fitting with joint-limit priors, and mesh-target fitting for
//! converting surface-mesh labels into skeleton parameters.
//!
//! The keypoint objective is
//!
//! ```text
//! E = w_kp * sum_i c_i * rho(|proj(X_i) - x_i|; sigma)
//!   + w_shape * |beta|^2
//!   + w_pose * sum_i [exp(l_i - q_i) + exp(q_i - u_i)]
//! ```
//!
//! with the Geman-McClure robustifier `rho(r; s) = r^2 s^2 / (r^2 + s^2)`.
//! Unbounded DoFs are left out of the pose term; one-sided limits contribute
//! only their own side. Stages are minimized in order with L-BFGS and a
//! backtracking line search that only ever accepts decreasing steps.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::body_model::{forward_kinematics, Mesh, ModelDefinition, PoseVector, ShapeVector};
use crate::camera::WeakPerspectiveCamera;
use crate::error::{Error, Result};
use crate::losses::KeypointSet2D;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Camera,
    /// DoFs of the root joint (global translation and orientation).
    Root,
    /// All non-root DoFs.
    Pose,
    Shape,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub free: Vec<ParamGroup>,
    pub max_iterations: usize,
    /// Relative objective decrease over `OptimizerSettings::window` accepted
    /// iterations below which the stage is considered converged.
    pub tolerance: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TermWeights {
    pub data: f64,
    pub shape: f64,
    pub pose: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerSettings {
    /// L-BFGS memory.
    pub history: usize,
    pub window: usize,
    pub max_line_search: usize,
    /// Stop when the free-gradient norm falls below this.
    pub gradient_tolerance: f64,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        OptimizerSettings {
            history: 10,
            window: 5,
            max_line_search: 40,
            gradient_tolerance: 1e-10,
            armijo: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub stages: Vec<Stage>,
    /// Weights of the keypoint objective; `data` scales the reprojection term.
    pub weights: TermWeights,
    /// Weights of the mesh objective; `data` scales the mean squared vertex
    /// distance.
    pub mesh_weights: TermWeights,
    /// Robustifier scale in normalized image units.
    pub sigma: f64,
    /// Keypoints below this confidence are ignored.
    pub min_confidence: f64,
    pub optimizer: OptimizerSettings,
}

impl Default for TermWeights {
    fn default() -> Self {
        TermWeights {
            data: 1.0,
            shape: 5e-3,
            pose: 5e-3,
        }
    }
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            stages: vec![
                Stage {
                    free: vec![ParamGroup::Camera, ParamGroup::Root],
                    max_iterations: 100,
                    tolerance: 1e-6,
                },
                Stage {
                    free: vec![
                        ParamGroup::Camera,
                        ParamGroup::Root,
                        ParamGroup::Pose,
                        ParamGroup::Shape,
                    ],
                    max_iterations: 500,
                    tolerance: 1e-6,
                },
            ],
            weights: TermWeights::default(),
            mesh_weights: TermWeights {
                data: 1.0,
                shape: 0.0,
                pose: 0.0,
            },
            sigma: 0.1,
            min_confidence: 0.3,
            optimizer: OptimizerSettings::default(),
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.stages.is_empty() {
            return bad("at least one stage is required".into());
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.free.is_empty() {
                return bad(format!("stage {i} frees no parameters"));
            }
            if !(s.tolerance >= 0.0) {
                return bad(format!("stage {i} tolerance must be non-negative"));
            }
        }
        for (name, w) in [("weights", &self.weights), ("mesh_weights", &self.mesh_weights)] {
            for v in [w.data, w.shape, w.pose] {
                if !(v >= 0.0 && v.is_finite()) {
                    return bad(format!("{name} must be finite and non-negative, got {v}"));
                }
            }
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be positive, got {}", self.sigma));
        }
        if !(0.0..=1.0).contains(&self.min_confidence) {
            return bad(format!(
                "min_confidence must lie in [0, 1], got {}",
                self.min_confidence
            ));
        }
        let o = &self.optimizer;
        if o.history == 0 || o.window == 0 || o.max_line_search == 0 {
            return bad("optimizer history, window and max_line_search must be positive".into());
        }
        Ok(())
    }
}

/// Parameters being fitted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitState {
    pub q: PoseVector,
    pub beta: ShapeVector,
    pub camera: WeakPerspectiveCamera,
}

impl FitState {
    pub fn rest(model: &ModelDefinition) -> Self {
        FitState {
            q: PoseVector::zeros(model.pose_dim()),
            beta: ShapeVector::zeros(model.shape_dim()),
            camera: WeakPerspectiveCamera::default(),
        }
    }

    fn check(&self, model: &ModelDefinition) -> Result<()> {
        model.check_pose(&self.q)?;
        model.check_shape(&self.beta)
    }
}

/// Unweighted term values, their weighted contributions and the total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveBreakdown {
    pub data: f64,
    pub shape: f64,
    pub pose: f64,
    pub weighted_data: f64,
    pub weighted_shape: f64,
    pub weighted_pose: f64,
    pub total: f64,
}

impl ObjectiveBreakdown {
    fn new(data: f64, shape: f64, pose: f64, w: &TermWeights) -> Self {
        let (wd, ws, wp) = (w.data * data, w.shape * shape, w.pose * pose);
        ObjectiveBreakdown {
            data,
            shape,
            pose,
            weighted_data: wd,
            weighted_shape: ws,
            weighted_pose: wp,
            total: wd + ws + wp,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub iterations: usize,
    pub converged: bool,
    pub objective: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub q: PoseVector,
    pub beta: ShapeVector,
    pub camera: WeakPerspectiveCamera,
    pub objective: ObjectiveBreakdown,
    pub initial_objective: ObjectiveBreakdown,
    pub converged: bool,
    pub iterations: usize,
    pub stages: Vec<StageReport>,
    /// Objective after every accepted iterate, starting with the initial
    /// value.
    #[serde(default, skip_serializing)]
    pub trace: Vec<f64>,
}

impl FitResult {
    pub fn state(&self) -> FitState {
        FitState {
            q: self.q.clone(),
            beta: self.beta.clone(),
            camera: self.camera,
        }
    }
}

/// Geman-McClure penalty of a residual norm `r`.
pub fn rho_gm(r: f64, sigma: f64) -> f64 {
    let r2 = r * r;
    let s2 = sigma * sigma;
    r2 * s2 / (r2 + s2)
}

/// Derivative of the Geman-McClure penalty with respect to `r^2`.
fn rho_gm_dr2(r2: f64, sigma: f64) -> f64 {
    let s2 = sigma * sigma;
    let d = r2 + s2;
    s2 * s2 / (d * d)
}

fn kp_count_check(model: &ModelDefinition, kp: &KeypointSet2D) -> Result<()> {
    if kp.len() != model.keypoint_count() {
        return Err(Error::dims("keypoint count", model.keypoint_count(), kp.len()));
    }
    Ok(())
}

fn effective_confidence(kp: &KeypointSet2D, min_confidence: f64) -> Vec<f64> {
    kp.confidence()
        .iter()
        .map(|&c| if c >= min_confidence { c } else { 0.0 })
        .collect()
}

fn reprojection(
    projected: &[Vector2<f64>],
    kp: &KeypointSet2D,
    confidence: &[f64],
    sigma: f64,
) -> (f64, Vec<Vector2<f64>>) {
    let mut value = 0.0;
    let grads = projected
        .iter()
        .zip(kp.points())
        .zip(confidence)
        .map(|((p, t), &c)| {
            if c == 0.0 {
                return Vector2::zeros();
            }
            let r = p - t;
            let r2 = r.norm_squared();
            value += c * rho_gm(r2.sqrt(), sigma);
            r * (2.0 * c * rho_gm_dr2(r2, sigma))
        })
        .collect();
    (value, grads)
}

/// Robust reprojection energy, every keypoint weighted by its confidence.
pub fn e_kp2d(
    model: &ModelDefinition,
    q: &[f64],
    beta: &[f64],
    camera: &WeakPerspectiveCamera,
    keypoints: &KeypointSet2D,
    sigma: f64,
) -> Result<f64> {
    camera.validate()?;
    kp_count_check(model, keypoints)?;
    let posed = forward_kinematics(model, q, beta)?;
    let joints = model.keypoint_basis().evaluate(&posed, beta);
    let projected: Vec<_> = joints.iter().map(|x| camera.project_point(x)).collect();
    Ok(reprojection(&projected, keypoints, keypoints.confidence(), sigma).0)
}

pub fn e_shape(beta: &[f64]) -> f64 {
    beta.iter().map(|b| b * b).sum()
}

/// Exponential joint-limit prior.
pub fn e_pose(model: &ModelDefinition, q: &[f64]) -> Result<f64> {
    model.check_pose(q)?;
    Ok(pose_prior(model, q, None))
}

/// Per-DoF contributions to [`e_pose`]; zero for unbounded DoFs.
pub fn e_pose_terms(model: &ModelDefinition, q: &[f64]) -> Result<Vec<f64>> {
    model.check_pose(q)?;
    Ok(model
        .dofs()
        .zip(q)
        .map(|((_, dof), &v)| dof.lower.map_or(0.0, |l| (l - v).exp()) + dof.upper.map_or(0.0, |u| (v - u).exp()))
        .collect())
}

fn pose_prior(model: &ModelDefinition, q: &[f64], mut grad: Option<&mut [f64]>) -> f64 {
    let mut total = 0.0;
    for (i, ((_, dof), &v)) in model.dofs().zip(q).enumerate() {
        if let Some(l) = dof.lower {
            let e = (l - v).exp();
            total += e;
            if let Some(g) = grad.as_deref_mut() {
                g[i] -= e;
            }
        }
        if let Some(u) = dof.upper {
            let e = (v - u).exp();
            total += e;
            if let Some(g) = grad.as_deref_mut() {
                g[i] += e;
            }
        }
    }
    total
}

/// Gradient of the weighted objective split by parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    /// `(scale, tx, ty)`
    pub camera: [f64; 3],
    pub q: Vec<f64>,
    pub beta: Vec<f64>,
}

impl Gradient {
    pub fn norm(&self) -> f64 {
        self.camera
            .iter()
            .chain(&self.q)
            .chain(&self.beta)
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    fn flatten(&self) -> Vec<f64> {
        self.camera.iter().chain(&self.q).chain(&self.beta).copied().collect()
    }
}

/// Keypoint objective for one fixed set of observations.
struct KeypointProblem<'a> {
    model: &'a ModelDefinition,
    keypoints: &'a KeypointSet2D,
    confidence: Vec<f64>,
    config: &'a FitConfig,
}

impl<'a> KeypointProblem<'a> {
    fn new(model: &'a ModelDefinition, keypoints: &'a KeypointSet2D, config: &'a FitConfig) -> Result<Self> {
        config.validate()?;
        kp_count_check(model, keypoints)?;
        Ok(KeypointProblem {
            model,
            keypoints,
            confidence: effective_confidence(keypoints, config.min_confidence),
            config,
        })
    }

    fn evaluate(&self, state: &FitState, want_grad: bool) -> Result<(ObjectiveBreakdown, Option<Gradient>)> {
        state.camera.validate()?;
        let model = self.model;
        let w = &self.config.weights;
        let posed = forward_kinematics(model, &state.q, &state.beta)?;
        let joints = model.keypoint_basis().evaluate(&posed, &state.beta);
        let projected: Vec<_> = joints.iter().map(|x| state.camera.project_point(x)).collect();
        let (data, d_proj) = reprojection(&projected, self.keypoints, &self.confidence, self.config.sigma);
        let shape = e_shape(&state.beta);
        let mut g_prior = vec![0.0; model.pose_dim()];
        let pose = pose_prior(model, &state.q, Some(&mut g_prior));
        let breakdown = ObjectiveBreakdown::new(data, shape, pose, w);
        if !want_grad {
            return Ok((breakdown, None));
        }

        let mut camera = [0.0; 3];
        let mut d_joints = Vec::with_capacity(joints.len());
        for (x, g) in joints.iter().zip(&d_proj) {
            let g = g * w.data;
            let (dc, dx) = state.camera.backprop_point(x, &g);
            for (a, b) in camera.iter_mut().zip(dc) {
                *a += b;
            }
            d_joints.push(dx);
        }
        let (mut dq, mut dbeta) = model.keypoint_basis().backprop(model, &posed, &state.beta, &d_joints);
        for (a, b) in dq.iter_mut().zip(&g_prior) {
            *a += w.pose * b;
        }
        for (a, b) in dbeta.iter_mut().zip(state.beta.iter()) {
            *a += w.shape * 2.0 * b;
        }
        Ok((
            breakdown,
            Some(Gradient {
                camera,
                q: dq,
                beta: dbeta,
            }),
        ))
    }
}

/// Weighted keypoint objective and its breakdown.
pub fn total_objective(
    model: &ModelDefinition,
    state: &FitState,
    keypoints: &KeypointSet2D,
    config: &FitConfig,
) -> Result<ObjectiveBreakdown> {
    state.check(model)?;
    Ok(KeypointProblem::new(model, keypoints, config)?
        .evaluate(state, false)?
        .0)
}

/// Analytic gradient of [`total_objective`]. Entries outside `free` are zero.
pub fn gradient(
    model: &ModelDefinition,
    state: &FitState,
    keypoints: &KeypointSet2D,
    config: &FitConfig,
    free: &[ParamGroup],
) -> Result<Gradient> {
    state.check(model)?;
    let problem = KeypointProblem::new(model, keypoints, config)?;
    let mut g = problem.evaluate(state, true)?.1.expect("gradient requested");
    let mask = ParamMask::new(model, free, true);
    mask.apply(&mut g);
    Ok(g)
}

/// Which packed coordinates `[scale, tx, ty, q.., beta..]` are free.
struct ParamMask {
    free: Vec<bool>,
}

impl ParamMask {
    fn new(model: &ModelDefinition, groups: &[ParamGroup], with_camera: bool) -> Self {
        let root = model.dof_range(model.root());
        let mut free = Vec::with_capacity(3 + model.pose_dim() + model.shape_dim());
        let cam = with_camera && groups.contains(&ParamGroup::Camera);
        free.extend([cam; 3]);
        for i in 0..model.pose_dim() {
            let group = if root.contains(&i) {
                ParamGroup::Root
            } else {
                ParamGroup::Pose
            };
            free.push(groups.contains(&group));
        }
        free.extend(std::iter::repeat_n(
            groups.contains(&ParamGroup::Shape),
            model.shape_dim(),
        ));
        ParamMask { free }
    }

    fn any(&self) -> bool {
        self.free.iter().any(|f| *f)
    }

    fn apply(&self, g: &mut Gradient) {
        let mut it = self.free.iter();
        for v in g.camera.iter_mut().chain(g.q.iter_mut()).chain(g.beta.iter_mut()) {
            if !*it.next().unwrap() {
                *v = 0.0;
            }
        }
    }

    fn gather(&self, full: &[f64]) -> Vec<f64> {
        full.iter()
            .zip(&self.free)
            .filter(|(_, f)| **f)
            .map(|(v, _)| *v)
            .collect()
    }

    fn scatter(&self, full: &mut [f64], x: &[f64]) {
        let mut it = x.iter();
        for (v, f) in full.iter_mut().zip(&self.free) {
            if *f {
                *v = *it.next().unwrap();
            }
        }
    }
}

fn pack(state: &FitState) -> Vec<f64> {
    let mut x = vec![
        state.camera.scale,
        state.camera.translation[0],
        state.camera.translation[1],
    ];
    x.extend_from_slice(&state.q);
    x.extend_from_slice(&state.beta);
    x
}

fn unpack(model: &ModelDefinition, x: &[f64]) -> FitState {
    let d = model.pose_dim();
    FitState {
        camera: WeakPerspectiveCamera {
            scale: x[0],
            translation: [x[1], x[2]],
        },
        q: PoseVector(x[3..3 + d].to_vec()),
        beta: ShapeVector(x[3 + d..].to_vec()),
    }
}

struct StageOutcome {
    x: Vec<f64>,
    value: f64,
    iterations: usize,
    converged: bool,
}

/// L-BFGS over the free coordinates. `eval` returns `None` for infeasible
/// points, which the line search treats as an infinite objective.
fn minimize<F>(
    mut eval: F,
    x0: Vec<f64>,
    f0: f64,
    stage: &Stage,
    settings: &OptimizerSettings,
    trace: &mut Vec<f64>,
) -> StageOutcome
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let mut x = x0;
    let (mut f, mut g) = match eval(&x) {
        Some((v, g)) => (v, g),
        None => {
            return StageOutcome {
                x,
                value: f0,
                iterations: 0,
                converged: false,
            }
        }
    };
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut history = vec![f];
    let mut iterations = 0;
    let mut converged = false;
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();

    while iterations < stage.max_iterations {
        let gnorm = dot(&g, &g).sqrt();
        if gnorm <= settings.gradient_tolerance {
            converged = true;
            break;
        }

        // Two-loop recursion.
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        let m = s_hist.len();
        let mut alpha = vec![0.0; m];
        for i in (0..m).rev() {
            let rho = 1.0 / dot(&y_hist[i], &s_hist[i]);
            alpha[i] = rho * dot(&s_hist[i], &d);
            for (dv, yv) in d.iter_mut().zip(&y_hist[i]) {
                *dv -= alpha[i] * yv;
            }
        }
        if m > 0 {
            let gamma = dot(&s_hist[m - 1], &y_hist[m - 1]) / dot(&y_hist[m - 1], &y_hist[m - 1]);
            d.iter_mut().for_each(|v| *v *= gamma);
        } else {
            let scale = 1.0 / gnorm.max(1.0);
            d.iter_mut().for_each(|v| *v *= scale);
        }
        for i in 0..m {
            let rho = 1.0 / dot(&y_hist[i], &s_hist[i]);
            let beta = rho * dot(&y_hist[i], &d);
            for (dv, sv) in d.iter_mut().zip(&s_hist[i]) {
                *dv += (alpha[i] - beta) * sv;
            }
        }
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            s_hist.clear();
            y_hist.clear();
            let scale = 1.0 / gnorm.max(1.0);
            d = g.iter().map(|v| -v * scale).collect();
            slope = dot(&g, &d);
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..settings.max_line_search {
            let trial: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + step * b).collect();
            if let Some((ft, gt)) = eval(&trial) {
                if ft < f && ft <= f + settings.armijo * step * slope {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            if !s_hist.is_empty() {
                // Retry once from steepest descent before giving up.
                s_hist.clear();
                y_hist.clear();
                continue;
            }
            // No decrease along the steepest-descent direction either.
            converged = true;
            break;
        };

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
            if s_hist.len() == settings.history {
                s_hist.remove(0);
                y_hist.remove(0);
            }
            s_hist.push(s);
            y_hist.push(y);
        }
        x = x_new;
        f = f_new;
        g = g_new;
        iterations += 1;
        trace.push(f);
        history.push(f);

        let w = settings.window;
        if history.len() > w {
            let past = history[history.len() - 1 - w];
            if past - f <= stage.tolerance * past.abs() {
                converged = true;
                break;
            }
        }
    }
    debug_assert_eq!(x.len(), n);
    StageOutcome {
        x,
        value: f,
        iterations,
        converged,
    }
}

fn run_stages<E>(
    model: &ModelDefinition,
    init: &FitState,
    config: &FitConfig,
    with_camera: bool,
    initial: ObjectiveBreakdown,
    eval_full: E,
) -> (Vec<f64>, Vec<StageReport>, Vec<f64>)
where
    E: Fn(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let mut full = pack(init);
    let mut trace = vec![initial.total];
    let mut reports = Vec::new();
    let mut current = initial.total;
    for stage in &config.stages {
        let mask = ParamMask::new(model, &stage.free, with_camera);
        if !mask.any() {
            continue;
        }
        let base = full.clone();
        let eval = |x: &[f64]| {
            let mut y = base.clone();
            mask.scatter(&mut y, x);
            eval_full(&y).map(|(v, g)| (v, mask.gather(&g)))
        };
        let out = minimize(eval, mask.gather(&full), current, stage, &config.optimizer, &mut trace);
        mask.scatter(&mut full, &out.x);
        current = out.value;
        reports.push(StageReport {
            iterations: out.iterations,
            converged: out.converged,
            objective: out.value,
        });
    }
    (full, reports, trace)
}

fn finish(
    model: &ModelDefinition,
    full: &[f64],
    reports: Vec<StageReport>,
    trace: Vec<f64>,
    initial: ObjectiveBreakdown,
    objective: ObjectiveBreakdown,
) -> FitResult {
    let state = unpack(model, full);
    FitResult {
        q: state.q,
        beta: state.beta,
        camera: state.camera,
        objective,
        initial_objective: initial,
        converged: reports.last().is_none_or(|r| r.converged),
        iterations: reports.iter().map(|r| r.iterations).sum(),
        stages: reports,
        trace,
    }
}

/// Fits pose, shape and camera to 2D keypoints, one stage at a time.
pub fn fit(
    model: &ModelDefinition,
    keypoints: &KeypointSet2D,
    init: &FitState,
    config: &FitConfig,
) -> Result<FitResult> {
    init.check(model)?;
    let problem = KeypointProblem::new(model, keypoints, config)?;
    let initial = problem.evaluate(init, false)?.0;
    if !initial.total.is_finite() {
        return Err(Error::NonFiniteObjective);
    }
    let eval_full = |x: &[f64]| {
        let state = unpack(model, x);
        match problem.evaluate(&state, true) {
            Ok((b, Some(g))) if b.total.is_finite() => Some((b.total, g.flatten())),
            _ => None,
        }
    };
    let (full, reports, trace) = run_stages(model, init, config, true, initial, eval_full);
    let objective = problem.evaluate(&unpack(model, &full), false)?.0;
    Ok(finish(model, &full, reports, trace, initial, objective))
}

/// Least-squares weak-perspective camera mapping the model keypoints at
/// `(q, beta)` onto the observations, using confidences at or above
/// `min_confidence`. Falls back to unit scale when the fit is degenerate or
/// would flip the image.
pub fn estimate_camera(
    model: &ModelDefinition,
    q: &[f64],
    beta: &[f64],
    keypoints: &KeypointSet2D,
    min_confidence: f64,
) -> Result<WeakPerspectiveCamera> {
    kp_count_check(model, keypoints)?;
    let posed = forward_kinematics(model, q, beta)?;
    let joints = model.keypoint_basis().evaluate(&posed, beta);
    let conf = effective_confidence(keypoints, min_confidence);
    let total: f64 = conf.iter().sum();
    if total <= 0.0 {
        return Ok(WeakPerspectiveCamera::default());
    }
    let mean =
        |f: &dyn Fn(usize) -> Vector2<f64>| (0..conf.len()).map(|i| f(i) * conf[i]).sum::<Vector2<f64>>() / total;
    let mx = mean(&|i| joints[i].xy());
    let my = mean(&|i| keypoints.points()[i]);
    let (mut num, mut den) = (0.0, 0.0);
    for (i, c) in conf.iter().enumerate() {
        let a = joints[i].xy() - mx;
        num += c * a.dot(&(keypoints.points()[i] - my));
        den += c * a.norm_squared();
    }
    let scale = if den > 0.0 && num > 0.0 { num / den } else { 1.0 };
    let t = my - mx * scale;
    Ok(WeakPerspectiveCamera {
        scale,
        translation: [t.x, t.y],
    })
}

struct MeshProblem<'a> {
    model: &'a ModelDefinition,
    target: &'a Mesh,
    weights: TermWeights,
}

/// Gradient with respect to `(q, beta)`.
type PoseShapeGradient = (Vec<f64>, Vec<f64>);

impl MeshProblem<'_> {
    fn evaluate(
        &self,
        q: &[f64],
        beta: &[f64],
        want_grad: bool,
    ) -> Result<(ObjectiveBreakdown, Option<PoseShapeGradient>)> {
        let model = self.model;
        let w = &self.weights;
        let posed = forward_kinematics(model, q, beta)?;
        let verts = model.mesh_basis().evaluate(&posed, beta);
        let n = verts.len() as f64;
        let mut data = 0.0;
        let mut grads: Vec<Vector3<f64>> = Vec::with_capacity(verts.len());
        for (v, t) in verts.iter().zip(&self.target.vertices) {
            let e = v - t;
            data += e.norm_squared();
            grads.push(e * (2.0 * w.data / n));
        }
        data /= n;
        let shape = e_shape(beta);
        let mut g_prior = vec![0.0; model.pose_dim()];
        let pose = pose_prior(model, q, Some(&mut g_prior));
        let breakdown = ObjectiveBreakdown::new(data, shape, pose, w);
        if !want_grad {
            return Ok((breakdown, None));
        }
        let (mut dq, mut dbeta) = model.mesh_basis().backprop(model, &posed, beta, &grads);
        for (a, b) in dq.iter_mut().zip(&g_prior) {
            *a += w.pose * b;
        }
        for (a, b) in dbeta.iter_mut().zip(beta) {
            *a += w.shape * 2.0 * b;
        }
        Ok((breakdown, Some((dq, dbeta))))
    }
}

/// Mean squared vertex distance plus priors, weighted by
/// `config.mesh_weights`.
pub fn mesh_objective(
    model: &ModelDefinition,
    q: &[f64],
    beta: &[f64],
    target: &Mesh,
    config: &FitConfig,
) -> Result<ObjectiveBreakdown> {
    check_target(model, target)?;
    let problem = MeshProblem {
        model,
        target,
        weights: config.mesh_weights,
    };
    Ok(problem.evaluate(q, beta, false)?.0)
}

/// Analytic gradient of [`mesh_objective`] with respect to `(q, beta)`.
pub fn mesh_gradient(
    model: &ModelDefinition,
    q: &[f64],
    beta: &[f64],
    target: &Mesh,
    config: &FitConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_target(model, target)?;
    let problem = MeshProblem {
        model,
        target,
        weights: config.mesh_weights,
    };
    Ok(problem.evaluate(q, beta, true)?.1.expect("gradient requested"))
}

fn check_target(model: &ModelDefinition, target: &Mesh) -> Result<()> {
    if target.vertices.len() != model.vertex_count() {
        return Err(Error::dims(
            "target mesh vertex count",
            model.vertex_count(),
            target.vertices.len(),
        ));
    }
    Ok(())
}

/// Fits `(q, beta)` so the skinned mesh matches a target mesh of the same
/// topology. Camera groups in the stage list are ignored; the camera is
/// carried through from `init` unchanged.
pub fn fit_to_mesh(model: &ModelDefinition, target: &Mesh, init: &FitState, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    init.check(model)?;
    check_target(model, target)?;
    let problem = MeshProblem {
        model,
        target,
        weights: config.mesh_weights,
    };
    let initial = problem.evaluate(&init.q, &init.beta, false)?.0;
    if !initial.total.is_finite() {
        return Err(Error::NonFiniteObjective);
    }
    let d = model.pose_dim();
    let eval_full = |x: &[f64]| {
        let (q, beta) = (&x[3..3 + d], &x[3 + d..]);
        match problem.evaluate(q, beta, true) {
            Ok((b, Some((dq, db)))) if b.total.is_finite() => {
                let mut g = vec![0.0; 3];
                g.extend(dq);
                g.extend(db);
                Some((b.total, g))
            }
            _ => None,
        }
    };
    let (full, reports, trace) = run_stages(model, init, config, false, initial, eval_full);
    let objective = problem.evaluate(&full[3..3 + d], &full[3 + d..], false)?.0;
    Ok(finish(model, &full, reports, trace, initial, objective))
}
