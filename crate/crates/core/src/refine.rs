//! Batch refinement of pseudo-ground-truth labels.
//!
//! Each record with 2D keypoints is refitted from a chosen initialization
//! and the new parameters replace the stored pseudo-ground truth only when
//! their objective is strictly lower than that of the stored parameters,
//! evaluated under the same configuration. Stored objectives therefore never
//! increase from one round to the next.
//!
//! Records are stored one JSON object per line; see `docs/formats.md`.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::body_model::{ModelDefinition, PoseVector, ShapeVector};
use crate::camera::WeakPerspectiveCamera;
use crate::error::{Error, Result};
use crate::losses::KeypointSet2D;
use crate::skelify::{estimate_camera, fit, total_objective, FitConfig, FitState, ParamGroup, Stage};

pub const RECORD_VERSION: u32 = 1;

/// Normalized keypoints must stay inside this box.
pub const KEYPOINT_RANGE: f64 = 1.5;

/// Where a record's pseudo-ground truth came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Provenance {
    InitialConversion,
    /// Accepted in refinement round `k` (1-based).
    Refined(u32),
}

impl Provenance {
    pub fn next(self) -> Provenance {
        match self {
            Provenance::InitialConversion => Provenance::Refined(1),
            Provenance::Refined(k) => Provenance::Refined(k + 1),
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::InitialConversion => f.write_str("initial-conversion"),
            Provenance::Refined(k) => write!(f, "refined-round-{k}"),
        }
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "initial-conversion" {
            return Ok(Provenance::InitialConversion);
        }
        s.strip_prefix("refined-round-")
            .and_then(|k| k.parse().ok())
            .filter(|k| *k > 0)
            .map(Provenance::Refined)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown provenance tag {s:?}")))
    }
}

impl TryFrom<String> for Provenance {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Provenance> for String {
    fn from(p: Provenance) -> String {
        p.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoGt {
    pub q: PoseVector,
    pub beta: ShapeVector,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera: Option<WeakPerspectiveCamera>,
    /// Objective at the time the label was stored.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressorEstimate {
    pub q: PoseVector,
    pub beta: ShapeVector,
    pub camera: WeakPerspectiveCamera,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub version: u32,
    pub example_id: String,
    pub image_id: String,
    /// `[x, y, width, height]` in pixels.
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keypoints2d: Option<KeypointSet2D>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keypoints3d: Option<Vec<[f64; 3]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo_gt: Option<PseudoGt>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regressor: Option<RegressorEstimate>,
    pub provenance: Provenance,
}

impl DatasetRecord {
    /// Checks the model-independent invariants.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.version != RECORD_VERSION {
            return Err(format!(
                "unsupported record version {} (expected {RECORD_VERSION})",
                self.version
            ));
        }
        if let Some(kp) = &self.keypoints2d {
            if let Some(p) = kp
                .points()
                .iter()
                .find(|p| !(p.x.abs() <= KEYPOINT_RANGE && p.y.abs() <= KEYPOINT_RANGE))
            {
                return Err(format!(
                    "keypoint ({}, {}) outside the normalized range [-{KEYPOINT_RANGE}, {KEYPOINT_RANGE}]",
                    p.x, p.y
                ));
            }
        }
        Ok(())
    }

    /// Checks the dimensions of every stored parameter set against `model`.
    pub fn check_model(&self, model: &ModelDefinition) -> Result<()> {
        if let Some(kp) = &self.keypoints2d {
            if kp.len() != model.keypoint_count() {
                return Err(Error::dims("keypoint count", model.keypoint_count(), kp.len()));
            }
        }
        if let Some(p) = &self.pseudo_gt {
            model.check_pose(&p.q)?;
            model.check_shape(&p.beta)?;
        }
        if let Some(r) = &self.regressor {
            model.check_pose(&r.q)?;
            model.check_shape(&r.beta)?;
        }
        Ok(())
    }

    pub fn keypoints3d(&self) -> Option<Vec<Vector3<f64>>> {
        self.keypoints3d
            .as_ref()
            .map(|k| k.iter().map(|p| Vector3::from(*p)).collect())
    }
}

/// Parses line-delimited records. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn parse_dataset(reader: impl BufRead) -> Result<Vec<DatasetRecord>> {
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse { line: i + 1, message };
        let record: DatasetRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        record.validate().map_err(parse_err)?;
        records.push(record);
    }
    Ok(records)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<DatasetRecord>> {
    let file = std::fs::File::open(path)?;
    parse_dataset(std::io::BufReader::new(file))
}

pub fn write_dataset(records: &[DatasetRecord], mut writer: impl Write) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut writer, r)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

pub fn save_dataset(records: &[DatasetRecord], path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_dataset(records, std::io::BufWriter::new(file))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitPolicy {
    #[default]
    RegressorEstimate,
    ExistingPseudoGt,
    /// Whichever of the two available starting points has the lower
    /// objective; ties go to the regressor estimate.
    BestOfBoth,
}

impl FromStr for InitPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regressor-estimate" => Ok(InitPolicy::RegressorEstimate),
            "existing-pseudo-gt" => Ok(InitPolicy::ExistingPseudoGt),
            "best-of-both" => Ok(InitPolicy::BestOfBoth),
            _ => Err(Error::InvalidConfig(format!(
                "unknown init policy {s:?} (expected regressor-estimate, existing-pseudo-gt or best-of-both)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitSource {
    RegressorEstimate,
    ExistingPseudoGt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum RecordStatus {
    Accepted,
    Rejected,
    /// No 2D keypoints; the record is copied unchanged.
    PassedThrough,
    /// The record could not be refitted; it is copied unchanged.
    Skipped {
        reason: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordOutcome {
    pub example_id: String,
    #[serde(flatten)]
    pub status: RecordStatus,
    pub init: Option<InitSource>,
    /// Objective of the stored pseudo-ground truth before this round.
    pub objective_before: Option<f64>,
    /// Objective of the fit computed this round.
    pub objective_fit: Option<f64>,
    /// Objective of the pseudo-ground truth stored after this round.
    pub objective_after: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinementReport {
    pub records: Vec<RecordOutcome>,
    pub accepted: usize,
    pub rejected: usize,
    pub passed_through: usize,
    pub skipped: usize,
    /// Accepted over accepted plus rejected; zero when nothing was refitted.
    pub acceptance_rate: f64,
}

impl RefinementReport {
    fn new(records: Vec<RecordOutcome>) -> Self {
        let count = |f: fn(&RecordStatus) -> bool| records.iter().filter(|r| f(&r.status)).count();
        let accepted = count(|s| matches!(s, RecordStatus::Accepted));
        let rejected = count(|s| matches!(s, RecordStatus::Rejected));
        let passed_through = count(|s| matches!(s, RecordStatus::PassedThrough));
        let skipped = count(|s| matches!(s, RecordStatus::Skipped { .. }));
        let decided = accepted + rejected;
        RefinementReport {
            acceptance_rate: if decided == 0 {
                0.0
            } else {
                accepted as f64 / decided as f64
            },
            records,
            accepted,
            rejected,
            passed_through,
            skipped,
        }
    }

    /// Mean stored objective over records that have one after the round.
    pub fn mean_objective_after(&self) -> Option<f64> {
        let v: Vec<f64> = self.records.iter().filter_map(|r| r.objective_after).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Pseudo-ground truth with a camera attached. A stored label without a
/// camera gets one by fitting only the camera to the keypoints.
fn pseudo_gt_state(
    model: &ModelDefinition,
    p: &PseudoGt,
    keypoints: &KeypointSet2D,
    config: &FitConfig,
) -> Result<FitState> {
    let mut state = FitState {
        q: p.q.clone(),
        beta: p.beta.clone(),
        camera: WeakPerspectiveCamera::default(),
    };
    match p.camera {
        Some(c) => state.camera = c,
        None => {
            state.camera = estimate_camera(model, &p.q, &p.beta, keypoints, config.min_confidence)?;
            let camera_only = FitConfig {
                stages: vec![Stage {
                    free: vec![ParamGroup::Camera],
                    max_iterations: config.stages.iter().map(|s| s.max_iterations).max().unwrap_or(100),
                    tolerance: config.stages[0].tolerance,
                }],
                ..config.clone()
            };
            state.camera = fit(model, keypoints, &state, &camera_only)?.camera;
        }
    }
    Ok(state)
}

fn refine_record(
    record: &DatasetRecord,
    model: &ModelDefinition,
    config: &FitConfig,
    policy: InitPolicy,
    round: Provenance,
) -> (DatasetRecord, RecordOutcome) {
    let mut outcome = RecordOutcome {
        example_id: record.example_id.clone(),
        status: RecordStatus::PassedThrough,
        init: None,
        objective_before: None,
        objective_fit: None,
        objective_after: None,
    };
    let Some(keypoints) = &record.keypoints2d else {
        outcome.objective_before = record.pseudo_gt.as_ref().and_then(|p| p.objective);
        outcome.objective_after = outcome.objective_before;
        return (record.clone(), outcome);
    };
    let skip = |mut outcome: RecordOutcome, reason: String| {
        outcome.objective_after = outcome.objective_before;
        outcome.status = RecordStatus::Skipped { reason };
        (record.clone(), outcome)
    };
    if let Err(e) = record.check_model(model) {
        return skip(outcome, e.to_string());
    }

    let existing = match &record.pseudo_gt {
        Some(p) => match pseudo_gt_state(model, p, keypoints, config)
            .and_then(|s| total_objective(model, &s, keypoints, config).map(|o| (s, o.total)))
        {
            Ok(v) => Some(v),
            Err(e) => return skip(outcome, format!("existing pseudo-ground truth: {e}")),
        },
        None => None,
    };
    outcome.objective_before = existing.as_ref().map(|(_, o)| *o);

    let from_regressor = record.regressor.as_ref().map(|r| FitState {
        q: r.q.clone(),
        beta: r.beta.clone(),
        camera: r.camera,
    });
    let from_existing = existing.as_ref().map(|(s, _)| s.clone());
    let init = match policy {
        InitPolicy::RegressorEstimate => from_regressor.map(|s| (InitSource::RegressorEstimate, s)),
        InitPolicy::ExistingPseudoGt => from_existing.map(|s| (InitSource::ExistingPseudoGt, s)),
        InitPolicy::BestOfBoth => {
            let score = |s: &FitState| {
                total_objective(model, s, keypoints, config)
                    .map(|o| o.total)
                    .unwrap_or(f64::INFINITY)
            };
            match (from_regressor, from_existing) {
                (Some(r), Some(e)) => Some(if score(&e) < score(&r) {
                    (InitSource::ExistingPseudoGt, e)
                } else {
                    (InitSource::RegressorEstimate, r)
                }),
                (Some(r), None) => Some((InitSource::RegressorEstimate, r)),
                (None, Some(e)) => Some((InitSource::ExistingPseudoGt, e)),
                (None, None) => None,
            }
        }
    };
    let Some((source, init)) = init else {
        return skip(outcome, format!("no initialization available under policy {policy:?}"));
    };
    outcome.init = Some(source);

    let result = match fit(model, keypoints, &init, config) {
        Ok(r) => r,
        Err(e) => return skip(outcome, format!("fit failed: {e}")),
    };
    let new_objective = result.objective.total;
    outcome.objective_fit = Some(new_objective);
    let accept = new_objective.is_finite() && outcome.objective_before.is_none_or(|before| new_objective < before);
    if !accept {
        outcome.status = RecordStatus::Rejected;
        outcome.objective_after = outcome.objective_before;
        return (record.clone(), outcome);
    }
    let mut updated = record.clone();
    updated.pseudo_gt = Some(PseudoGt {
        q: result.q,
        beta: result.beta,
        camera: Some(result.camera),
        objective: Some(new_objective),
    });
    updated.provenance = round;
    outcome.status = RecordStatus::Accepted;
    outcome.objective_after = Some(new_objective);
    (updated, outcome)
}

/// Refits every record in parallel. Output order matches input order and
/// the result does not depend on the number of worker threads.
pub fn refine_batch(
    records: &[DatasetRecord],
    model: &ModelDefinition,
    config: &FitConfig,
    policy: InitPolicy,
) -> Result<(Vec<DatasetRecord>, RefinementReport)> {
    config.validate()?;
    let (out, outcomes): (Vec<_>, Vec<_>) = records
        .par_iter()
        .map(|r| refine_record(r, model, config, policy, r.provenance.next()))
        .unzip();
    Ok((out, RefinementReport::new(outcomes)))
}
