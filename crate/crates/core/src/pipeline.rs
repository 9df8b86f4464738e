//! File-backed pipeline: ingest → merge → complete → filter → split →
//! augment → train → eval, plus predict.
//!
//! Each step reads earlier artifacts from the work directory and writes its
//! own atomically. A missing input names the step that produces it.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::annotation::{complete_record, merge_record, MergeOutcome};
use crate::augment::{augment_sample, PlannedCopy};
use crate::config::{Experiment, PipelineConfig};
use crate::dataset::{
    self, apply_selection_filters, ingest_manifest, load_samples, read_manifest, write_atomic, write_manifest,
    BoundingBox, CropFrame, Exclusion, FaceRecord, RecordError, SplitAssignment, SplitLabel, TrainingSample,
};
use crate::error::{Error, Result};
use crate::eval::{EvalReport, REFERENCE_RESULTS};
use crate::geometry::{compute_mean_shape, MeanShape};
use crate::imaging::GrayImage;
use crate::net::train::{train, TrainReport};
use crate::net::{checkpoint, forward, init_model, CascadeModel};
use crate::schema::LandmarkSet;

/// Artifact locations inside the work directory.
#[derive(Clone, Debug)]
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn records(&self) -> PathBuf {
        self.root.join("records.jsonl")
    }

    pub fn ingest_report(&self) -> PathBuf {
        self.root.join("ingest_report.json")
    }

    pub fn merge_report(&self) -> PathBuf {
        self.root.join("merge_report.json")
    }

    pub fn completion_report(&self) -> PathBuf {
        self.root.join("completion_report.json")
    }

    pub fn selection(&self) -> PathBuf {
        self.root.join("selection.json")
    }

    pub fn split(&self) -> PathBuf {
        self.root.join("split.json")
    }

    pub fn mean_shape(&self) -> PathBuf {
        self.root.join("mean_shape.json")
    }

    pub fn augmentation(&self) -> PathBuf {
        self.root.join("augmentation.jsonl")
    }

    pub fn model(&self, name: &str) -> PathBuf {
        self.root.join("models").join(format!("{name}.ckpt"))
    }

    pub fn loss_curve(&self, name: &str) -> PathBuf {
        self.root.join("models").join(format!("{name}.loss.csv"))
    }

    pub fn train_summary(&self, name: &str) -> PathBuf {
        self.root.join("models").join(format!("{name}.train.json"))
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(format!("{name}.json"))
    }

    pub fn ced(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(format!("{name}.ced.csv"))
    }

    pub fn summary(&self) -> PathBuf {
        self.root.join("reports").join("summary.csv")
    }

    pub fn predictions(&self) -> PathBuf {
        self.root.join("predictions.jsonl")
    }
}

fn workspace(cfg: &PipelineConfig) -> Workspace {
    Workspace::new(&cfg.paths.work_dir)
}

fn require(path: &Path, producer: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            producer,
        })
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn read_json<T: DeserializeOwned>(path: &Path, producer: &'static str) -> Result<T> {
    require(path, producer)?;
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

fn read_records(ws: &Workspace) -> Result<Vec<FaceRecord>> {
    require(&ws.records(), "ingest")?;
    read_manifest(&ws.records())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub accepted: usize,
    pub rejected: Vec<RecordError>,
}

/// Validates the manifest against its images and copies accepted records
/// into the work directory.
pub fn ingest(cfg: &PipelineConfig) -> Result<IngestSummary> {
    let ws = workspace(cfg);
    let report = ingest_manifest(&cfg.paths.manifest, &cfg.paths.image_root)?;
    write_manifest(&ws.records(), &report.records)?;
    let summary = IngestSummary {
        accepted: report.records.len(),
        rejected: report.errors,
    };
    write_json(&ws.ingest_report(), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlaggedTask {
    pub id: String,
    pub flagged: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeSummary {
    pub merged: usize,
    /// Double-labeled records whose labels disagree; left unmerged.
    pub flagged: Vec<FlaggedTask>,
    pub unlabeled: Vec<String>,
}

pub fn merge(cfg: &PipelineConfig) -> Result<MergeSummary> {
    let ws = workspace(cfg);
    let mut records = read_records(&ws)?;
    let mut summary = MergeSummary {
        merged: 0,
        flagged: Vec::new(),
        unlabeled: Vec::new(),
    };
    for r in records.iter_mut() {
        if r.annotations.is_empty() {
            summary.unlabeled.push(r.id.clone());
            continue;
        }
        match merge_record(r, cfg.dataset.tolerance, cfg.dataset.accept_flagged)? {
            MergeOutcome::Merged { .. } => summary.merged += 1,
            MergeOutcome::Flagged { report } => summary.flagged.push(FlaggedTask {
                id: r.id.clone(),
                flagged: report.flagged,
            }),
        }
    }
    write_manifest(&ws.records(), &records)?;
    write_json(&ws.merge_report(), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletionSummary {
    pub completed: usize,
    /// Landmarks synthesized across all records.
    pub filled: usize,
    pub failed: Vec<RecordError>,
}

pub fn complete(cfg: &PipelineConfig) -> Result<CompletionSummary> {
    let ws = workspace(cfg);
    let mut records = read_records(&ws)?;
    let mut summary = CompletionSummary {
        completed: 0,
        filled: 0,
        failed: Vec::new(),
    };
    for r in records.iter_mut().filter(|r| r.merged.is_some()) {
        match complete_record(r, false) {
            Ok(c) => {
                summary.completed += 1;
                summary.filled += c.filled.len();
            }
            Err(e) => summary.failed.push(RecordError {
                id: r.id.clone(),
                message: e.to_string(),
            }),
        }
    }
    write_manifest(&ws.records(), &records)?;
    write_json(&ws.completion_report(), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub selected: Vec<String>,
    pub excluded: Vec<Exclusion>,
    /// Records kept by the filters but lacking completed landmarks.
    pub incomplete: Vec<String>,
}

/// Applies the size rule and manual flags, and sets aside records that
/// have no completed landmarks.
pub fn filter(cfg: &PipelineConfig) -> Result<Selection> {
    let ws = workspace(cfg);
    let (kept, excluded) = apply_selection_filters(read_records(&ws)?);
    let (selected, incomplete): (Vec<_>, Vec<_>) = kept.into_iter().partition(|r| r.completed.is_some());
    let selection = Selection {
        selected: selected.into_iter().map(|r| r.id).collect(),
        excluded,
        incomplete: incomplete.into_iter().map(|r| r.id).collect(),
    };
    write_json(&ws.selection(), &selection)?;
    Ok(selection)
}

pub fn split(cfg: &PipelineConfig) -> Result<SplitAssignment> {
    let ws = workspace(cfg);
    let selection: Selection = read_json(&ws.selection(), "filter")?;
    let assignment = dataset::split(&selection.selected, cfg.dataset.split, cfg.seed)?;
    write_json(&ws.split(), &assignment)?;
    Ok(assignment)
}

fn records_for<'a>(
    records: &'a [FaceRecord],
    split: &SplitAssignment,
    label: SplitLabel,
) -> Result<Vec<&'a FaceRecord>> {
    let by_id: HashMap<&str, &FaceRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    split
        .ids(label)
        .into_iter()
        .map(|id| {
            by_id
                .get(id)
                .copied()
                .ok_or_else(|| Error::Config(format!("split names unknown record {id}")))
        })
        .collect()
}

fn load_split(cfg: &PipelineConfig, label: SplitLabel) -> Result<Vec<TrainingSample>> {
    let ws = workspace(cfg);
    let records = read_records(&ws)?;
    let split: SplitAssignment = read_json(&ws.split(), "split")?;
    let chosen = records_for(&records, &split, label)?;
    Ok(load_samples(&chosen, &cfg.paths.image_root, cfg.network.canvas)?
        .into_iter()
        .map(|c| c.sample)
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentSummary {
    pub train_samples: usize,
    pub planned_copies: usize,
}

/// Computes the mean shape of the training crops and the augmentation plan
/// for every training record.
pub fn augment(cfg: &PipelineConfig) -> Result<AugmentSummary> {
    let ws = workspace(cfg);
    let train = load_split(cfg, SplitLabel::Train)?;
    let shapes: Vec<LandmarkSet> = train.iter().map(|s| s.landmarks).collect();
    let mean = compute_mean_shape(&shapes, cfg.network.canvas, cfg.network.mean_shape_margin)?;
    write_json(&ws.mean_shape(), &mean)?;
    let mut lines = String::new();
    let mut planned = 0;
    for s in &train {
        for copy in crate::augment::plan_copies(&s.record_id, &cfg.augmentation, &mean, cfg.seed) {
            lines.push_str(&serde_json::to_string(&copy)?);
            lines.push('\n');
            planned += 1;
        }
    }
    write_atomic(&ws.augmentation(), lines.as_bytes())?;
    Ok(AugmentSummary {
        train_samples: train.len(),
        planned_copies: planned,
    })
}

fn read_plan(ws: &Workspace) -> Result<Vec<PlannedCopy>> {
    require(&ws.augmentation(), "augment")?;
    let text = std::fs::read_to_string(ws.augmentation())?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: ws.augmentation(),
                line: n + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Expands training samples by the stored plan.
fn apply_plan(samples: Vec<TrainingSample>, plan: &[PlannedCopy], keep_originals: bool) -> Vec<TrainingSample> {
    let mut by_id: HashMap<&str, Vec<&PlannedCopy>> = HashMap::new();
    for p in plan {
        by_id.entry(p.record_id.as_str()).or_default().push(p);
    }
    let mut out = Vec::new();
    for s in samples {
        let copies = by_id.get(s.record_id.as_str()).map(Vec::as_slice).unwrap_or(&[]);
        if keep_originals || copies.is_empty() {
            out.push(s.clone());
        }
        for p in copies {
            let mut a = augment_sample(&s, &p.params);
            a.augmentation = Some(p.copy);
            out.push(a);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub experiment: String,
    pub stages: usize,
    pub augmentation: bool,
    pub train_samples: usize,
    pub validation_samples: usize,
    pub report: TrainReport,
}

fn selected_experiments<'a>(cfg: &'a PipelineConfig, name: Option<&str>) -> Result<Vec<&'a Experiment>> {
    match name {
        Some(n) => Ok(vec![cfg.experiment(n)?]),
        None => Ok(cfg.experiments.iter().collect()),
    }
}

/// Trains the named experiment, or every experiment in the grid.
pub fn train_models(cfg: &PipelineConfig, name: Option<&str>) -> Result<Vec<TrainSummary>> {
    let ws = workspace(cfg);
    let experiments = selected_experiments(cfg, name)?;
    let mean: MeanShape = read_json(&ws.mean_shape(), "augment")?;
    let train_base = load_split(cfg, SplitLabel::Train)?;
    let val = load_split(cfg, SplitLabel::Validation)?;
    let plan = read_plan(&ws)?;
    let mut out = Vec::new();
    for e in experiments {
        let train_set = if e.augment {
            apply_plan(train_base.clone(), &plan, cfg.augmentation.retain_originals)
        } else {
            train_base.clone()
        };
        let mut net = cfg.network.clone();
        net.stages = e.stages;
        let mut model = init_model(&net, &mean, cfg.seed)?;
        let mut schedule = cfg.training.clone();
        schedule.seed = cfg.seed;
        log::info!("training {} on {} samples", e.name, train_set.len());
        let report = train(&mut model, &train_set, &val, &schedule)?;
        checkpoint::save(&model, &ws.model(&e.name))?;
        write_atomic(&ws.loss_curve(&e.name), report.to_csv().as_bytes())?;
        let summary = TrainSummary {
            experiment: e.name.clone(),
            stages: e.stages,
            augmentation: e.augment,
            train_samples: train_set.len(),
            validation_samples: val.len(),
            report,
        };
        write_json(&ws.train_summary(&e.name), &summary)?;
        out.push(summary);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub stages: usize,
    pub augmentation: bool,
    pub report: EvalReport,
}

/// Scores a model on samples whose landmarks are in canvas coordinates.
pub fn evaluate(model: &CascadeModel, samples: &[TrainingSample], threshold: f64) -> Result<EvalReport> {
    use rayon::prelude::*;
    let preds: Vec<LandmarkSet> = samples
        .par_iter()
        .map(|s| forward(model, &s.image))
        .collect::<Result<_>>()?;
    EvalReport::score(
        samples
            .iter()
            .zip(&preds)
            .map(|(s, p)| (s.record_id.as_str(), p, &s.landmarks)),
        threshold,
    )
}

/// Evaluates trained experiments on the test split and writes one report
/// per experiment plus a summary table.
pub fn eval(cfg: &PipelineConfig, name: Option<&str>) -> Result<Vec<ExperimentReport>> {
    let ws = workspace(cfg);
    let experiments = selected_experiments(cfg, name)?;
    let test = load_split(cfg, SplitLabel::Test)?;
    let mut out = Vec::new();
    for e in experiments {
        let model = checkpoint::load(&ws.model(&e.name))?;
        let report = evaluate(&model, &test, cfg.evaluation.threshold)?;
        write_atomic(&ws.ced(&e.name), report.ced_csv().as_bytes())?;
        let r = ExperimentReport {
            experiment: e.name.clone(),
            stages: e.stages,
            augmentation: e.augment,
            report,
        };
        write_json(&ws.report(&e.name), &r)?;
        out.push(r);
    }
    write_atomic(&ws.summary(), summary_csv(&out).as_bytes())?;
    Ok(out)
}

/// One row per experiment with the three headline statistics, followed by
/// the published reference rows for comparison.
pub fn summary_csv(reports: &[ExperimentReport]) -> String {
    let mut out = String::from("source,experiment,stages,augmentation,mean_error,auc,failure_rate_percent\n");
    for r in reports {
        out.push_str(&format!(
            "measured,{},{},{},{:.5},{:.5},{:.2}\n",
            r.experiment,
            r.stages,
            r.augmentation,
            r.report.mean_error,
            r.report.auc,
            100.0 * r.report.failure_rate
        ));
    }
    for r in REFERENCE_RESULTS {
        out.push_str(&format!(
            "reference,-,{},{},{:.5},{:.5},{:.2}\n",
            r.stages, r.augmentation, r.mean_error, r.auc, r.failure_rate_percent
        ));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub image: String,
    pub bbox: BoundingBox,
    pub experiment: String,
    /// All 60 landmarks in image coordinates.
    pub points: LandmarkSet,
}

/// Predicts landmarks for a face box in a full image, in image coordinates.
pub fn predict_landmarks(model: &CascadeModel, image: &GrayImage, bbox: &BoundingBox) -> Result<LandmarkSet> {
    let frame = CropFrame::from_bbox(bbox, model.config.canvas);
    let crop = frame.resample(image);
    Ok(forward(model, &crop)?.map_points(|q| frame.to_image(q)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictRequest {
    pub id: String,
    pub image: PathBuf,
    pub bbox: BoundingBox,
}

/// Runs a trained experiment on the given faces and writes the predictions
/// file (same landmark layout as the manifest).
pub fn predict(cfg: &PipelineConfig, name: &str, requests: &[PredictRequest]) -> Result<Vec<Prediction>> {
    let ws = workspace(cfg);
    let model = checkpoint::load(&ws.model(name))?;
    let mut out = Vec::with_capacity(requests.len());
    for r in requests {
        let image = GrayImage::load(&r.image)?;
        out.push(Prediction {
            id: r.id.clone(),
            image: r.image.display().to_string(),
            bbox: r.bbox,
            experiment: name.to_string(),
            points: predict_landmarks(&model, &image, &r.bbox)?,
        });
    }
    let mut lines = String::new();
    for p in &out {
        lines.push_str(&serde_json::to_string(p)?);
        lines.push('\n');
    }
    write_atomic(&ws.predictions(), lines.as_bytes())?;
    Ok(out)
}

/// Every step from ingest to eval.
pub fn run_all(cfg: &PipelineConfig) -> Result<Vec<ExperimentReport>> {
    ingest(cfg)?;
    merge(cfg)?;
    complete(cfg)?;
    filter(cfg)?;
    split(cfg)?;
    augment(cfg)?;
    train_models(cfg, None)?;
    eval(cfg, None)
}
