//! Labeling workflow on top of [`FaceRecord`]s.
//!
//! A task's status is derived from the record's content rather than stored:
//! completed landmarks win, then merged ones, then the number of labelings
//! and whether the first two disagree.

use serde::{Deserialize, Serialize};

use crate::dataset::{Annotation, BoundingBox, FaceRecord};
use crate::error::{Error, Result};
use crate::qc::{compare_labels, complete_all, merge_labels, Completion, DisagreementReport};
use crate::schema::LandmarkSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskStatus {
    Unlabeled,
    SingleLabeled,
    DoubleLabeled,
    Flagged,
    Merged,
    Completed,
}

impl std::str::FromStr for TaskStatus {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown task status {s:?}")))
    }
}

/// Disagreements between the first two labelings, if there are two.
pub fn disagreements(record: &FaceRecord, tolerance: f64) -> Option<DisagreementReport> {
    match record.annotations.as_slice() {
        [a, b, ..] => Some(compare_labels(&a.points, &b.points, tolerance)),
        _ => None,
    }
}

pub fn task_status(record: &FaceRecord, tolerance: f64) -> TaskStatus {
    if record.completed.is_some() {
        return TaskStatus::Completed;
    }
    if record.merged.is_some() {
        return TaskStatus::Merged;
    }
    match record.annotations.len() {
        0 => TaskStatus::Unlabeled,
        1 => TaskStatus::SingleLabeled,
        _ => match disagreements(record, tolerance) {
            Some(r) if !r.is_clean() => TaskStatus::Flagged,
            _ => TaskStatus::DoubleLabeled,
        },
    }
}

/// Stores a labeler's landmarks, replacing any earlier ones from the same
/// labeler. Merged and completed results are cleared since they no longer
/// reflect the labels.
pub fn upsert_annotation(record: &mut FaceRecord, labeler: &str, points: LandmarkSet) {
    match record.annotations.iter_mut().find(|a| a.labeler == labeler) {
        Some(a) => a.points = points,
        None => record.annotations.push(Annotation {
            labeler: labeler.to_string(),
            points,
        }),
    }
    record.merged = None;
    record.completed = None;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "kebab-case")]
pub enum MergeOutcome {
    Merged { points: LandmarkSet },
    /// The labelings disagree; nothing was written.
    Flagged { report: DisagreementReport },
}

/// Merges the record's labels. A single labeling is taken as is; two are
/// averaged, but only when they agree within `tolerance` unless `force`.
pub fn merge_record(record: &mut FaceRecord, tolerance: f64, force: bool) -> Result<MergeOutcome> {
    let merged = match record.annotations.as_slice() {
        [] => return Err(Error::Empty("record has no annotations to merge")),
        [only] => only.points,
        [a, b, ..] => {
            let report = compare_labels(&a.points, &b.points, tolerance);
            if !report.is_clean() && !force {
                return Ok(MergeOutcome::Flagged { report });
            }
            merge_labels(&a.points, &b.points)
        }
    };
    if record.merged != Some(merged) {
        record.merged = Some(merged);
        record.completed = None;
    }
    Ok(MergeOutcome::Merged { points: merged })
}

/// Fills missing groups of the merged landmarks. With `dry_run` the record
/// is left untouched.
pub fn complete_record(record: &mut FaceRecord, dry_run: bool) -> Result<Completion> {
    let merged = record
        .merged
        .ok_or(Error::Empty("record has no merged landmarks to complete"))?;
    let completion = complete_all(&merged)?;
    if !dry_run {
        record.completed = Some(completion.set);
    }
    Ok(completion)
}

/// Serializable view of a record as an annotation task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub id: String,
    pub image: String,
    pub bbox: BoundingBox,
    pub status: TaskStatus,
    pub version: u64,
    pub annotations: Vec<Annotation>,
    pub merged: Option<LandmarkSet>,
    pub completed: Option<LandmarkSet>,
    pub disagreements: Option<DisagreementReport>,
}

impl AnnotationTask {
    pub fn from_record(record: &FaceRecord, tolerance: f64) -> Self {
        Self {
            id: record.id.clone(),
            image: record.image.clone(),
            bbox: record.bbox,
            status: task_status(record, tolerance),
            version: record.version,
            annotations: record.annotations.clone(),
            merged: record.merged,
            completed: record.completed,
            disagreements: disagreements(record, tolerance),
        }
    }
}
