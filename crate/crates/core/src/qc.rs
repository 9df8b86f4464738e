//! Double-label comparison, merging, and geometric completion of missing
//! landmark groups.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{bounding_box, estimate_affine, Transform2D};
use crate::schema::{centroid, group_centroid, GroupState, LandmarkGroup, LandmarkSet, Point, NUM_LANDMARKS};

/// Default disagreement tolerance between two labelers, in image pixels.
pub const DEFAULT_TOLERANCE: f64 = 2.0;

/// Scale applied to the upper eyelid about the eye centroid when an eyebrow
/// is synthesized from it.
pub const EYELID_BROW_SCALE: f64 = 1.25;
/// Upward shift of a synthesized eyebrow, as a fraction of the eye height.
pub const EYELID_BROW_LIFT: f64 = 0.6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisagreementReport {
    /// Distance per landmark where both labelings have it.
    pub distances: Vec<Option<f64>>,
    /// Indices present in both labelings whose distance exceeds the tolerance.
    pub flagged: Vec<usize>,
    /// Indices present in exactly one labeling.
    pub presence_mismatch: Vec<usize>,
    pub tolerance: f64,
}

impl DisagreementReport {
    pub fn is_clean(&self) -> bool {
        self.flagged.is_empty()
    }
}

/// Flags landmarks whose two placements are strictly farther apart than
/// `tolerance`.
pub fn compare_labels(a: &LandmarkSet, b: &LandmarkSet, tolerance: f64) -> DisagreementReport {
    let mut distances = Vec::with_capacity(NUM_LANDMARKS);
    let mut flagged = Vec::new();
    let mut presence_mismatch = Vec::new();
    for i in 0..NUM_LANDMARKS {
        match (a.get(i), b.get(i)) {
            (Some(p), Some(q)) => {
                let d = p.dist(q);
                if d > tolerance {
                    flagged.push(i);
                }
                distances.push(Some(d));
            }
            (None, None) => distances.push(None),
            _ => {
                presence_mismatch.push(i);
                distances.push(None);
            }
        }
    }
    DisagreementReport {
        distances,
        flagged,
        presence_mismatch,
        tolerance,
    }
}

/// Spatial average where both labelings have a landmark; the lone placement
/// where only one does.
pub fn merge_labels(a: &LandmarkSet, b: &LandmarkSet) -> LandmarkSet {
    let mut out = LandmarkSet::empty();
    for i in 0..NUM_LANDMARKS {
        match (a.get(i), b.get(i)) {
            (Some(p), Some(q)) => out.set(i, Point::new((p.x + q.x) / 2.0, (p.y + q.y) / 2.0)),
            (Some(p), None) | (None, Some(p)) => out.set(i, p),
            (None, None) => {}
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    fn eye(self) -> LandmarkGroup {
        match self {
            Side::Left => LandmarkGroup::LeftEye,
            Side::Right => LandmarkGroup::RightEye,
        }
    }

    fn eyebrow(self) -> LandmarkGroup {
        match self {
            Side::Left => LandmarkGroup::LeftEyebrow,
            Side::Right => LandmarkGroup::RightEyebrow,
        }
    }

    fn pupil(self) -> LandmarkGroup {
        match self {
            Side::Left => LandmarkGroup::LeftPupil,
            Side::Right => LandmarkGroup::RightPupil,
        }
    }

    fn other(self) -> Side {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        }
    }
}

/// Result of a completion step: the updated set and which slots were written.
/// An empty `filled` list means the step was a no-op.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub set: LandmarkSet,
    pub filled: Vec<usize>,
}

impl Completion {
    fn unchanged(set: &LandmarkSet) -> Self {
        Self {
            set: *set,
            filled: Vec::new(),
        }
    }

    pub fn is_noop(&self) -> bool {
        self.filled.is_empty()
    }

    /// Writes `points` into the absent slots of `group`; present slots keep
    /// their labeled position.
    fn fill(&mut self, group: LandmarkGroup, points: &[Point]) {
        for (i, &p) in group.range().zip(points) {
            if !self.set.is_present(i) {
                self.set.set(i, p);
                self.filled.push(i);
            }
        }
    }
}

fn require(set: &LandmarkSet, groups: &[LandmarkGroup]) -> Result<()> {
    let missing: Vec<LandmarkGroup> = groups
        .iter()
        .copied()
        .filter(|&g| !set.group_complete(g))
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::Uncompletable(missing))
    }
}

/// Nose tip at the mean of the left-eye, right-eye and mouth centroids.
pub fn complete_nose(set: &LandmarkSet) -> Result<Completion> {
    if set.group_complete(LandmarkGroup::Nose) {
        return Ok(Completion::unchanged(set));
    }
    require(
        set,
        &[LandmarkGroup::LeftEye, LandmarkGroup::RightEye, LandmarkGroup::Mouth],
    )?;
    let nose = centroid(&[
        group_centroid(set, LandmarkGroup::LeftEye)?,
        group_centroid(set, LandmarkGroup::RightEye)?,
        group_centroid(set, LandmarkGroup::Mouth)?,
    ]);
    let mut out = Completion::unchanged(set);
    out.fill(LandmarkGroup::Nose, &[nose]);
    Ok(out)
}

/// Each absent pupil at the centroid of its eye's ten contour landmarks.
pub fn complete_pupils(set: &LandmarkSet) -> Result<Completion> {
    let mut out = Completion::unchanged(set);
    for side in [Side::Left, Side::Right] {
        if set.group_complete(side.pupil()) {
            continue;
        }
        require(set, &[side.eye()])?;
        let c = group_centroid(set, side.eye())?;
        out.fill(side.pupil(), &[c]);
    }
    Ok(out)
}

/// Synthesizes the eyebrow on `missing` from the opposite eyebrow, carried
/// over by the affine map fitted between the two eye contours.
pub fn complete_eyebrow_from_other(set: &LandmarkSet, missing: Side) -> Result<Completion> {
    let source = missing.other();
    if !set.group_complete(source.eyebrow()) || set.group_complete(missing.eyebrow()) {
        return Err(Error::EyebrowArity);
    }
    require(set, &[LandmarkGroup::LeftEye, LandmarkGroup::RightEye])?;
    let map = estimate_affine(
        &set.group_points(source.eye())?,
        &set.group_points(missing.eye())?,
    )?;
    let brow = map.apply_points(&set.group_points(source.eyebrow())?);
    let mut out = Completion::unchanged(set);
    out.fill(missing.eyebrow(), &brow);
    Ok(out)
}

/// Upward unit direction of the face, perpendicular to the line through the
/// two eye centroids. For level eyes this is `(0, -1)`.
fn face_up(set: &LandmarkSet) -> Result<Point> {
    let l = group_centroid(set, LandmarkGroup::LeftEye)?;
    let r = group_centroid(set, LandmarkGroup::RightEye)?;
    let across = r - l;
    let len = across.norm();
    if len == 0.0 {
        return Err(Error::Fit("eye centroids coincide"));
    }
    Ok(Point::new(across.y / len, -across.x / len))
}

/// Lifts one upper-eyelid point into an eyebrow point: scale about the eye
/// centroid, then shift along `up` by a fraction of the eye height.
pub fn lift_eyelid_point(p: Point, eye_centroid: Point, eye_height: f64, up: Point) -> Point {
    eye_centroid + (p - eye_centroid) * EYELID_BROW_SCALE + up * (EYELID_BROW_LIFT * eye_height)
}

/// Synthesizes both eyebrows from the upper eyelids (eye-relative indices
/// 0–4), scaled by 1.25 about the eye centroid and lifted by 0.6 eye heights.
///
/// "Up" and "height" are measured in the frame of the eye line, which reduces
/// to image `-y` and bounding-box height when the eyes are level and keeps
/// the rule equivariant under rotation.
pub fn complete_eyebrows_from_eyelids(set: &LandmarkSet) -> Result<Completion> {
    require(set, &[LandmarkGroup::LeftEye, LandmarkGroup::RightEye])?;
    let up = face_up(set)?;
    let across = Point::new(-up.y, up.x);
    let mut out = Completion::unchanged(set);
    for side in [Side::Left, Side::Right] {
        let eye = set.group_points(side.eye())?;
        let c = centroid(&eye);
        // Extent along `up`, measured in the rotated eye-line frame.
        let local: Vec<Point> = eye.iter().map(|&p| Point::new(p.dot(across), p.dot(up))).collect();
        let (lo, hi) = bounding_box(&local);
        let height = hi.y - lo.y;
        let brow: Vec<Point> = eye[..5]
            .iter()
            .map(|&p| lift_eyelid_point(p, c, height, up))
            .collect();
        out.fill(side.eyebrow(), &brow);
    }
    Ok(out)
}

/// Runs every completion rule in order (eyebrows, nose, pupils). Requires the
/// chin contour, mouth and both eyes; the result has all 60 landmarks.
pub fn complete_all(set: &LandmarkSet) -> Result<Completion> {
    require(
        set,
        &[
            LandmarkGroup::ChinContour,
            LandmarkGroup::Mouth,
            LandmarkGroup::LeftEye,
            LandmarkGroup::RightEye,
        ],
    )?;
    let mut filled = Vec::new();
    let left = set.group_state(LandmarkGroup::LeftEyebrow);
    let right = set.group_state(LandmarkGroup::RightEyebrow);
    let brows = match (left, right) {
        (GroupState::Complete, GroupState::Complete) => Completion::unchanged(set),
        (GroupState::Complete, _) => complete_eyebrow_from_other(set, Side::Right)?,
        (_, GroupState::Complete) => complete_eyebrow_from_other(set, Side::Left)?,
        _ => complete_eyebrows_from_eyelids(set)?,
    };
    filled.extend(brows.filled);
    let nose = complete_nose(&brows.set)?;
    filled.extend(nose.filled);
    let pupils = complete_pupils(&nose.set)?;
    filled.extend(pupils.filled);
    debug_assert!(pupils.set.is_complete());
    Ok(Completion {
        set: pupils.set,
        filled,
    })
}
