//! The 60-point manga face landmark model.
//!
//! Canonical index layout (pixel coordinates, y grows downward):
//!
//! | indices | group          | count |
//! |---------|----------------|-------|
//! | 0–16    | chin contour   | 17    |
//! | 17–21   | left eyebrow   | 5     |
//! | 22–26   | right eyebrow  | 5     |
//! | 27      | nose tip       | 1     |
//! | 28–37   | left eye       | 10    |
//! | 38      | left pupil     | 1     |
//! | 39–48   | right eye      | 10    |
//! | 49      | right pupil    | 1     |
//! | 50–59   | mouth line     | 10    |
//!
//! "Left" and "right" are in image coordinates. The chin runs from the left
//! temple (index 0) to the right temple (index 16); those two endpoints define
//! the chin distance used to normalize errors. Each eye contour is ordered
//! clockwise in image coordinates starting at its leftmost point, so relative
//! indices 0–4 trace the upper eyelid.

use std::fmt;
use std::ops::{Add, Mul, Range, Sub};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub const NUM_LANDMARKS: usize = 60;

/// Canonical index of the first chin-contour landmark.
pub const CHIN_FIRST: usize = 0;
/// Canonical index of the last chin-contour landmark.
pub const CHIN_LAST: usize = 16;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const ORIGIN: Point = Point { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dot(self, other: Point) -> f64 {
        self.x * other.x + self.y * other.y
    }
}

impl Add for Point {
    type Output = Point;
    fn add(self, o: Point) -> Point {
        Point::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Point {
    type Output = Point;
    fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Point {
    type Output = Point;
    fn mul(self, k: f64) -> Point {
        Point::new(self.x * k, self.y * k)
    }
}

/// Arithmetic mean of a nonempty point list.
pub fn centroid(points: &[Point]) -> Point {
    debug_assert!(!points.is_empty());
    let n = points.len() as f64;
    let (sx, sy) = points
        .iter()
        .fold((0.0, 0.0), |(sx, sy), p| (sx + p.x, sy + p.y));
    Point::new(sx / n, sy / n)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LandmarkGroup {
    ChinContour,
    LeftEyebrow,
    RightEyebrow,
    Nose,
    LeftEye,
    LeftPupil,
    RightEye,
    RightPupil,
    Mouth,
}

impl LandmarkGroup {
    /// All groups in canonical index order.
    pub const ALL: [LandmarkGroup; 9] = [
        LandmarkGroup::ChinContour,
        LandmarkGroup::LeftEyebrow,
        LandmarkGroup::RightEyebrow,
        LandmarkGroup::Nose,
        LandmarkGroup::LeftEye,
        LandmarkGroup::LeftPupil,
        LandmarkGroup::RightEye,
        LandmarkGroup::RightPupil,
        LandmarkGroup::Mouth,
    ];

    pub const fn range(self) -> Range<usize> {
        match self {
            LandmarkGroup::ChinContour => 0..17,
            LandmarkGroup::LeftEyebrow => 17..22,
            LandmarkGroup::RightEyebrow => 22..27,
            LandmarkGroup::Nose => 27..28,
            LandmarkGroup::LeftEye => 28..38,
            LandmarkGroup::LeftPupil => 38..39,
            LandmarkGroup::RightEye => 39..49,
            LandmarkGroup::RightPupil => 49..50,
            LandmarkGroup::Mouth => 50..60,
        }
    }

    pub const fn len(self) -> usize {
        let r = self.range();
        r.end - r.start
    }

    pub const fn is_empty(self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for LandmarkGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Returns the group owning a canonical landmark index.
pub fn group_of(index: usize) -> Result<LandmarkGroup> {
    LandmarkGroup::ALL
        .into_iter()
        .find(|g| g.range().contains(&index))
        .ok_or(Error::IndexOutOfRange(index))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupState {
    Complete,
    Partial,
    Missing,
}

/// Sixty landmark slots with per-slot presence.
///
/// Absent slots always hold the origin, so equality compares only the
/// visible content.
#[derive(Clone, Copy, PartialEq)]
pub struct LandmarkSet {
    points: [Point; NUM_LANDMARKS],
    present: [bool; NUM_LANDMARKS],
}

impl Default for LandmarkSet {
    fn default() -> Self {
        Self::empty()
    }
}

impl fmt::Debug for LandmarkSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.slots()).finish()
    }
}

impl LandmarkSet {
    pub const fn empty() -> Self {
        Self {
            points: [Point::ORIGIN; NUM_LANDMARKS],
            present: [false; NUM_LANDMARKS],
        }
    }

    pub fn from_points(points: [Point; NUM_LANDMARKS]) -> Self {
        Self {
            points,
            present: [true; NUM_LANDMARKS],
        }
    }

    /// Builds a set from exactly 60 optional slots.
    pub fn from_slots(slots: &[Option<Point>]) -> Result<Self> {
        if slots.len() != NUM_LANDMARKS {
            return Err(Error::ShapeMismatch(format!(
                "expected {NUM_LANDMARKS} landmark slots, got {}",
                slots.len()
            )));
        }
        let mut set = Self::empty();
        for (i, s) in slots.iter().enumerate() {
            if let Some(p) = s {
                set.set(i, *p);
            }
        }
        Ok(set)
    }

    pub fn get(&self, index: usize) -> Option<Point> {
        self.present[index].then_some(self.points[index])
    }

    pub fn is_present(&self, index: usize) -> bool {
        self.present[index]
    }

    pub fn set(&mut self, index: usize, p: Point) {
        self.points[index] = p;
        self.present[index] = true;
    }

    pub fn clear(&mut self, index: usize) {
        self.points[index] = Point::ORIGIN;
        self.present[index] = false;
    }

    pub fn clear_group(&mut self, group: LandmarkGroup) {
        for i in group.range() {
            self.clear(i);
        }
    }

    pub fn slots(&self) -> impl Iterator<Item = Option<Point>> + '_ {
        (0..NUM_LANDMARKS).map(move |i| self.get(i))
    }

    pub fn present_count(&self) -> usize {
        self.present.iter().filter(|&&p| p).count()
    }

    pub fn is_complete(&self) -> bool {
        self.present.iter().all(|&p| p)
    }

    /// All 60 points, or an error if any slot is absent.
    pub fn complete_points(&self) -> Result<&[Point; NUM_LANDMARKS]> {
        if self.is_complete() {
            Ok(&self.points)
        } else {
            Err(Error::IncompleteSet {
                missing: NUM_LANDMARKS - self.present_count(),
            })
        }
    }

    pub fn group_state(&self, group: LandmarkGroup) -> GroupState {
        let n = group.range().filter(|&i| self.present[i]).count();
        if n == group.len() {
            GroupState::Complete
        } else if n == 0 {
            GroupState::Missing
        } else {
            GroupState::Partial
        }
    }

    pub fn group_complete(&self, group: LandmarkGroup) -> bool {
        self.group_state(group) == GroupState::Complete
    }

    /// The group's points in canonical order, if all are present.
    pub fn group_points(&self, group: LandmarkGroup) -> Result<Vec<Point>> {
        group
            .range()
            .map(|i| self.get(i).ok_or(Error::IncompleteGroup(group)))
            .collect()
    }

    /// Maps every present point through `f`; absent slots stay absent.
    pub fn map_points(&self, mut f: impl FnMut(Point) -> Point) -> Self {
        let mut out = *self;
        for i in 0..NUM_LANDMARKS {
            if self.present[i] {
                out.points[i] = f(self.points[i]);
            }
        }
        out
    }

    /// Present points with their canonical indices.
    pub fn iter_present(&self) -> impl Iterator<Item = (usize, Point)> + '_ {
        (0..NUM_LANDMARKS).filter_map(move |i| self.get(i).map(|p| (i, p)))
    }
}

impl Serialize for LandmarkSet {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let slots: Vec<Option<[f64; 2]>> = self.slots().map(|p| p.map(|p| [p.x, p.y])).collect();
        slots.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for LandmarkSet {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let slots: Vec<Option<[f64; 2]>> = Vec::deserialize(deserializer)?;
        let points: Vec<Option<Point>> = slots
            .into_iter()
            .map(|s| s.map(|[x, y]| Point::new(x, y)))
            .collect();
        LandmarkSet::from_slots(&points).map_err(serde::de::Error::custom)
    }
}

/// Arithmetic mean of a group's points.
pub fn group_centroid(set: &LandmarkSet, group: LandmarkGroup) -> Result<Point> {
    Ok(centroid(&set.group_points(group)?))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValidationReport {
    /// Present landmarks lying outside `[0, width] × [0, height]`.
    pub out_of_bounds: Vec<(usize, Point)>,
    /// Groups with at least one absent landmark, in canonical order.
    pub incomplete_groups: Vec<LandmarkGroup>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.out_of_bounds.is_empty()
    }

    pub fn is_complete(&self) -> bool {
        self.incomplete_groups.is_empty()
    }
}

pub fn validate(set: &LandmarkSet, width: f64, height: f64) -> ValidationReport {
    let out_of_bounds = set
        .iter_present()
        .filter(|(_, p)| !(0.0..=width).contains(&p.x) || !(0.0..=height).contains(&p.y))
        .collect();
    let incomplete_groups = LandmarkGroup::ALL
        .into_iter()
        .filter(|&g| !set.group_complete(g))
        .collect();
    ValidationReport {
        out_of_bounds,
        incomplete_groups,
    }
}
