//! Face records, the JSON-lines manifest, selection filters, the random
//! train/validation/test split, and cropping into training samples.
//!
//! Manifest lines look like
//!
//! ```text
//! {"id":"f0001","image":"pages/f0001.png","bbox":[12,30,96,104],"flags":[],
//!  "annotations":[{"labeler":"a","points":[[x,y],null,...]}],"merged":null,"completed":null}
//! ```
//!
//! with exactly 60 entries per landmark array and `null` for absent slots.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::SimilarityTransform;
use crate::imaging::{GrayImage, PAPER_WHITE};
use crate::schema::{LandmarkSet, Point};

/// Faces whose box is narrower or shorter than this are excluded.
pub const MIN_FACE_SIDE: f64 = 80.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExclusionFlag {
    Profile,
    TooSmall,
    InhumanFeatures,
    OccludedEyes,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl From<[f64; 4]> for BoundingBox {
    fn from([x, y, w, h]: [f64; 4]) -> Self {
        Self { x, y, w, h }
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl BoundingBox {
    pub fn center(&self) -> Point {
        Point::new(self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x >= 0.0
            && self.y >= 0.0
            && self.w > 0.0
            && self.h > 0.0
            && self.x + self.w <= width
            && self.y + self.h <= height
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub labeler: String,
    pub points: LandmarkSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceRecord {
    pub id: String,
    /// Image path, relative to the image root.
    pub image: String,
    pub bbox: BoundingBox,
    #[serde(default)]
    pub flags: Vec<ExclusionFlag>,
    #[serde(default)]
    pub annotations: Vec<Annotation>,
    #[serde(default)]
    pub merged: Option<LandmarkSet>,
    #[serde(default)]
    pub completed: Option<LandmarkSet>,
    /// Optimistic-concurrency counter maintained by the annotation service.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub version: u64,
}

fn is_zero(v: &u64) -> bool {
    *v == 0
}

impl FaceRecord {
    pub fn new(id: impl Into<String>, image: impl Into<String>, bbox: BoundingBox) -> Self {
        Self {
            id: id.into(),
            image: image.into(),
            bbox,
            flags: Vec::new(),
            annotations: Vec::new(),
            merged: None,
            completed: None,
            version: 0,
        }
    }

    pub fn image_path(&self, root: &Path) -> PathBuf {
        root.join(&self.image)
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<FaceRecord>> {
    let text = fs::read_to_string(path)?;
    parse_manifest(&text, path)
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<Vec<FaceRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Serializes records one per line.
pub fn manifest_to_string(records: &[FaceRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, records: &[FaceRecord]) -> Result<()> {
    write_atomic(path, manifest_to_string(records)?.as_bytes())
}

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordError {
    pub id: String,
    pub message: String,
}

#[derive(Clone, Debug, Default)]
pub struct IngestReport {
    pub records: Vec<FaceRecord>,
    pub errors: Vec<RecordError>,
}

/// Loads the manifest and checks every record against its image: the file
/// must exist and the bounding box must lie inside it. Failing records are
/// reported and dropped; a malformed line fails the whole ingest.
pub fn ingest_manifest(path: &Path, image_root: &Path) -> Result<IngestReport> {
    let records = read_manifest(path)?;
    let mut report = IngestReport::default();
    let mut seen = HashSet::new();
    for record in records {
        let fail = |message: String| RecordError {
            id: record.id.clone(),
            message,
        };
        if !seen.insert(record.id.clone()) {
            report.errors.push(fail("duplicate record id".into()));
            continue;
        }
        let image = record.image_path(image_root);
        match image::image_dimensions(&image) {
            Err(e) => report
                .errors
                .push(fail(format!("cannot read image {}: {e}", image.display()))),
            Ok((w, h)) if !record.bbox.within(w as f64, h as f64) => report.errors.push(fail(
                format!("bounding box {:?} exceeds image bounds {w}x{h}", record.bbox),
            )),
            Ok(_) => report.records.push(record),
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub id: String,
    pub reasons: Vec<ExclusionFlag>,
}

/// Splits records into kept and excluded. The size rule is computed here; the
/// other reasons are human judgments carried as manifest flags.
pub fn apply_selection_filters(records: Vec<FaceRecord>) -> (Vec<FaceRecord>, Vec<Exclusion>) {
    let mut kept = Vec::new();
    let mut excluded = Vec::new();
    for r in records {
        let mut reasons = r.flags.clone();
        if r.bbox.w < MIN_FACE_SIDE || r.bbox.h < MIN_FACE_SIDE {
            reasons.push(ExclusionFlag::TooSmall);
        }
        reasons.sort();
        reasons.dedup();
        if reasons.is_empty() {
            kept.push(r);
        } else {
            excluded.push(Exclusion { id: r.id, reasons });
        }
    }
    (kept, excluded)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitLabel {
    Train,
    Validation,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub id: String,
    pub set: SplitLabel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub seed: u64,
    /// Train, validation, test fractions.
    pub ratios: [f64; 3],
    /// One entry per record, in input order.
    pub assignments: Vec<SplitEntry>,
}

impl SplitAssignment {
    pub fn ids(&self, label: SplitLabel) -> Vec<&str> {
        self.assignments
            .iter()
            .filter(|e| e.set == label)
            .map(|e| e.id.as_str())
            .collect()
    }

    pub fn count(&self, label: SplitLabel) -> usize {
        self.assignments.iter().filter(|e| e.set == label).count()
    }
}

/// Random split under `seed`: test and validation each get
/// `floor(ratio · N)` records, train gets the remainder.
pub fn split(ids: &[String], ratios: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    if ids.len() < 3 {
        return Err(Error::Config(format!(
            "need at least 3 records to split, got {}",
            ids.len()
        )));
    }
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be fractions summing to 1")));
    }
    let n = ids.len();
    let take = |r: f64| ((r * n as f64) + 1e-9).floor() as usize;
    let n_test = take(ratios[2]);
    let n_val = take(ratios[1]);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut labels = vec![SplitLabel::Train; n];
    for &i in &order[..n_test] {
        labels[i] = SplitLabel::Test;
    }
    for &i in &order[n_test..n_test + n_val] {
        labels[i] = SplitLabel::Validation;
    }
    Ok(SplitAssignment {
        seed,
        ratios,
        assignments: ids
            .iter()
            .zip(labels)
            .map(|(id, set)| SplitEntry { id: id.clone(), set })
            .collect(),
    })
}

/// Maps between original image coordinates and a square sample canvas.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropFrame {
    /// Top-left corner of the square crop in image coordinates.
    pub origin: Point,
    /// Side of the square crop in image pixels.
    pub side: f64,
    pub canvas: usize,
}

impl CropFrame {
    /// The bounding box expanded to a square about its center.
    pub fn from_bbox(bbox: &BoundingBox, canvas: usize) -> Self {
        let side = bbox.w.max(bbox.h);
        let c = bbox.center();
        Self {
            origin: Point::new(c.x - side / 2.0, c.y - side / 2.0),
            side,
            canvas,
        }
    }

    fn ratio(&self) -> f64 {
        self.canvas as f64 / self.side
    }

    pub fn to_sample(&self, p: Point) -> Point {
        let c = self.canvas as f64;
        let d = p - self.origin;
        Point::new(d.x * c / self.side, d.y * c / self.side)
    }

    pub fn to_image(&self, q: Point) -> Point {
        self.origin + q * (self.side / self.canvas as f64)
    }

    /// Image → sample mapping as a similarity transform.
    pub fn transform(&self) -> SimilarityTransform {
        let r = self.ratio();
        SimilarityTransform::new(r, 0.0, -self.origin.x * r, -self.origin.y * r)
    }

    /// Resamples the crop onto the canvas. Downscaling averages a grid of
    /// bilinear taps per output pixel.
    pub fn resample(&self, image: &GrayImage) -> GrayImage {
        let step = self.side / self.canvas as f64;
        let taps = step.ceil().clamp(1.0, 4.0) as usize;
        let inv = 1.0 / (taps * taps) as f64;
        GrayImage::from_fn(self.canvas, self.canvas, |x, y| {
            let base = self.to_image(Point::new(x as f64, y as f64));
            let mut acc = 0.0;
            for j in 0..taps {
                for i in 0..taps {
                    let off = Point::new(
                        (i as f64 + 0.5) / taps as f64 - 0.5,
                        (j as f64 + 0.5) / taps as f64 - 0.5,
                    ) * step;
                    let off = if taps == 1 { Point::ORIGIN } else { off };
                    acc += image.sample_bilinear(base + off, PAPER_WHITE);
                }
            }
            acc * inv
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    /// Canvas-sized grayscale crop, values in [0, 1].
    pub image: GrayImage,
    /// All 60 landmarks in canvas coordinates.
    pub landmarks: LandmarkSet,
    pub record_id: String,
    /// Augmentation copy index, `None` for the unaugmented crop.
    pub augmentation: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct CroppedSample {
    pub sample: TrainingSample,
    pub frame: CropFrame,
    /// Landmarks that fall outside the canvas after cropping. They stay
    /// present with their out-of-canvas coordinates.
    pub outside: Vec<usize>,
}

/// Crops the record's square-expanded bounding box to the canvas and maps
/// its completed landmarks into canvas coordinates.
pub fn crop_and_normalize(record: &FaceRecord, image: &GrayImage, canvas: usize) -> Result<CroppedSample> {
    let landmarks = record
        .completed
        .ok_or_else(|| Error::Config(format!("record {} has no completed landmarks", record.id)))?;
    landmarks.complete_points()?;
    let frame = CropFrame::from_bbox(&record.bbox, canvas);
    let mapped = landmarks.map_points(|p| frame.to_sample(p));
    let limit = canvas as f64;
    let outside: Vec<usize> = mapped
        .iter_present()
        .filter(|(_, p)| !(0.0..=limit).contains(&p.x) || !(0.0..=limit).contains(&p.y))
        .map(|(i, _)| i)
        .collect();
    if !outside.is_empty() {
        log::warn!(
            "record {}: {} landmarks fall outside the crop",
            record.id,
            outside.len()
        );
    }
    Ok(CroppedSample {
        sample: TrainingSample {
            image: frame.resample(image),
            landmarks: mapped,
            record_id: record.id.clone(),
            augmentation: None,
        },
        frame,
        outside,
    })
}

/// Loads and crops records in parallel, preserving input order.
pub fn load_samples(records: &[&FaceRecord], image_root: &Path, canvas: usize) -> Result<Vec<CroppedSample>> {
    records
        .par_iter()
        .map(|r| {
            let image = GrayImage::load(r.image_path(image_root))?;
            crop_and_normalize(r, &image, canvas)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::normalized_error;
    use crate::geometry::Transform2D;
    use crate::schema::NUM_LANDMARKS;

    fn bbox(x: f64, y: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox { x, y, w, h }
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("r{i}")).collect()
    }

    #[test]
    fn manifest_parse_errors_carry_line_numbers() {
        let good = serde_json::to_string(&FaceRecord::new("a", "a.png", bbox(0.0, 0.0, 90.0, 90.0))).unwrap();
        let text = format!("{good}\n\n{{not json\n");
        match parse_manifest(&text, Path::new("m.jsonl")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_manifest("", Path::new("m")).unwrap().is_empty());
    }

    #[test]
    fn ingest_collects_record_level_errors() {
        let dir = tempfile::tempdir().unwrap();
        GrayImage::filled(120, 100, 1.0).save_png(dir.path().join("ok.png")).unwrap();
        let records = vec![
            FaceRecord::new("a", "ok.png", bbox(0.0, 0.0, 100.0, 100.0)),
            FaceRecord::new("b", "missing.png", bbox(0.0, 0.0, 90.0, 90.0)),
            FaceRecord::new("c", "ok.png", bbox(10.0, 10.0, 100.0, 80.0)),
            FaceRecord::new("d", "ok.png", bbox(30.0, 10.0, 100.0, 80.0)),
        ];
        let manifest = dir.path().join("m.jsonl");
        write_manifest(&manifest, &records).unwrap();
        let report = ingest_manifest(&manifest, dir.path()).unwrap();
        let kept: Vec<&str> = report.records.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(kept, vec!["a", "c"]);
        let failed: Vec<&str> = report.errors.iter().map(|e| e.id.as_str()).collect();
        assert_eq!(failed, vec!["b", "d"]);
    }

    #[test]
    fn selection_filter_examples() {
        let mut profile = FaceRecord::new("p", "x.png", bbox(0.0, 0.0, 200.0, 200.0));
        profile.flags.push(ExclusionFlag::Profile);
        let records = vec![
            FaceRecord::new("small", "x.png", bbox(0.0, 0.0, 79.0, 200.0)),
            FaceRecord::new("edge", "x.png", bbox(0.0, 0.0, 80.0, 80.0)),
            profile,
        ];
        let (kept, excluded) = apply_selection_filters(records);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].id, "edge");
        assert_eq!(excluded[0].reasons, vec![ExclusionFlag::TooSmall]);
        assert_eq!(excluded[1].reasons, vec![ExclusionFlag::Profile]);
        let (again, none) = apply_selection_filters(kept.clone());
        assert_eq!(again, kept);
        assert!(none.is_empty());
    }

    #[test]
    fn split_sizes_and_determinism() {
        let s = split(&ids(10), [0.8, 0.1, 0.1], 3).unwrap();
        assert_eq!(
            (s.count(SplitLabel::Train), s.count(SplitLabel::Validation), s.count(SplitLabel::Test)),
            (8, 1, 1)
        );
        let s = split(&ids(1446), [0.8, 0.1, 0.1], 3).unwrap();
        assert_eq!(
            (s.count(SplitLabel::Train), s.count(SplitLabel::Validation), s.count(SplitLabel::Test)),
            (1158, 144, 144)
        );
        assert_eq!(s, split(&ids(1446), [0.8, 0.1, 0.1], 3).unwrap());
        assert_ne!(s, split(&ids(1446), [0.8, 0.1, 0.1], 4).unwrap());
        assert!(split(&ids(2), [0.8, 0.1, 0.1], 0).is_err());
        assert!(split(&ids(20), [0.8, 0.3, 0.1], 0).is_err());
    }

    #[test]
    fn split_is_a_partition_for_any_seed() {
        let all = ids(57);
        for seed in 0..20 {
            let s = split(&all, [0.8, 0.1, 0.1], seed).unwrap();
            assert_eq!(s.assignments.len(), 57);
            let listed: Vec<&str> = s.assignments.iter().map(|e| e.id.as_str()).collect();
            assert_eq!(listed, all.iter().map(String::as_str).collect::<Vec<_>>());
            assert_eq!(s.count(SplitLabel::Test), 5);
        }
    }

    fn record_with_landmarks(b: BoundingBox) -> FaceRecord {
        let mut r = FaceRecord::new("x", "x.png", b);
        let mut pts = [Point::ORIGIN; NUM_LANDMARKS];
        for (i, p) in pts.iter_mut().enumerate() {
            let a = i as f64 * 0.41;
            *p = Point::new(b.x + b.w * (0.5 + 0.4 * a.cos()), b.y + b.h * (0.5 + 0.4 * a.sin()));
        }
        pts[0] = Point::new(b.x, b.y);
        pts[1] = b.center();
        r.completed = Some(LandmarkSet::from_points(pts));
        r
    }

    #[test]
    fn crop_frame_mapping() {
        let b = bbox(40.0, 30.0, 100.0, 100.0);
        let r = record_with_landmarks(b);
        let img = GrayImage::filled(200, 200, 0.5);
        let c = crop_and_normalize(&r, &img, 112).unwrap();
        assert_eq!(c.sample.landmarks.get(0), Some(Point::new(0.0, 0.0)));
        assert_eq!(c.sample.landmarks.get(1), Some(Point::new(56.0, 56.0)));
        assert!(c.outside.is_empty());
        for (i, p) in r.completed.unwrap().iter_present() {
            let back = c.frame.to_image(c.sample.landmarks.get(i).unwrap());
            assert!(back.dist(p) < 1e-6);
        }
        assert_eq!(c.sample.image.width(), 112);
        assert!(c.sample.image.data().iter().all(|v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn crop_of_rectangular_box_is_square_about_center() {
        let f = CropFrame::from_bbox(&bbox(10.0, 20.0, 80.0, 120.0), 64);
        assert_eq!(f.side, 120.0);
        assert_eq!(f.origin, Point::new(-10.0, 20.0));
        let t = f.transform();
        let p = Point::new(33.0, 71.0);
        assert!(t.apply_point(p).dist(f.to_sample(p)) < 1e-12);
    }

    #[test]
    fn crop_preserves_normalized_error() {
        let b = bbox(5.0, 7.0, 90.0, 130.0);
        let truth = record_with_landmarks(b);
        let pred = truth.completed.unwrap().map_points(|p| p + Point::new(1.5, -2.0));
        let frame = CropFrame::from_bbox(&b, 112);
        let before = normalized_error(&pred, truth.completed.as_ref().unwrap()).unwrap().normalized;
        let after = normalized_error(
            &pred.map_points(|p| frame.to_sample(p)),
            &truth.completed.unwrap().map_points(|p| frame.to_sample(p)),
        )
        .unwrap()
        .normalized;
        assert!((before - after).abs() < 1e-12);
    }

    #[test]
    fn crop_requires_completed_landmarks() {
        let r = FaceRecord::new("x", "x.png", bbox(0.0, 0.0, 90.0, 90.0));
        assert!(crop_and_normalize(&r, &GrayImage::filled(100, 100, 1.0), 32).is_err());
    }
}
