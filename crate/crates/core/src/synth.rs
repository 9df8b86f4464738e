//! Procedural manga-style faces with exact ground-truth landmarks.
//!
//! Faces are built in a local frame (x right, y down, unit = face width,
//! temples at y = 0) from a handful of random shape parameters, then placed
//! on a white page by a random similarity. Line art is drawn with
//! antialiased strokes, so every landmark sits on or inside visible ink.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{
    crop_and_normalize, write_atomic, write_manifest, Annotation, BoundingBox, ExclusionFlag, FaceRecord,
    TrainingSample,
};
use crate::error::Result;
use crate::geometry::{SimilarityTransform, Transform2D};
use crate::imaging::{GrayImage, PAPER_WHITE};
use crate::schema::{centroid, LandmarkGroup, LandmarkSet, Point, NUM_LANDMARKS};

#[derive(Clone, Debug)]
pub struct SynthFace {
    /// All 60 landmarks in page coordinates.
    pub landmarks: LandmarkSet,
    pub bbox: BoundingBox,
    strokes: Vec<Stroke>,
}

#[derive(Clone, Debug)]
enum Stroke {
    Line { a: Point, b: Point, width: f64 },
    Disc { c: Point, r: f64 },
}

fn ellipse_contour(c: Point, rx: f64, ry_up: f64, ry_down: f64) -> Vec<Point> {
    // Clockwise on screen from the leftmost point: upper arc first.
    (0..10)
        .map(|k| {
            let phi = std::f64::consts::PI - k as f64 * std::f64::consts::TAU / 10.0;
            let s = phi.sin();
            let ry = if s >= 0.0 { ry_up } else { ry_down };
            Point::new(c.x + rx * phi.cos(), c.y - ry * s)
        })
        .collect()
}

fn polyline(points: &[Point], width: f64, closed: bool, out: &mut Vec<Stroke>) {
    for w in points.windows(2) {
        out.push(Stroke::Line { a: w[0], b: w[1], width });
    }
    if closed && points.len() > 2 {
        out.push(Stroke::Line {
            a: points[points.len() - 1],
            b: points[0],
            width,
        });
    }
}

/// Draws a random face whose bounding box has side about `face_px` pixels,
/// centered at `center` on the page.
pub fn random_face(rng: &mut impl Rng, face_px: f64, center: Point) -> SynthFace {
    let jaw_p = rng.random_range(1.4..3.0);
    let chin_h = rng.random_range(0.72..0.92);
    let eye_dx = rng.random_range(0.18..0.24);
    let eye_y = rng.random_range(0.12..0.22);
    let eye_rx = rng.random_range(0.075..0.105);
    let eye_up = rng.random_range(0.07..0.12);
    let eye_dn = rng.random_range(0.04..0.075);
    let brow_gap = rng.random_range(0.035..0.08);
    let brow_arch = rng.random_range(0.0..0.035);
    let brow_tilt = rng.random_range(-0.03..0.03);
    let mouth_y = chin_h * rng.random_range(0.62..0.74);
    let mouth_w = rng.random_range(0.06..0.13);
    let mouth_h = rng.random_range(0.012..0.05);
    let mouth_dx = rng.random_range(-0.02..0.02);

    let mut local = Vec::with_capacity(NUM_LANDMARKS);
    for k in 0..17 {
        let u = -1.0 + k as f64 / 8.0;
        local.push(Point::new(0.5 * u, chin_h * (1.0 - u.abs().powf(jaw_p))));
    }
    let eye_c = [Point::new(-eye_dx, eye_y), Point::new(eye_dx, eye_y)];
    let eyes: Vec<Vec<Point>> = eye_c.iter().map(|&c| ellipse_contour(c, eye_rx, eye_up, eye_dn)).collect();
    for (side, &c) in eye_c.iter().enumerate() {
        let sign = if side == 0 { 1.0 } else { -1.0 };
        for j in 0..5 {
            let t = -1.0 + j as f64 / 2.0;
            let x = c.x + 1.15 * eye_rx * t;
            let y = c.y - eye_up - brow_gap - brow_arch * (1.0 - t * t) + sign * brow_tilt * t;
            local.push(Point::new(x, y));
        }
    }
    let mouth = ellipse_contour(Point::new(mouth_dx, mouth_y), mouth_w, mouth_h, mouth_h * 1.3);
    let nose = {
        let c = centroid(&[centroid(&eyes[0]), centroid(&eyes[1]), centroid(&mouth)]);
        c + Point::new(rng.random_range(-0.015..0.015), rng.random_range(-0.01..0.03))
    };
    local.push(nose);
    for eye in &eyes {
        local.extend(eye.iter().copied());
        local.push(centroid(eye));
    }
    local.extend(mouth.iter().copied());
    debug_assert_eq!(local.len(), NUM_LANDMARKS);

    // Head box in local units: hair ±0.6, forehead to 0.5 above, chin.
    let top = -0.5;
    let bottom = chin_h + 0.05;
    let local_center = Point::new(0.0, (top + bottom) / 2.0);
    let extent = (bottom - top).max(1.1);
    let scale = face_px / extent;
    let rotation = rng.random_range(-15f64..15.0).to_radians();
    let t = SimilarityTransform::about(Point::ORIGIN, scale, rotation, center)
        .compose(&SimilarityTransform::new(1.0, 0.0, -local_center.x, -local_center.y));

    let mut strokes = Vec::new();
    let px = 1.0 / scale;
    let line = 1.6 * px;
    let chin: Vec<Point> = local[..17].to_vec();
    polyline(&chin, line, false, &mut strokes);
    polyline(&local[17..22], 2.2 * px, false, &mut strokes);
    polyline(&local[22..27], 2.2 * px, false, &mut strokes);
    for eye in &eyes {
        polyline(&eye[..6], 2.4 * px, false, &mut strokes);
        polyline(&eye[5..], line, false, &mut strokes);
        strokes.push(Stroke::Line {
            a: eye[9],
            b: eye[0],
            width: line,
        });
        let c = centroid(eye);
        strokes.push(Stroke::Disc {
            c,
            r: 0.55 * eye_rx.min(eye_dn),
        });
    }
    polyline(&mouth, line, true, &mut strokes);
    strokes.push(Stroke::Line {
        a: nose + Point::new(-0.01, -0.035),
        b: nose,
        width: line,
    });
    // Hairline and a few strands above the forehead.
    let hair: Vec<Point> = (0..=12)
        .map(|k| {
            let a = std::f64::consts::PI * (1.0 + k as f64 / 12.0);
            Point::new(0.56 * a.cos(), 0.5 * a.sin() - 0.02)
        })
        .collect();
    polyline(&hair, line, false, &mut strokes);
    for _ in 0..rng.random_range(2..5) {
        let x = rng.random_range(-0.4..0.4);
        let a = Point::new(x, -0.42 + 0.3 * x * x);
        let b = Point::new(x + rng.random_range(-0.12..0.12), rng.random_range(-0.12..-0.02));
        strokes.push(Stroke::Line { a, b, width: line });
    }

    let strokes = strokes
        .into_iter()
        .map(|s| match s {
            Stroke::Line { a, b, width } => Stroke::Line {
                a: t.apply_point(a),
                b: t.apply_point(b),
                width: width * scale,
            },
            Stroke::Disc { c, r } => Stroke::Disc {
                c: t.apply_point(c),
                r: r * scale,
            },
        })
        .collect();
    let mut pts = [Point::ORIGIN; NUM_LANDMARKS];
    for (dst, &p) in pts.iter_mut().zip(&local) {
        *dst = t.apply_point(p);
    }
    let corners = [
        Point::new(-0.6, top),
        Point::new(0.6, top),
        Point::new(-0.6, bottom),
        Point::new(0.6, bottom),
    ]
    .map(|p| t.apply_point(p));
    let all: Vec<Point> = corners.iter().copied().chain(pts.iter().copied()).collect();
    let (lo, hi) = crate::geometry::bounding_box(&all);
    SynthFace {
        landmarks: LandmarkSet::from_points(pts),
        bbox: BoundingBox {
            x: lo.x.floor(),
            y: lo.y.floor(),
            w: (hi.x - lo.x).ceil(),
            h: (hi.y - lo.y).ceil(),
        },
        strokes,
    }
}

fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let ab = b - a;
    let len2 = ab.dot(ab);
    let t = if len2 > 0.0 { ((p - a).dot(ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    p.dist(a + ab * t)
}

impl SynthFace {
    /// Draws the face onto `page`, darkening pixels under the strokes.
    pub fn draw(&self, page: &mut GrayImage) {
        let (w, h) = (page.width() as i64, page.height() as i64);
        for s in &self.strokes {
            let (lo, hi, reach) = match *s {
                Stroke::Line { a, b, width } => {
                    let r = width / 2.0 + 1.0;
                    (Point::new(a.x.min(b.x), a.y.min(b.y)), Point::new(a.x.max(b.x), a.y.max(b.y)), r)
                }
                Stroke::Disc { c, r } => (c, c, r + 1.0),
            };
            let x0 = ((lo.x - reach).floor() as i64).max(0);
            let x1 = ((hi.x + reach).ceil() as i64).min(w - 1);
            let y0 = ((lo.y - reach).floor() as i64).max(0);
            let y1 = ((hi.y + reach).ceil() as i64).min(h - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let p = Point::new(x as f64, y as f64);
                    let ink = match *s {
                        Stroke::Line { a, b, width } => width / 2.0 - segment_distance(p, a, b) + 0.5,
                        Stroke::Disc { c, r } => r - p.dist(c) + 0.5,
                    }
                    .clamp(0.0, 1.0);
                    let (xu, yu) = (x as usize, y as usize);
                    let v = page.get(xu, yu).min(1.0 - ink);
                    page.put(xu, yu, v);
                }
            }
        }
    }

    pub fn render(&self, width: usize, height: usize) -> GrayImage {
        let mut page = GrayImage::filled(width, height, PAPER_WHITE);
        self.draw(&mut page);
        page
    }
}

/// One face on its own page, sized so the face box lies inside it.
pub fn random_page(rng: &mut impl Rng, page: usize, face_px: f64) -> SynthFace {
    let margin = face_px * 0.75;
    let lo = margin.min(page as f64 / 2.0);
    let hi = (page as f64 - margin).max(lo + 1e-9);
    let center = Point::new(rng.random_range(lo..hi), rng.random_range(lo..hi));
    random_face(rng, face_px, center)
}

/// In-memory cropped samples with exact landmarks.
pub fn synth_samples(n: usize, canvas: usize, seed: u64) -> Result<Vec<TrainingSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let face_px = rng.random_range(100.0..120.0);
            let face = random_page(&mut rng, 160, face_px);
            let page = face.render(160, 160);
            let mut record = FaceRecord::new(format!("synth-{i:05}"), "", face.bbox);
            record.completed = Some(face.landmarks);
            Ok(crop_and_normalize(&record, &page, canvas)?.sample)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthOptions {
    pub count: usize,
    pub page_size: usize,
    pub seed: u64,
    /// Fraction of faces labeled by a second labeler.
    pub double_label_fraction: f64,
    /// Per-face probability that both eyebrows are hidden (e.g. by hair).
    pub hidden_eyebrows: f64,
    /// Per-face probability that one eyebrow is hidden.
    pub hidden_one_eyebrow: f64,
    pub unlabeled_nose: f64,
    pub unlabeled_pupils: f64,
    /// Per-face probability of a manual exclusion flag.
    pub flagged: f64,
    /// Per-face probability of a face too small to keep.
    pub too_small: f64,
    /// Gaussian labeling noise in pixels.
    pub label_noise: f64,
    /// Probability that a double-labeled face has one landmark misplaced.
    pub label_slip: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            count: 300,
            page_size: 160,
            seed: 0,
            double_label_fraction: 0.45,
            hidden_eyebrows: 0.08,
            hidden_one_eyebrow: 0.1,
            unlabeled_nose: 0.3,
            unlabeled_pupils: 0.3,
            flagged: 0.02,
            too_small: 0.02,
            label_noise: 0.3,
            label_slip: 0.1,
        }
    }
}

fn labeled(truth: &LandmarkSet, hidden: &[LandmarkGroup], noise: f64, rng: &mut ChaCha8Rng) -> LandmarkSet {
    let dist = Normal::new(0.0, noise).expect("nonnegative noise");
    let mut out = LandmarkSet::empty();
    for (i, p) in truth.iter_present() {
        out.set(i, p + Point::new(dist.sample(rng), dist.sample(rng)));
    }
    for &g in hidden {
        out.clear_group(g);
    }
    out
}

/// Writes `images/<id>.png` and `manifest.jsonl` under `dir`, returning the
/// records. Faces carry raw labels only; merge and completion are left to
/// the pipeline.
pub fn write_dataset(dir: &Path, opts: &SynthOptions) -> Result<Vec<FaceRecord>> {
    std::fs::create_dir_all(dir.join("images"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut records = Vec::with_capacity(opts.count);
    for i in 0..opts.count {
        let id = format!("face-{i:05}");
        let small = rng.random_bool(opts.too_small);
        let face_px = if small {
            rng.random_range(50.0..70.0)
        } else {
            rng.random_range(0.62..0.75) * opts.page_size as f64
        };
        let face = random_page(&mut rng, opts.page_size, face_px);
        let page = face.render(opts.page_size, opts.page_size);
        let file = format!("images/{id}.png");
        write_atomic(&dir.join(&file), &page.encode_png()?)?;

        let mut hidden = Vec::new();
        if rng.random_bool(opts.hidden_eyebrows) {
            hidden.extend([LandmarkGroup::LeftEyebrow, LandmarkGroup::RightEyebrow]);
        } else if rng.random_bool(opts.hidden_one_eyebrow) {
            hidden.push(if rng.random_bool(0.5) {
                LandmarkGroup::LeftEyebrow
            } else {
                LandmarkGroup::RightEyebrow
            });
        }
        if rng.random_bool(opts.unlabeled_nose) {
            hidden.push(LandmarkGroup::Nose);
        }
        if rng.random_bool(opts.unlabeled_pupils) {
            hidden.extend([LandmarkGroup::LeftPupil, LandmarkGroup::RightPupil]);
        }
        let mut record = FaceRecord::new(id, file, face.bbox);
        record.annotations.push(Annotation {
            labeler: "a".into(),
            points: labeled(&face.landmarks, &hidden, opts.label_noise, &mut rng),
        });
        if rng.random_bool(opts.double_label_fraction) {
            let mut second = labeled(&face.landmarks, &hidden, opts.label_noise, &mut rng);
            if rng.random_bool(opts.label_slip) {
                let i = rng.random_range(0..17);
                if let Some(p) = second.get(i) {
                    second.set(i, p + Point::new(3.0, -2.0));
                }
            }
            record.annotations.push(Annotation {
                labeler: "b".into(),
                points: second,
            });
        }
        if rng.random_bool(opts.flagged) {
            let flags = [ExclusionFlag::Profile, ExclusionFlag::InhumanFeatures, ExclusionFlag::OccludedEyes];
            record.flags.push(flags[rng.random_range(0..flags.len())]);
        }
        records.push(record);
    }
    write_manifest(&dir.join("manifest.jsonl"), &records)?;
    Ok(records)
}
