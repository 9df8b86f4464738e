//! Shape-space math: least-squares similarity and affine fits, the scaled
//! mean shape, and landmark heatmaps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::GrayImage;
use crate::schema::{centroid, LandmarkSet, Point, NUM_LANDMARKS};

pub trait Transform2D {
    fn apply_point(&self, p: Point) -> Point;

    fn apply_points(&self, points: &[Point]) -> Vec<Point> {
        points.iter().map(|&p| self.apply_point(p)).collect()
    }

    /// Transforms present landmarks; presence flags pass through unchanged.
    fn apply_set(&self, set: &LandmarkSet) -> LandmarkSet {
        set.map_points(|p| self.apply_point(p))
    }
}

/// `p ↦ s·R(θ)·p + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Default for SimilarityTransform {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl SimilarityTransform {
    pub const IDENTITY: SimilarityTransform = SimilarityTransform {
        scale: 1.0,
        rotation: 0.0,
        tx: 0.0,
        ty: 0.0,
    };

    pub fn new(scale: f64, rotation: f64, tx: f64, ty: f64) -> Self {
        Self {
            scale,
            rotation,
            tx,
            ty,
        }
    }

    /// Rotation by `rotation` and scaling by `scale` about `center`, followed
    /// by a translation of `shift`.
    pub fn about(center: Point, scale: f64, rotation: f64, shift: Point) -> Self {
        let lin = Self::new(scale, rotation, 0.0, 0.0);
        let moved = lin.apply_point(center);
        Self::new(
            scale,
            rotation,
            (center.x - moved.x) + shift.x,
            (center.y - moved.y) + shift.y,
        )
    }

    /// Linear part as `[[a, -b], [b, a]]` with `a = s cos θ`, `b = s sin θ`.
    pub fn matrix(&self) -> [[f64; 2]; 2] {
        let (sin, cos) = self.rotation.sin_cos();
        let a = self.scale * cos;
        let b = self.scale * sin;
        [[a, -b], [b, a]]
    }

    pub fn inverse(&self) -> Self {
        let inv_scale = 1.0 / self.scale;
        let lin = Self::new(inv_scale, -self.rotation, 0.0, 0.0);
        let t = lin.apply_point(Point::new(self.tx, self.ty));
        Self::new(inv_scale, -self.rotation, -t.x, -t.y)
    }

    /// Applies only the linear part (for displacements).
    pub fn apply_vector(&self, v: Point) -> Point {
        let [[a, nb], [b, _]] = self.matrix();
        Point::new(a * v.x + nb * v.y, b * v.x + a * v.y)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &SimilarityTransform) -> Self {
        let t = self.apply_point(Point::new(other.tx, other.ty));
        Self::new(
            self.scale * other.scale,
            self.rotation + other.rotation,
            t.x,
            t.y,
        )
    }

    pub fn to_affine(&self) -> AffineTransform {
        AffineTransform {
            matrix: self.matrix(),
            translation: [self.tx, self.ty],
        }
    }
}

impl Transform2D for SimilarityTransform {
    fn apply_point(&self, p: Point) -> Point {
        let v = self.apply_vector(p);
        Point::new(v.x + self.tx, v.y + self.ty)
    }
}

/// `p ↦ A·p + t` with an arbitrary 2×2 `A` (reflections allowed).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub matrix: [[f64; 2]; 2],
    pub translation: [f64; 2],
}

impl AffineTransform {
    pub const IDENTITY: AffineTransform = AffineTransform {
        matrix: [[1.0, 0.0], [0.0, 1.0]],
        translation: [0.0, 0.0],
    };

    pub fn determinant(&self) -> f64 {
        let m = self.matrix;
        m[0][0] * m[1][1] - m[0][1] * m[1][0]
    }

    pub fn inverse(&self) -> Result<Self> {
        let det = self.determinant();
        if det == 0.0 || !det.is_finite() {
            return Err(Error::Fit("singular affine transform"));
        }
        let m = self.matrix;
        let inv = [
            [m[1][1] / det, -m[0][1] / det],
            [-m[1][0] / det, m[0][0] / det],
        ];
        let [tx, ty] = self.translation;
        Ok(Self {
            matrix: inv,
            translation: [
                -(inv[0][0] * tx + inv[0][1] * ty),
                -(inv[1][0] * tx + inv[1][1] * ty),
            ],
        })
    }
}

impl Transform2D for AffineTransform {
    fn apply_point(&self, p: Point) -> Point {
        let m = self.matrix;
        Point::new(
            m[0][0] * p.x + m[0][1] * p.y + self.translation[0],
            m[1][0] * p.x + m[1][1] * p.y + self.translation[1],
        )
    }
}

fn check_pairs(src: &[Point], dst: &[Point], min: usize) -> Result<()> {
    if src.len() != dst.len() {
        return Err(Error::ShapeMismatch(format!(
            "point lists differ in length ({} vs {})",
            src.len(),
            dst.len()
        )));
    }
    if src.len() < min {
        return Err(Error::Fit("too few point pairs"));
    }
    Ok(())
}

/// Least-squares similarity mapping `src` onto `dst` (no reflection).
///
/// Closed form: with centered coordinates, `a = Σ(p·q) / Σ|p|²` and
/// `b = Σ(p × q) / Σ|p|²` give the linear part `[[a, -b], [b, a]]`.
pub fn estimate_similarity(src: &[Point], dst: &[Point]) -> Result<SimilarityTransform> {
    check_pairs(src, dst, 2)?;
    let cs = centroid(src);
    let cd = centroid(dst);
    let mut norm = 0.0;
    let mut dot = 0.0;
    let mut cross = 0.0;
    for (&s, &d) in src.iter().zip(dst) {
        let p = s - cs;
        let q = d - cd;
        norm += p.dot(p);
        dot += p.dot(q);
        cross += p.x * q.y - p.y * q.x;
    }
    let spread = src.iter().map(|p| p.norm()).fold(0.0, f64::max).max(1.0);
    if norm <= 1e-24 * spread * spread {
        return Err(Error::Fit("source points are coincident"));
    }
    let a = dot / norm;
    let b = cross / norm;
    let lin = SimilarityTransform::new(a.hypot(b), b.atan2(a), 0.0, 0.0);
    let moved = lin.apply_point(cs);
    Ok(SimilarityTransform::new(
        lin.scale,
        lin.rotation,
        cd.x - moved.x,
        cd.y - moved.y,
    ))
}

/// Least-squares 6-parameter affine mapping `src` onto `dst`.
///
/// Each output row is an independent 3-parameter linear regression; solving
/// both in centered coordinates reduces them to one shared 2×2 system.
pub fn estimate_affine(src: &[Point], dst: &[Point]) -> Result<AffineTransform> {
    check_pairs(src, dst, 3)?;
    let cs = centroid(src);
    let cd = centroid(dst);
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    let (mut ux, mut uy, mut vx, mut vy) = (0.0, 0.0, 0.0, 0.0);
    for (&s, &d) in src.iter().zip(dst) {
        let p = s - cs;
        let q = d - cd;
        sxx += p.x * p.x;
        sxy += p.x * p.y;
        syy += p.y * p.y;
        ux += q.x * p.x;
        uy += q.x * p.y;
        vx += q.y * p.x;
        vy += q.y * p.y;
    }
    let det = sxx * syy - sxy * sxy;
    let trace = sxx + syy;
    if trace <= 0.0 || det <= 1e-12 * trace * trace {
        return Err(Error::Fit("source points are collinear"));
    }
    // Inverse of the scatter matrix [[sxx, sxy], [sxy, syy]].
    let (ixx, ixy, iyy) = (syy / det, -sxy / det, sxx / det);
    let matrix = [
        [ux * ixx + uy * ixy, ux * ixy + uy * iyy],
        [vx * ixx + vy * ixy, vx * ixy + vy * iyy],
    ];
    let translation = [
        cd.x - (matrix[0][0] * cs.x + matrix[0][1] * cs.y),
        cd.y - (matrix[1][0] * cs.x + matrix[1][1] * cs.y),
    ];
    Ok(AffineTransform {
        matrix,
        translation,
    })
}

/// Axis-aligned bounds `(min, max)` of a nonempty point list.
pub fn bounding_box(points: &[Point]) -> (Point, Point) {
    points.iter().fold(
        (
            Point::new(f64::INFINITY, f64::INFINITY),
            Point::new(f64::NEG_INFINITY, f64::NEG_INFINITY),
        ),
        |(lo, hi), p| {
            (
                Point::new(lo.x.min(p.x), lo.y.min(p.y)),
                Point::new(hi.x.max(p.x), hi.y.max(p.y)),
            )
        },
    )
}

/// Average training shape, scaled and centered inside a square canvas.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanShape {
    pub points: Vec<Point>,
    pub canvas: usize,
    pub margin: f64,
}

impl MeanShape {
    pub fn as_set(&self) -> LandmarkSet {
        let mut pts = [Point::ORIGIN; NUM_LANDMARKS];
        pts.copy_from_slice(&self.points);
        LandmarkSet::from_points(pts)
    }

    pub fn width(&self) -> f64 {
        let (lo, hi) = bounding_box(&self.points);
        hi.x - lo.x
    }

    pub fn height(&self) -> f64 {
        let (lo, hi) = bounding_box(&self.points);
        hi.y - lo.y
    }
}

/// Pointwise mean of complete training shapes, then uniformly scaled and
/// translated (never rotated) so its bounding box sits centered in the
/// canvas inset by `margin` on each side.
pub fn compute_mean_shape(shapes: &[LandmarkSet], canvas: usize, margin: f64) -> Result<MeanShape> {
    if shapes.is_empty() {
        return Err(Error::Empty("no training shapes for the mean shape"));
    }
    if !(0.0..0.5).contains(&margin) {
        return Err(Error::Config(format!("mean-shape margin {margin} outside [0, 0.5)")));
    }
    let mut sum = [Point::ORIGIN; NUM_LANDMARKS];
    for s in shapes {
        for (acc, p) in sum.iter_mut().zip(s.complete_points()?) {
            *acc = *acc + *p;
        }
    }
    let n = shapes.len() as f64;
    let avg: Vec<Point> = sum.iter().map(|&p| p * (1.0 / n)).collect();
    fit_into_canvas(&avg, canvas, margin)
}

fn fit_into_canvas(points: &[Point], canvas: usize, margin: f64) -> Result<MeanShape> {
    let (lo, hi) = bounding_box(points);
    let (w, h) = (hi.x - lo.x, hi.y - lo.y);
    if !(w > 0.0 && h > 0.0) {
        return Err(Error::Fit("mean shape has a degenerate bounding box"));
    }
    let side = canvas as f64;
    let inner = side * (1.0 - 2.0 * margin);
    let scale = (inner / w).min(inner / h);
    let box_center = Point::new((lo.x + hi.x) / 2.0, (lo.y + hi.y) / 2.0);
    let canvas_center = Point::new(side / 2.0, side / 2.0);
    let points = points
        .iter()
        .map(|&p| canvas_center + (p - box_center) * scale)
        .collect();
    Ok(MeanShape {
        points,
        canvas,
        margin,
    })
}

/// Value of the landmark heatmap at a continuous position.
pub fn heatmap_value(shape: &[Point], p: Point, radius: f64) -> f64 {
    let d = shape.iter().map(|&s| s.dist(p)).fold(f64::INFINITY, f64::min);
    if d <= radius {
        1.0 / (1.0 + d)
    } else {
        0.0
    }
}

/// Renders `1 / (1 + d)` where `d` is the distance to the nearest landmark,
/// truncated to zero beyond `radius`.
pub fn render_heatmap(shape: &[Point], canvas: usize, radius: f64) -> GrayImage {
    let mut nearest = vec![f64::INFINITY; canvas * canvas];
    let reach = radius.ceil() as i64 + 1;
    for &s in shape {
        let (cx, cy) = (s.x.round() as i64, s.y.round() as i64);
        let x0 = (cx - reach).max(0);
        let x1 = (cx + reach).min(canvas as i64 - 1);
        let y0 = (cy - reach).max(0);
        let y1 = (cy + reach).min(canvas as i64 - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = s.dist(Point::new(x as f64, y as f64));
                let slot = &mut nearest[y as usize * canvas + x as usize];
                if d < *slot {
                    *slot = d;
                }
            }
        }
    }
    let data = nearest
        .into_iter()
        .map(|d| if d <= radius { 1.0 / (1.0 + d) } else { 0.0 })
        .collect();
    GrayImage::from_vec(canvas, canvas, data)
}
