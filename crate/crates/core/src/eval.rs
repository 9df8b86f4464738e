//! Chin-normalized error, failure rate, cumulative error distribution (CED)
//! and the area statistic `A_α`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{LandmarkSet, CHIN_FIRST, CHIN_LAST, NUM_LANDMARKS};

/// A face fails when its normalized error is strictly above this threshold.
pub const FAILURE_THRESHOLD: f64 = 0.0333;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub stages: usize,
    pub augmentation: bool,
    pub mean_error: f64,
    pub auc: f64,
    pub failure_rate_percent: f64,
}

/// Results reported for the original 1446-face manga dataset, kept for
/// comparison only.
pub const REFERENCE_RESULTS: [ReferenceRow; 4] = [
    ReferenceRow { stages: 1, augmentation: true, mean_error: 0.03933, auc: 0.10338, failure_rate_percent: 48.28 },
    ReferenceRow { stages: 1, augmentation: false, mean_error: 0.04355, auc: 0.08964, failure_rate_percent: 52.41 },
    ReferenceRow { stages: 2, augmentation: true, mean_error: 0.02935, auc: 0.24295, failure_rate_percent: 19.31 },
    ReferenceRow { stages: 2, augmentation: false, mean_error: 0.03467, auc: 0.16357, failure_rate_percent: 37.93 },
];

/// Distance between the first and last chin-contour landmarks.
pub fn chin_distance(truth: &LandmarkSet) -> Result<f64> {
    match (truth.get(CHIN_FIRST), truth.get(CHIN_LAST)) {
        (Some(a), Some(b)) => Ok(a.dist(b)),
        _ => Err(Error::IncompleteGroup(crate::schema::LandmarkGroup::ChinContour)),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerFaceError {
    pub id: String,
    /// Mean landmark distance in pixels.
    pub mean_distance: f64,
    pub chin_distance: f64,
    /// `mean_distance / chin_distance`.
    pub normalized: f64,
}

/// Mean Euclidean distance over all 60 landmarks divided by the ground-truth
/// chin distance.
pub fn normalized_error(pred: &LandmarkSet, truth: &LandmarkSet) -> Result<PerFaceError> {
    let p = pred.complete_points()?;
    let t = truth.complete_points()?;
    let chin = chin_distance(truth)?;
    if chin == 0.0 {
        return Err(Error::ZeroChinDistance);
    }
    let mean = p.iter().zip(t).map(|(a, b)| a.dist(*b)).sum::<f64>() / NUM_LANDMARKS as f64;
    Ok(PerFaceError {
        id: String::new(),
        mean_distance: mean,
        chin_distance: chin,
        normalized: mean / chin,
    })
}

/// Normalized disagreement between two labelings, treating `b` as truth.
pub fn interannotator_distance(a: &LandmarkSet, b: &LandmarkSet) -> Result<f64> {
    Ok(normalized_error(a, b)?.normalized)
}

/// Fraction of errors `≤ t`.
pub fn ced_at(errors: &[f64], t: f64) -> f64 {
    errors.iter().filter(|&&e| e <= t).count() as f64 / errors.len() as f64
}

/// Fraction of faces whose error is strictly above `threshold`.
pub fn failure_rate(errors: &[f64], threshold: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::Empty("no errors to compute a failure rate"));
    }
    Ok(1.0 - ced_at(errors, threshold))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CedPoint {
    pub threshold: f64,
    pub fraction: f64,
}

/// CED sampled at 0, at every distinct error value and at `alpha`, sorted by
/// threshold.
pub fn ced_curve(errors: &[f64], alpha: f64) -> Vec<CedPoint> {
    if errors.is_empty() {
        return Vec::new();
    }
    let mut ts: Vec<f64> = errors.to_vec();
    ts.push(0.0);
    ts.push(alpha);
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    ts.into_iter()
        .map(|t| CedPoint {
            threshold: t,
            fraction: ced_at(errors, t),
        })
        .collect()
}

/// `∫₀^α CED(t) dt / α`, integrated exactly over the CED step function.
pub fn auc_ced(errors: &[f64], alpha: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::Empty("no errors to integrate"));
    }
    if !(alpha > 0.0) {
        return Err(Error::Config(format!("CED threshold must be positive, got {alpha}")));
    }
    let mut sorted: Vec<f64> = errors.iter().map(|e| e.max(0.0)).collect();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    // CED is constant between consecutive sorted errors; the rectangle right
    // of the k-th smallest error has height k/n.
    let mut area = 0.0;
    for (k, &e) in sorted.iter().enumerate() {
        if e >= alpha {
            break;
        }
        let next = sorted.get(k + 1).copied().unwrap_or(alpha).min(alpha);
        area += (next - e) * (k + 1) as f64 / n;
    }
    Ok(area / alpha)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold: f64,
    pub count: usize,
    /// Mean of per-face normalized errors.
    pub mean_error: f64,
    pub auc: f64,
    pub failure_rate: f64,
    pub per_face: Vec<PerFaceError>,
    pub ced: Vec<CedPoint>,
}

impl EvalReport {
    pub fn from_errors(per_face: Vec<PerFaceError>, threshold: f64) -> Result<Self> {
        let s: Vec<f64> = per_face.iter().map(|e| e.normalized).collect();
        if s.is_empty() {
            return Err(Error::Empty("no faces to evaluate"));
        }
        Ok(Self {
            threshold,
            count: s.len(),
            mean_error: s.iter().sum::<f64>() / s.len() as f64,
            auc: auc_ced(&s, threshold)?,
            failure_rate: failure_rate(&s, threshold)?,
            ced: ced_curve(&s, threshold),
            per_face,
        })
    }

    /// Scores predictions against ground truth, one pair per face.
    pub fn score<'a>(
        pairs: impl IntoIterator<Item = (&'a str, &'a LandmarkSet, &'a LandmarkSet)>,
        threshold: f64,
    ) -> Result<Self> {
        let per_face = pairs
            .into_iter()
            .map(|(id, pred, truth)| {
                let mut e = normalized_error(pred, truth)?;
                e.id = id.to_string();
                Ok(e)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_errors(per_face, threshold)
    }

    /// The CED curve as `threshold,fraction` CSV.
    pub fn ced_csv(&self) -> String {
        let mut out = String::from("threshold,fraction\n");
        for p in &self.ced {
            out.push_str(&format!("{},{}\n", p.threshold, p.fraction));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{SimilarityTransform, Transform2D};
    use crate::schema::Point;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn shape(rng: &mut ChaCha8Rng) -> LandmarkSet {
        let mut pts = [Point::ORIGIN; NUM_LANDMARKS];
        for p in pts.iter_mut() {
            *p = Point::new(rng.random_range(0.0..100.0), rng.random_range(0.0..100.0));
        }
        LandmarkSet::from_points(pts)
    }

    #[test]
    fn chin_distance_examples() {
        let mut s = LandmarkSet::empty();
        s.set(0, Point::new(0.0, 0.0));
        s.set(16, Point::new(3.0, 4.0));
        assert_eq!(chin_distance(&s).unwrap(), 5.0);
        s.set(16, Point::new(0.0, 0.0));
        assert_eq!(chin_distance(&s).unwrap(), 0.0);
        s.clear(16);
        assert!(chin_distance(&s).is_err());
    }

    #[test]
    fn normalized_error_examples() {
        let mut pts = [Point::ORIGIN; NUM_LANDMARKS];
        for (i, p) in pts.iter_mut().enumerate() {
            *p = Point::new(i as f64, (i * i % 13) as f64);
        }
        pts[0] = Point::new(0.0, 0.0);
        pts[16] = Point::new(100.0, 0.0);
        let truth = LandmarkSet::from_points(pts);
        assert_eq!(normalized_error(&truth, &truth).unwrap().normalized, 0.0);
        let pred = truth.map_points(|p| p + Point::new(3.0, 4.0));
        let e = normalized_error(&pred, &truth).unwrap();
        assert_eq!(e.mean_distance, 5.0);
        assert_eq!(e.normalized, 0.05);

        let mut flat = truth;
        flat.set(16, Point::new(0.0, 0.0));
        assert!(matches!(normalized_error(&pred, &flat), Err(Error::ZeroChinDistance)));
    }

    #[test]
    fn failure_rate_examples() {
        assert_eq!(failure_rate(&[0.01, 0.05], FAILURE_THRESHOLD).unwrap(), 0.5);
        assert_eq!(failure_rate(&[0.0333], FAILURE_THRESHOLD).unwrap(), 0.0);
        assert_eq!(failure_rate(&[0.0; 4], FAILURE_THRESHOLD).unwrap(), 0.0);
        assert!(failure_rate(&[], FAILURE_THRESHOLD).is_err());
    }

    #[test]
    fn ced_examples() {
        let c = ced_curve(&[0.0, 0.0], FAILURE_THRESHOLD);
        assert!(c.iter().all(|p| p.fraction == 1.0));
        assert_eq!(ced_at(&[0.01, 0.03], 0.02), 0.5);
        let errs = [0.02, 0.001, 0.07, 0.02, 0.5];
        let c = ced_curve(&errs, FAILURE_THRESHOLD);
        assert!(c.windows(2).all(|w| w[0].threshold < w[1].threshold && w[0].fraction <= w[1].fraction));
        assert_eq!(c.last().unwrap().fraction, 1.0);
        assert_eq!(c[0].threshold, 0.0);
        assert!(c.iter().any(|p| p.threshold == FAILURE_THRESHOLD));
    }

    #[test]
    fn auc_examples() {
        let a = FAILURE_THRESHOLD;
        assert_eq!(auc_ced(&[0.0, 0.0, 0.0], a).unwrap(), 1.0);
        assert_eq!(auc_ced(&[0.04, 1.0], a).unwrap(), 0.0);
        assert!((auc_ced(&[a / 2.0], a).unwrap() - 0.5).abs() < 1e-12);
        assert!(auc_ced(&[], a).is_err());
        assert!(auc_ced(&[0.1], 0.0).is_err());
    }

    #[test]
    fn auc_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let n = rng.random_range(1..40);
            let errs: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..0.06)).collect();
            let closed: f64 = errs.iter().map(|e| (FAILURE_THRESHOLD - e).max(0.0)).sum::<f64>()
                / (n as f64 * FAILURE_THRESHOLD);
            assert!((auc_ced(&errs, FAILURE_THRESHOLD).unwrap() - closed).abs() < 1e-12);
        }
    }

    #[test]
    fn interannotator_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = shape(&mut rng);
        assert_eq!(interannotator_distance(&a, &a).unwrap(), 0.0);

        let mut truth = a;
        truth.set(0, Point::new(0.0, 0.0));
        truth.set(16, Point::new(60.0, 0.0));
        let mut other = LandmarkSet::empty();
        for (i, p) in truth.iter_present() {
            let ang = i as f64;
            other.set(i, p + Point::new(2.0 * ang.cos(), 2.0 * ang.sin()));
        }
        let s = interannotator_distance(&other, &truth).unwrap();
        assert!((s - 2.0 / 60.0).abs() < 1e-12);

        // Same chin length on both sides: symmetric.
        let b = a.map_points(|p| p + Point::new(0.7, -0.2));
        let ab = interannotator_distance(&a, &b).unwrap();
        let ba = interannotator_distance(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-9);
    }

    #[test]
    fn report_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let faces: Vec<PerFaceError> = (0..30)
            .map(|i| PerFaceError {
                id: format!("f{i}"),
                mean_distance: 0.0,
                chin_distance: 1.0,
                normalized: rng.random_range(0.0..0.08),
            })
            .collect();
        let a = EvalReport::from_errors(faces.clone(), FAILURE_THRESHOLD).unwrap();
        let mut rev = faces;
        rev.reverse();
        let b = EvalReport::from_errors(rev, FAILURE_THRESHOLD).unwrap();
        assert!((a.mean_error - b.mean_error).abs() < 1e-15);
        assert_eq!(a.auc, b.auc);
        assert_eq!(a.failure_rate, b.failure_rate);
        assert_eq!(a.ced, b.ced);
    }

    #[test]
    fn perfect_predictions_report() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let truths: Vec<LandmarkSet> = (0..5).map(|_| shape(&mut rng)).collect();
        let r = EvalReport::score(truths.iter().map(|t| ("x", t, t)), FAILURE_THRESHOLD).unwrap();
        assert_eq!((r.mean_error, r.auc, r.failure_rate), (0.0, 1.0, 0.0));
    }

    proptest! {
        #[test]
        fn normalized_error_is_similarity_invariant(
            seed in any::<u64>(), s in 0.1f64..10.0, rot in -3.2f64..3.2,
            tx in -500.0f64..500.0, ty in -500.0f64..500.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let truth = shape(&mut rng);
            let pred = shape(&mut rng);
            let t = SimilarityTransform::new(s, rot, tx, ty);
            let a = normalized_error(&pred, &truth).unwrap().normalized;
            let b = normalized_error(&t.apply_set(&pred), &t.apply_set(&truth)).unwrap().normalized;
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn failure_rate_is_complement_of_ced(errs in proptest::collection::vec(0.0f64..0.1, 1..50)) {
            prop_assert_eq!(failure_rate(&errs, FAILURE_THRESHOLD).unwrap(), 1.0 - ced_at(&errs, FAILURE_THRESHOLD));
            let auc = auc_ced(&errs, FAILURE_THRESHOLD).unwrap();
            prop_assert!((0.0..=1.0).contains(&auc));
        }
    }
}
