//! Training-set augmentation by random similarity transforms.
//!
//! Rotation, scale and translation are drawn independently from Gaussians.
//! Translation factors are multiplied by the mean shape's width and height to
//! get pixels. The transform rotates and scales about the canvas center and
//! then translates.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::TrainingSample;
use crate::error::{Error, Result};
use crate::geometry::{MeanShape, SimilarityTransform, Transform2D};
use crate::imaging::PAPER_WHITE;
use crate::schema::Point;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationSpec {
    pub rotation_mean_deg: f64,
    pub rotation_sigma_deg: f64,
    pub scale_mean: f64,
    pub scale_sigma: f64,
    /// Translation factors are relative to the mean shape's extent.
    pub translation_mean: f64,
    pub translation_sigma: f64,
    /// Transformed copies per image.
    pub copies: usize,
    /// Keep the untransformed sample in front of its copies.
    pub retain_originals: bool,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            rotation_mean_deg: 0.0,
            rotation_sigma_deg: 20.0,
            scale_mean: 1.0,
            scale_sigma: 0.1,
            translation_mean: 0.0,
            translation_sigma: 0.1,
            copies: 5,
            retain_originals: false,
        }
    }
}

impl AugmentationSpec {
    pub fn validate(&self) -> Result<()> {
        let sigmas = [self.rotation_sigma_deg, self.scale_sigma, self.translation_sigma];
        if sigmas.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::Config("augmentation sigmas must be finite and nonnegative".into()));
        }
        let means = [self.rotation_mean_deg, self.scale_mean, self.translation_mean];
        if means.iter().any(|m| !m.is_finite()) {
            return Err(Error::Config("augmentation means must be finite".into()));
        }
        Ok(())
    }

    /// Number of samples produced per input sample.
    pub fn factor(&self) -> usize {
        self.copies + usize::from(self.retain_originals || self.copies == 0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationParams {
    pub rotation_deg: f64,
    pub scale: f64,
    /// Sampled unitless translation factors.
    pub translation_factor: [f64; 2],
    /// `translation_factor` times the mean-shape width and height.
    pub translation: [f64; 2],
}

impl AugmentationParams {
    pub const IDENTITY: AugmentationParams = AugmentationParams {
        rotation_deg: 0.0,
        scale: 1.0,
        translation_factor: [0.0, 0.0],
        translation: [0.0, 0.0],
    };

    /// The sample-space transform for a square canvas of side `canvas`.
    pub fn transform(&self, canvas: usize) -> SimilarityTransform {
        let c = canvas as f64 / 2.0;
        SimilarityTransform::about(
            Point::new(c, c),
            self.scale,
            self.rotation_deg.to_radians(),
            Point::new(self.translation[0], self.translation[1]),
        )
    }
}

fn normal(mean: f64, sigma: f64) -> Normal<f64> {
    Normal::new(mean, sigma).expect("validated sigma")
}

/// Draws rotation, scale, then the x and y translation factors.
pub fn sample_params(spec: &AugmentationSpec, mean_shape: &MeanShape, rng: &mut ChaCha8Rng) -> AugmentationParams {
    let rotation_deg = normal(spec.rotation_mean_deg, spec.rotation_sigma_deg).sample(rng);
    let scale = normal(spec.scale_mean, spec.scale_sigma).sample(rng);
    let t = normal(spec.translation_mean, spec.translation_sigma);
    let fx = t.sample(rng);
    let fy = t.sample(rng);
    AugmentationParams {
        rotation_deg,
        scale,
        translation_factor: [fx, fy],
        translation: [fx * mean_shape.width(), fy * mean_shape.height()],
    }
}

/// Resamples the image and maps the landmarks under the same transform.
/// Pixels that come from outside the source read as paper white.
pub fn augment_sample(sample: &TrainingSample, params: &AugmentationParams) -> TrainingSample {
    let w = sample.image.width();
    let h = sample.image.height();
    let t = params.transform(w);
    let inv = t.inverse();
    TrainingSample {
        image: sample.image.warp(w, h, PAPER_WHITE, |q| inv.apply_point(q)),
        landmarks: t.apply_set(&sample.landmarks),
        record_id: sample.record_id.clone(),
        augmentation: sample.augmentation,
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for one augmented copy, independent of processing order.
pub fn copy_seed(seed: u64, record_id: &str, copy: usize) -> u64 {
    splitmix(splitmix(seed ^ fnv1a(record_id.as_bytes())) ^ copy as u64)
}

/// One line of the augmentation plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannedCopy {
    pub record_id: String,
    pub copy: usize,
    pub params: AugmentationParams,
}

pub fn plan_copies(record_id: &str, spec: &AugmentationSpec, mean_shape: &MeanShape, seed: u64) -> Vec<PlannedCopy> {
    (0..spec.copies)
        .map(|copy| {
            let mut rng = ChaCha8Rng::seed_from_u64(copy_seed(seed, record_id, copy));
            PlannedCopy {
                record_id: record_id.to_string(),
                copy,
                params: sample_params(spec, mean_shape, &mut rng),
            }
        })
        .collect()
}

pub struct AugmentedSet {
    pub samples: Vec<TrainingSample>,
    pub plan: Vec<PlannedCopy>,
}

/// Expands each sample into `spec.copies` transformed copies, optionally
/// preceded by the original. `copies == 0` returns the originals. Output
/// order follows input order.
pub fn augment_dataset(
    samples: &[TrainingSample],
    spec: &AugmentationSpec,
    mean_shape: &MeanShape,
    seed: u64,
) -> Result<AugmentedSet> {
    spec.validate()?;
    let per_sample: Vec<(Vec<TrainingSample>, Vec<PlannedCopy>)> = samples
        .par_iter()
        .map(|s| {
            let plan = plan_copies(&s.record_id, spec, mean_shape, seed);
            let mut out = Vec::with_capacity(spec.factor());
            if spec.retain_originals || spec.copies == 0 {
                out.push(s.clone());
            }
            for p in &plan {
                let mut a = augment_sample(s, &p.params);
                a.augmentation = Some(p.copy);
                out.push(a);
            }
            (out, plan)
        })
        .collect();
    let mut set = AugmentedSet {
        samples: Vec::with_capacity(samples.len() * spec.factor()),
        plan: Vec::with_capacity(samples.len() * spec.copies),
    };
    for (s, p) in per_sample {
        set.samples.extend(s);
        set.plan.extend(p);
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::normalized_error;
    use crate::imaging::GrayImage;
    use crate::schema::{LandmarkSet, NUM_LANDMARKS};
    use rand::Rng;

    fn mean_shape(w: f64, h: f64) -> MeanShape {
        let mut points = vec![Point::new(10.0, 20.0); NUM_LANDMARKS];
        points[1] = Point::new(10.0 + w, 20.0 + h);
        MeanShape {
            points,
            canvas: 64,
            margin: 0.1,
        }
    }

    fn sample(seed: u64) -> TrainingSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = [Point::ORIGIN; NUM_LANDMARKS];
        for p in pts.iter_mut() {
            *p = Point::new(rng.random_range(10.0..54.0), rng.random_range(10.0..54.0));
        }
        TrainingSample {
            image: GrayImage::from_fn(64, 64, |x, y| ((x * 7 + y * 3) % 17) as f64 / 16.0),
            landmarks: LandmarkSet::from_points(pts),
            record_id: format!("r{seed}"),
            augmentation: None,
        }
    }

    #[test]
    fn zero_sigma_gives_identity_params() {
        let spec = AugmentationSpec {
            rotation_sigma_deg: 0.0,
            scale_sigma: 0.0,
            translation_sigma: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = sample_params(&spec, &mean_shape(40.0, 50.0), &mut rng);
        assert_eq!(p.rotation_deg, 0.0);
        assert_eq!(p.scale, 1.0);
        assert_eq!(p.translation, [0.0, 0.0]);
    }

    #[test]
    fn fixed_seed_repeats_parameters() {
        let spec = AugmentationSpec::default();
        let m = mean_shape(40.0, 50.0);
        let a = plan_copies("face-1", &spec, &m, 5);
        let b = plan_copies("face-1", &spec, &m, 5);
        assert_eq!(a, b);
        assert_ne!(a, plan_copies("face-2", &spec, &m, 5));
        assert_ne!(a[0].params, a[1].params);
    }

    #[test]
    fn translation_is_factor_times_extent() {
        let m = mean_shape(40.0, 50.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let p = sample_params(&AugmentationSpec::default(), &m, &mut rng);
            assert_eq!(p.translation[0], p.translation_factor[0] * 40.0);
            assert_eq!(p.translation[1], p.translation_factor[1] * 50.0);
        }
    }

    #[test]
    fn rotation_moments() {
        let m = mean_shape(40.0, 50.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10_000;
        let r: Vec<f64> = (0..n)
            .map(|_| sample_params(&AugmentationSpec::default(), &m, &mut rng).rotation_deg)
            .collect();
        let mean = r.iter().sum::<f64>() / n as f64;
        let sd = (r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!(mean.abs() < 1.0, "mean {mean}");
        assert!((sd - 20.0).abs() < 1.0, "sd {sd}");
    }

    #[test]
    fn identity_params_leave_sample_unchanged() {
        let s = sample(4);
        let a = augment_sample(&s, &AugmentationParams::IDENTITY);
        assert_eq!(a.landmarks, s.landmarks);
        assert_eq!(a.image, s.image);
    }

    #[test]
    fn pure_translation_shifts_landmarks_exactly() {
        let s = sample(5);
        let p = AugmentationParams {
            translation: [10.0, 0.0],
            ..AugmentationParams::IDENTITY
        };
        let a = augment_sample(&s, &p);
        for (i, q) in s.landmarks.iter_present() {
            let r = a.landmarks.get(i).unwrap();
            assert_eq!(r.x, q.x + 10.0);
            assert_eq!(r.y, q.y);
        }
        // Pixels shifted right by 10; the uncovered strip is white.
        assert_eq!(a.image.get(30, 7), s.image.get(20, 7));
        assert_eq!(a.image.get(3, 7), PAPER_WHITE);
    }

    #[test]
    fn joint_rotation_keeps_normalized_distance() {
        let truth = sample(6);
        let pred = sample(7);
        let p = AugmentationParams {
            rotation_deg: 33.0,
            scale: 1.2,
            ..AugmentationParams::IDENTITY
        };
        let before = normalized_error(&pred.landmarks, &truth.landmarks).unwrap().normalized;
        let after = normalized_error(
            &augment_sample(&pred, &p).landmarks,
            &augment_sample(&truth, &p).landmarks,
        )
        .unwrap()
        .normalized;
        assert!((before - after).abs() < 1e-12);
        let t = augment_sample(&truth, &p);
        assert!(normalized_error(&t.landmarks, &t.landmarks).unwrap().normalized == 0.0);
    }

    #[test]
    fn landmark_stays_on_rendered_dot() {
        // A dark disc centered on landmark 0 should still be centered on it
        // after augmentation.
        let center = Point::new(23.3, 38.6);
        let image = GrayImage::from_fn(64, 64, |x, y| {
            let d = center.dist(Point::new(x as f64, y as f64));
            (d / 3.0).min(1.0)
        });
        let mut pts = [Point::new(32.0, 32.0); NUM_LANDMARKS];
        pts[0] = center;
        let s = TrainingSample {
            image,
            landmarks: LandmarkSet::from_points(pts),
            record_id: "dot".into(),
            augmentation: None,
        };
        let m = mean_shape(40.0, 40.0);
        for copy in plan_copies("dot", &AugmentationSpec::default(), &m, 9) {
            let a = augment_sample(&s, &copy.params);
            let lm = a.landmarks.get(0).unwrap();
            if !(3.0..60.0).contains(&lm.x) || !(3.0..60.0).contains(&lm.y) {
                continue;
            }
            // Intensity-weighted centroid of the dark region.
            let (mut wx, mut wy, mut ws) = (0.0, 0.0, 0.0);
            for y in 0..64 {
                for x in 0..64 {
                    let w = (1.0 - a.image.get(x, y)).max(0.0);
                    wx += w * x as f64;
                    wy += w * y as f64;
                    ws += w;
                }
            }
            let found = Point::new(wx / ws, wy / ws);
            assert!(found.dist(lm) < 1.0, "copy {}: {found:?} vs {lm:?}", copy.copy);
        }
    }

    #[test]
    fn augmentation_commutes_with_crop_frame_maps() {
        // Mapping image-frame landmarks through a crop map and then the
        // augmentation equals one composed similarity.
        let crop = SimilarityTransform::new(0.7, 0.0, -12.0, -30.0);
        let s = sample(8);
        let raw = crop.inverse().apply_set(&s.landmarks);
        let m = mean_shape(40.0, 40.0);
        let p = plan_copies("x", &AugmentationSpec::default(), &m, 1)[0].params;
        let a = augment_sample(&s, &p);
        let composed = p.transform(64).compose(&crop);
        for (i, q) in raw.iter_present() {
            assert!(composed.apply_point(q).dist(a.landmarks.get(i).unwrap()) < 1e-9);
        }
    }

    #[test]
    fn dataset_counts_and_determinism() {
        let samples: Vec<TrainingSample> = (0..10).map(sample).collect();
        let m = mean_shape(40.0, 40.0);
        let spec = AugmentationSpec::default();
        let a = augment_dataset(&samples, &spec, &m, 3).unwrap();
        assert_eq!(a.samples.len(), 50);
        assert_eq!(a.plan.len(), 50);
        assert!(a.samples.iter().all(|s| s.augmentation.is_some()));
        let b = augment_dataset(&samples, &spec, &m, 3).unwrap();
        assert_eq!(a.samples, b.samples);

        let keep = AugmentationSpec {
            retain_originals: true,
            ..spec
        };
        let k = augment_dataset(&samples, &keep, &m, 3).unwrap();
        assert_eq!(k.samples.len(), 60);
        assert_eq!(k.samples[0], samples[0]);
        assert_eq!(k.samples[1], a.samples[0]);

        let none = AugmentationSpec { copies: 0, ..spec };
        let o = augment_dataset(&samples, &none, &m, 3).unwrap();
        assert_eq!(o.samples, samples);
    }

    #[test]
    fn invalid_sigma_is_rejected() {
        let spec = AugmentationSpec {
            scale_sigma: -0.1,
            ..Default::default()
        };
        assert!(spec.validate().is_err());
    }
}
