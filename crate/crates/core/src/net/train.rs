//! Stage-wise training with the chin-normalized loss.
//!
//! Stages train one after another. While stage `s` trains, earlier stages
//! are frozen except for the feature layer of stage `s − 1`, whose only
//! consumer is stage `s`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::layers::{relu_backward, snap, Dense, Tensor};
use super::{
    apply_delta, feature_grid, feature_plane, feature_plane_backward, fixed_planes, normalization, out_to_delta,
    stage_backward, stage_forward_traced, CascadeModel, PrevStage, StageWeights,
};
use crate::dataset::TrainingSample;
use crate::error::{Error, Result};
use crate::eval::chin_distance;
use crate::geometry::SimilarityTransform;
use crate::schema::{LandmarkSet, Point, NUM_LANDMARKS};

/// Samples per gradient work unit. Partial gradients are summed in chunk
/// order, so results do not depend on the thread count.
const GRAD_CHUNK: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSchedule {
    /// Epoch cap for each stage.
    pub max_epochs: usize,
    /// Stop a stage after this many epochs without validation improvement.
    pub patience: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Seeds minibatch order; set from the run seed, not from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainingSchedule {
    fn default() -> Self {
        Self {
            max_epochs: 150,
            patience: 15,
            batch_size: 64,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainingSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("max_epochs and batch_size must be positive".into()));
        }
        if self.patience >= self.max_epochs {
            return Err(Error::Config(format!(
                "patience {} must be below max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("invalid optimizer hyperparameters".into()));
        }
        Ok(())
    }
}

/// Mean over landmarks of the Euclidean error, divided by the truth's chin
/// distance.
pub fn loss(pred: &LandmarkSet, truth: &LandmarkSet) -> Result<f64> {
    Ok(crate::eval::normalized_error(pred, truth)?.normalized)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    /// 1-based stage number.
    pub stage: usize,
    /// 1-based epoch within the stage.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Training loss at the best epoch.
    pub train_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub curves: Vec<LossRecord>,
    pub stages: Vec<StageSummary>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,epoch,train_loss,val_loss\n");
        for r in &self.curves {
            out.push_str(&format!("{},{},{},{}\n", r.stage, r.epoch, r.train_loss, r.val_loss));
        }
        out
    }
}

/// A sample with the frozen prefix of the cascade already applied.
pub struct Prepared {
    /// Canonical image (and heatmap for later stages).
    fixed: Vec<f64>,
    prev_hidden: Option<Vec<f64>>,
    /// Current canonical frame → previous stage's canonical frame.
    rel: SimilarityTransform,
    shape: Vec<Point>,
    transform: SimilarityTransform,
    truth: Vec<Point>,
    chin: f64,
}

/// Runs stages `0..stage` and builds the inputs of `stage` that do not
/// depend on trainable parameters.
pub fn prepare(model: &CascadeModel, stage: usize, samples: &[TrainingSample]) -> Result<Vec<Prepared>> {
    if stage >= model.stages.len() {
        return Err(Error::ShapeMismatch(format!("stage {stage} of a {}-stage model", model.stages.len())));
    }
    samples
        .par_iter()
        .map(|s| {
            super::check_image(model, &s.image)?;
            let truth = s.landmarks.complete_points()?.to_vec();
            let chin = chin_distance(&s.landmarks)?;
            if chin == 0.0 {
                return Err(Error::ZeroChinDistance);
            }
            let mut shape = model.mean_shape.points.clone();
            let mut prev: Option<PrevStage> = None;
            for k in 0..stage {
                let input = super::connection(model, k, &s.image, &shape, prev.as_ref())?;
                let out = super::stage_forward(model, &input)?;
                shape = apply_delta(&shape, &input.transform, &out.delta);
                prev = Some(PrevStage {
                    hidden: out.hidden,
                    transform: input.transform,
                });
            }
            let t = normalization(model, &shape)?;
            let rel = prev
                .as_ref()
                .map(|p| p.transform.compose(&t.inverse()))
                .unwrap_or(SimilarityTransform::IDENTITY);
            Ok(Prepared {
                fixed: fixed_planes(model, stage, &s.image, &shape, &t),
                prev_hidden: prev.map(|p| p.hidden),
                rel,
                shape,
                transform: t,
                truth,
                chin,
            })
        })
        .collect()
}

/// Gradients of the parameters trained with one stage.
#[derive(Clone)]
struct Grads {
    stage: StageWeights,
    prev_feature: Option<Dense>,
}

impl Grads {
    fn zeros(model: &CascadeModel, stage: usize) -> Self {
        Self {
            stage: model.stages[stage].zeros_like(),
            prev_feature: (stage > 0).then(|| {
                let f = &model.stages[stage - 1].feature;
                Dense {
                    w: f.w.zeros_like(),
                    b: f.b.zeros_like(),
                }
            }),
        }
    }

    fn tensors(&self) -> Vec<&Tensor> {
        let mut out = trained_of(&self.stage);
        if let Some(f) = &self.prev_feature {
            out.extend(f.tensors());
        }
        out
    }

    fn add_assign(&mut self, other: &Grads) {
        let mine = self.tensors_mut();
        for (a, b) in mine.into_iter().zip(other.tensors()) {
            a.add_assign(b);
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.stage.convs.iter_mut().flat_map(|c| c.tensors_mut()).collect();
        out.extend(self.stage.hidden.tensors_mut());
        out.extend(self.stage.output.tensors_mut());
        if let Some(f) = &mut self.prev_feature {
            out.extend(f.tensors_mut());
        }
        out
    }
}

fn trained_of(w: &StageWeights) -> Vec<&Tensor> {
    let mut out: Vec<&Tensor> = w.convs.iter().flat_map(|c| c.tensors()).collect();
    out.extend(w.hidden.tensors());
    out.extend(w.output.tensors());
    out
}

/// Parameters updated while `stage` trains, in a fixed order: the stage's
/// conv, hidden and output tensors, then the previous stage's feature layer.
pub fn trainable_tensors_mut(model: &mut CascadeModel, stage: usize) -> Vec<&mut Tensor> {
    let (before, rest) = model.stages.split_at_mut(stage);
    let w = &mut rest[0];
    let mut out: Vec<&mut Tensor> = w.convs.iter_mut().flat_map(|c| c.tensors_mut()).collect();
    out.extend(w.hidden.tensors_mut());
    out.extend(w.output.tensors_mut());
    if let Some(prev) = before.last_mut() {
        out.extend(prev.feature.tensors_mut());
    }
    out
}

struct SampleResult {
    loss: f64,
    pred: Vec<Point>,
}

/// Forward pass for one prepared sample; with `grads`, also accumulates
/// the gradient of this sample's loss.
fn run_sample(model: &CascadeModel, stage: usize, p: &Prepared, grads: Option<&mut Grads>) -> SampleResult {
    let cfg = &model.config;
    let c = cfg.canvas;
    let w = &model.stages[stage];
    let mut input = p.fixed.clone();
    let mut grid = Vec::new();
    if let Some(h) = &p.prev_hidden {
        grid = feature_grid(&model.stages[stage - 1].feature, h);
        input.extend(feature_plane(&grid, &p.rel, cfg.feature_grid, c));
    }
    let trace = stage_forward_traced(w, cfg, &input);
    let delta = out_to_delta(&trace.out, c);
    let pred = apply_delta(&p.shape, &p.transform, &delta);
    let scale = 1.0 / (NUM_LANDMARKS as f64 * p.chin);
    let loss = pred.iter().zip(&p.truth).map(|(a, b)| a.dist(*b)).sum::<f64>() * scale;

    if let Some(g) = grads {
        // d pred_i = unit residual / (60 D_chin); d out = canvas · Aᵀ⁻¹ d pred.
        let back = p.transform.inverse();
        let m = back.matrix();
        let k = c as f64;
        let mut dout = Vec::with_capacity(2 * NUM_LANDMARKS);
        for (a, b) in pred.iter().zip(&p.truth) {
            let r = *a - *b;
            let n = r.norm();
            let d = if n > 0.0 { r * (scale / n) } else { Point::ORIGIN };
            dout.push(k * (m[0][0] * d.x + m[1][0] * d.y));
            dout.push(k * (m[0][1] * d.x + m[1][1] * d.y));
        }
        let want_input = p.prev_hidden.is_some();
        let dinput = stage_backward(w, cfg, &trace, &dout, &mut g.stage, want_input);
        if let (Some(dinput), Some(h), Some(gf)) = (dinput, &p.prev_hidden, g.prev_feature.as_mut()) {
            let plane = c * c;
            let dplane = &dinput[2 * plane..3 * plane];
            let mut dgrid = feature_plane_backward(dplane, &p.rel, cfg.feature_grid, c);
            relu_backward(&grid, &mut dgrid);
            model.stages[stage - 1].feature.backward(h, &dgrid, gf, false);
        }
    }
    SampleResult { loss, pred }
}

/// Mean loss over `samples` and its gradient with respect to the tensors
/// returned by [`trainable_tensors_mut`], in the same order.
pub fn loss_and_gradient(model: &CascadeModel, stage: usize, samples: &[Prepared]) -> (f64, Vec<Tensor>) {
    let (loss, g) = batch_gradient(model, stage, samples.iter().collect::<Vec<_>>().as_slice());
    (loss, g.tensors().into_iter().cloned().collect())
}

fn batch_gradient(model: &CascadeModel, stage: usize, batch: &[&Prepared]) -> (f64, Grads) {
    let partials: Vec<(f64, Grads)> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut g = Grads::zeros(model, stage);
            let mut loss = 0.0;
            for p in chunk {
                loss += run_sample(model, stage, p, Some(&mut g)).loss;
            }
            (loss, g)
        })
        .collect();
    let mut iter = partials.into_iter();
    let (mut loss, mut total) = iter.next().expect("nonempty batch");
    for (l, g) in iter {
        loss += l;
        total.add_assign(&g);
    }
    let inv = 1.0 / batch.len() as f64;
    for t in total.tensors_mut() {
        for v in t.data.iter_mut() {
            *v *= inv;
        }
    }
    (loss * inv, total)
}

/// Mean loss and predicted shapes for prepared samples, no gradients.
pub fn evaluate_prepared(model: &CascadeModel, stage: usize, samples: &[Prepared]) -> (f64, Vec<Vec<Point>>) {
    let results: Vec<SampleResult> = samples.par_iter().map(|p| run_sample(model, stage, p, None)).collect();
    let loss = results.iter().map(|r| r.loss).sum::<f64>() / results.len() as f64;
    (loss, results.into_iter().map(|r| r.pred).collect())
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    fn new(params: &[&mut Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, params: Vec<&mut Tensor>, grads: Vec<&Tensor>, s: &TrainingSchedule) {
        self.t += 1;
        let c1 = 1.0 - s.beta1.powi(self.t);
        let c2 = 1.0 - s.beta2.powi(self.t);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &gi), mi), vi) in p.data.iter_mut().zip(&g.data).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = s.beta1 * *mi + (1.0 - s.beta1) * gi;
                *vi = s.beta2 * *vi + (1.0 - s.beta2) * gi * gi;
                let update = s.learning_rate * (*mi / c1) / ((*vi / c2).sqrt() + s.epsilon);
                *w = snap(*w - update);
            }
        }
    }
}

fn snapshot(model: &mut CascadeModel, stage: usize) -> Vec<Tensor> {
    trainable_tensors_mut(model, stage).into_iter().map(|t| t.clone()).collect()
}

fn restore(model: &mut CascadeModel, stage: usize, saved: &[Tensor]) {
    for (t, s) in trainable_tensors_mut(model, stage).into_iter().zip(saved) {
        t.data.copy_from_slice(&s.data);
    }
}

fn stage_seed(seed: u64, stage: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (stage as u64 + 1)
}

/// Trains one stage with early stopping, restoring the weights of the best
/// validation epoch. Returns the per-epoch curve and a summary.
pub fn train_stage(
    model: &mut CascadeModel,
    stage: usize,
    train: &[TrainingSample],
    val: &[TrainingSample],
    schedule: &TrainingSchedule,
) -> Result<(Vec<LossRecord>, StageSummary)> {
    schedule.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Empty("training needs nonempty train and validation sets"));
    }
    let train_p = prepare(model, stage, train)?;
    let val_p = prepare(model, stage, val)?;
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(schedule.seed, stage));
    let mut adam = Adam::new(&trainable_tensors_mut(model, stage));
    let mut order: Vec<usize> = (0..train_p.len()).collect();
    let mut curve = Vec::new();
    let (initial_val, _) = evaluate_prepared(model, stage, &val_p);
    let (initial_train, _) = evaluate_prepared(model, stage, &train_p);
    let mut best = (initial_val, 0usize, initial_train);
    let mut best_weights = snapshot(model, stage);

    for epoch in 1..=schedule.max_epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(schedule.batch_size) {
            let batch: Vec<&Prepared> = idx.iter().map(|&i| &train_p[i]).collect();
            let (_, grads) = batch_gradient(model, stage, &batch);
            let params = trainable_tensors_mut(model, stage);
            adam.step(params, grads.tensors(), schedule);
        }
        let (train_loss, _) = evaluate_prepared(model, stage, &train_p);
        let (val_loss, _) = evaluate_prepared(model, stage, &val_p);
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(Error::Diverged {
                stage: stage + 1,
                epoch,
                loss: if train_loss.is_finite() { val_loss } else { train_loss },
            });
        }
        log::debug!("stage {} epoch {epoch}: train {train_loss:.5} val {val_loss:.5}", stage + 1);
        curve.push(LossRecord {
            stage: stage + 1,
            epoch,
            train_loss,
            val_loss,
        });
        if val_loss < best.0 {
            best = (val_loss, epoch, train_loss);
            best_weights = snapshot(model, stage);
        } else if epoch - best.1 >= schedule.patience {
            break;
        }
    }
    restore(model, stage, &best_weights);
    let summary = StageSummary {
        stage: stage + 1,
        epochs_run: curve.len(),
        best_epoch: best.1,
        best_val_loss: best.0,
        train_loss: best.2,
    };
    Ok((curve, summary))
}

/// Trains every stage in order.
pub fn train(
    model: &mut CascadeModel,
    train: &[TrainingSample],
    val: &[TrainingSample],
    schedule: &TrainingSchedule,
) -> Result<TrainReport> {
    let mut report = TrainReport::default();
    for s in 0..model.stages.len() {
        let (curve, summary) = train_stage(model, s, train, val, schedule)?;
        log::info!(
            "stage {}: {} epochs, best val {:.5} at epoch {}",
            s + 1,
            summary.epochs_run,
            summary.best_val_loss,
            summary.best_epoch
        );
        report.curves.extend(curve);
        report.stages.push(summary);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::compute_mean_shape;
    use crate::imaging::GrayImage;
    use crate::net::{forward, init_model, NetConfig};
    use rand::Rng;

    fn tiny(stages: usize) -> NetConfig {
        NetConfig {
            canvas: 8,
            stages,
            conv_widths: vec![2],
            convs_per_block: 1,
            hidden: 8,
            feature_grid: 4,
            heatmap_radius: 2.0,
            mean_shape_margin: 0.1,
        }
    }

    fn samples(n: usize, canvas: usize, seed: u64) -> Vec<TrainingSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let mut pts = [Point::ORIGIN; NUM_LANDMARKS];
                let c = canvas as f64;
                for p in pts.iter_mut() {
                    *p = Point::new(rng.random_range(0.1 * c..0.9 * c), rng.random_range(0.1 * c..0.9 * c));
                }
                pts[0] = Point::new(0.15 * c, 0.4 * c);
                pts[16] = Point::new(0.85 * c, 0.45 * c);
                TrainingSample {
                    image: GrayImage::from_fn(canvas, canvas, |_, _| rng.random_range(0.0..1.0)),
                    landmarks: LandmarkSet::from_points(pts),
                    record_id: format!("s{i}"),
                    augmentation: None,
                }
            })
            .collect()
    }

    fn model_for(cfg: &NetConfig, data: &[TrainingSample], seed: u64) -> CascadeModel {
        let shapes: Vec<LandmarkSet> = data.iter().map(|s| s.landmarks).collect();
        let mean = compute_mean_shape(&shapes, cfg.canvas, cfg.mean_shape_margin).unwrap();
        init_model(cfg, &mean, seed).unwrap()
    }

    fn randomize_outputs(model: &mut CascadeModel, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for st in model.stages.iter_mut() {
            for v in st.output.w.data.iter_mut().chain(st.output.b.data.iter_mut()) {
                *v = rng.random_range(-0.05..0.05);
            }
            for v in st.feature.b.data.iter_mut().chain(st.hidden.b.data.iter_mut()) {
                *v = rng.random_range(0.0..0.1);
            }
        }
    }

    fn max_gradient_error(model: &mut CascadeModel, stage: usize, data: &[TrainingSample]) -> f64 {
        let prepared = prepare(model, stage, data).unwrap();
        let (_, analytic) = loss_and_gradient(model, stage, &prepared);
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        let count = trainable_tensors_mut(model, stage).len();
        for ti in 0..count {
            let n = analytic[ti].data.len();
            for j in 0..n {
                let orig = trainable_tensors_mut(model, stage)[ti].data[j];
                trainable_tensors_mut(model, stage)[ti].data[j] = orig + h;
                let (lp, _) = evaluate_prepared(model, stage, &prepared);
                trainable_tensors_mut(model, stage)[ti].data[j] = orig - h;
                let (lm, _) = evaluate_prepared(model, stage, &prepared);
                trainable_tensors_mut(model, stage)[ti].data[j] = orig;
                let numeric = (lp - lm) / (2.0 * h);
                let a = analytic[ti].data[j];
                let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
                worst = worst.max(err);
            }
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        let data = samples(3, 8, 1);
        let mut one = model_for(&tiny(1), &data, 2);
        randomize_outputs(&mut one, 3);
        let e1 = max_gradient_error(&mut one, 0, &data);
        assert!(e1 < 1e-4, "stage 1 relative error {e1}");

        let mut two = model_for(&tiny(2), &data, 4);
        randomize_outputs(&mut two, 5);
        let e2 = max_gradient_error(&mut two, 1, &data);
        assert!(e2 < 1e-4, "stage 2 relative error {e2}");
    }

    #[test]
    fn validation_loss_matches_eval_module() {
        let data = samples(6, 8, 6);
        let mut m = model_for(&tiny(1), &data, 7);
        randomize_outputs(&mut m, 8);
        let prepared = prepare(&m, 0, &data).unwrap();
        let (l, _) = evaluate_prepared(&m, 0, &prepared);
        let independent: f64 = data
            .iter()
            .map(|s| loss(&forward(&m, &s.image).unwrap(), &s.landmarks).unwrap())
            .sum::<f64>()
            / data.len() as f64;
        assert!((l - independent).abs() < 1e-9);
    }

    #[test]
    fn training_reduces_loss_and_logs_every_epoch() {
        let data = samples(8, 8, 9);
        let mut m = model_for(&tiny(2), &data, 10);
        let schedule = TrainingSchedule {
            max_epochs: 6,
            patience: 5,
            batch_size: 4,
            learning_rate: 1e-2,
            ..Default::default()
        };
        let report = train(&mut m, &data, &data[..4], &schedule).unwrap();
        for s in &report.stages {
            let n = report.curves.iter().filter(|r| r.stage == s.stage).count();
            assert_eq!(n, s.epochs_run);
        }
        let first = report.curves[0].train_loss;
        assert!(report.stages[0].train_loss <= first);
        let csv = report.to_csv();
        assert!(csv.starts_with("stage,epoch,train_loss,val_loss\n"));
        assert_eq!(csv.lines().count(), report.curves.len() + 1);
    }

    #[test]
    fn training_is_deterministic() {
        let data = samples(6, 8, 11);
        let schedule = TrainingSchedule {
            max_epochs: 3,
            patience: 2,
            batch_size: 5,
            ..Default::default()
        };
        let run = || {
            let mut m = model_for(&tiny(2), &data, 12);
            let r = train(&mut m, &data, &data[..2], &schedule).unwrap();
            (m, r)
        };
        let (a, ra) = run();
        let (b, rb) = run();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
    }

    #[test]
    fn schedule_validation() {
        assert!(TrainingSchedule::default().validate().is_ok());
        let bad = TrainingSchedule { patience: 150, ..Default::default() };
        assert!(bad.validate().is_err());
        let data = samples(2, 8, 1);
        let mut m = model_for(&tiny(1), &data, 1);
        assert!(train(&mut m, &data, &[], &TrainingSchedule::default()).is_err());
    }
}
