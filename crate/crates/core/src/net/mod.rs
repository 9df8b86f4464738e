//! Cascaded shape-regression network.
//!
//! Each stage sees the image warped into the canonical frame of the mean
//! shape `S₀` and regresses 60 landmark offsets in that frame. From the
//! second stage on, the input also carries a heatmap of the current shape
//! and a feature image produced by the previous stage's dense activation.
//!
//! Network outputs are offsets in canvas units: the predicted shape is
//! `S + A⁻¹ (canvas · out)`, where `A` is the linear part of the current
//! normalization transform. A stage with a zero output layer therefore leaves
//! the shape bit-for-bit unchanged.

pub mod checkpoint;
pub mod layers;
pub mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{estimate_similarity, render_heatmap, MeanShape, SimilarityTransform, Transform2D};
use crate::imaging::{GrayImage, PAPER_WHITE};
use crate::schema::{LandmarkSet, Point, NUM_LANDMARKS};

use layers::{maxpool_backward, maxpool_forward, relu_backward, relu_in_place, snap, Conv, Dense, Tensor};

pub const MAX_STAGES: usize = 3;
/// Regression outputs per stage: an (x, y) offset per landmark.
pub const OUTPUT_SIZE: usize = 2 * NUM_LANDMARKS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    /// Side of the square input canvas in pixels.
    pub canvas: usize,
    pub stages: usize,
    /// Output channels of each conv block; a 2×2 max pool follows every block.
    pub conv_widths: Vec<usize>,
    pub convs_per_block: usize,
    pub hidden: usize,
    /// Side of the coarse feature-image grid.
    pub feature_grid: usize,
    pub heatmap_radius: f64,
    /// Inset of the mean shape's bounding box, as a fraction of the canvas.
    pub mean_shape_margin: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            canvas: 112,
            stages: 2,
            conv_widths: vec![32, 64, 128, 256],
            convs_per_block: 2,
            hidden: 256,
            feature_grid: 56,
            heatmap_radius: 16.0,
            mean_shape_margin: 0.1,
        }
    }
}

impl NetConfig {
    /// Small configuration for single-core experiments.
    pub fn desk() -> Self {
        Self {
            canvas: 32,
            stages: 2,
            conv_widths: vec![8, 16, 32],
            convs_per_block: 1,
            hidden: 64,
            feature_grid: 8,
            heatmap_radius: 4.0,
            mean_shape_margin: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_STAGES).contains(&self.stages) {
            return Err(Error::Config(format!("stage count must be 1..={MAX_STAGES}, got {}", self.stages)));
        }
        if self.conv_widths.is_empty() || self.conv_widths.contains(&0) {
            return Err(Error::Config("conv_widths must be nonempty and positive".into()));
        }
        if self.convs_per_block == 0 || self.hidden == 0 || self.feature_grid == 0 {
            return Err(Error::Config("convs_per_block, hidden and feature_grid must be positive".into()));
        }
        let pool = 1usize << self.conv_widths.len();
        if self.canvas == 0 || self.canvas % pool != 0 {
            return Err(Error::Config(format!(
                "canvas {} must be a positive multiple of {pool} for {} pooling blocks",
                self.canvas,
                self.conv_widths.len()
            )));
        }
        if !(self.heatmap_radius > 0.0) {
            return Err(Error::Config("heatmap_radius must be positive".into()));
        }
        if !(0.0..0.5).contains(&self.mean_shape_margin) {
            return Err(Error::Config("mean_shape_margin must lie in [0, 0.5)".into()));
        }
        Ok(())
    }

    /// Input planes of a stage (0-based): the image alone for the first
    /// stage, then image, heatmap and feature image.
    pub fn input_channels(&self, stage: usize) -> usize {
        if stage == 0 {
            1
        } else {
            3
        }
    }

    fn flat_len(&self) -> usize {
        let side = self.canvas >> self.conv_widths.len();
        side * side * self.conv_widths.last().copied().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageWeights {
    pub convs: Vec<Conv>,
    pub hidden: Dense,
    /// Final regression layer, zero at initialization.
    pub output: Dense,
    /// Dense projection to the feature-image grid consumed by the next stage.
    pub feature: Dense,
}

impl StageWeights {
    fn init(config: &NetConfig, stage: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut convs = Vec::new();
        let mut cin = config.input_channels(stage);
        for &width in &config.conv_widths {
            for _ in 0..config.convs_per_block {
                convs.push(Conv::he(&format!("conv{}", convs.len()), cin, width, rng));
                cin = width;
            }
        }
        let grid = config.feature_grid * config.feature_grid;
        Self {
            convs,
            hidden: Dense::he("hidden", config.flat_len(), config.hidden, rng),
            output: Dense::zeros("output", config.hidden, OUTPUT_SIZE),
            feature: Dense::he("feature", config.hidden, grid, rng),
        }
    }

    /// All tensors in checkpoint order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.convs.iter().flat_map(|c| c.tensors()).collect();
        out.extend(self.hidden.tensors());
        out.extend(self.output.tensors());
        out.extend(self.feature.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.convs.iter_mut().flat_map(|c| c.tensors_mut()).collect();
        out.extend(self.hidden.tensors_mut());
        out.extend(self.output.tensors_mut());
        out.extend(self.feature.tensors_mut());
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data.fill(0.0);
        }
        z
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CascadeModel {
    pub config: NetConfig,
    /// Initial shape `S₀` in canvas coordinates.
    pub mean_shape: MeanShape,
    pub stages: Vec<StageWeights>,
}

/// Builds a model with He-initialized feature layers and zero regression
/// outputs. All parameters and the mean shape are rounded to `f32` values.
pub fn init_model(config: &NetConfig, mean_shape: &MeanShape, seed: u64) -> Result<CascadeModel> {
    config.validate()?;
    if mean_shape.canvas != config.canvas || mean_shape.points.len() != NUM_LANDMARKS {
        return Err(Error::ShapeMismatch(format!(
            "mean shape for canvas {} with {} points, network canvas {}",
            mean_shape.canvas,
            mean_shape.points.len(),
            config.canvas
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stages = (0..config.stages)
        .map(|s| StageWeights::init(config, s, &mut rng))
        .collect();
    let mut mean_shape = mean_shape.clone();
    for p in mean_shape.points.iter_mut() {
        *p = Point::new(snap(p.x), snap(p.y));
    }
    Ok(CascadeModel {
        config: config.clone(),
        mean_shape,
        stages,
    })
}

impl CascadeModel {
    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn s0(&self) -> [Point; NUM_LANDMARKS] {
        let mut pts = [Point::ORIGIN; NUM_LANDMARKS];
        pts.copy_from_slice(&self.mean_shape.points);
        pts
    }

    /// Appends a freshly initialized stage whose output layer is zero.
    pub fn append_stage(&mut self, seed: u64) -> Result<()> {
        let s = self.stages.len();
        if s >= MAX_STAGES {
            return Err(Error::Config(format!("model already has {MAX_STAGES} stages")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.stages.push(StageWeights::init(&self.config, s, &mut rng));
        self.config.stages = self.stages.len();
        Ok(())
    }

    /// Keeps the first `n` stages.
    pub fn truncated(&self, n: usize) -> Result<CascadeModel> {
        if n == 0 || n > self.stages.len() {
            return Err(Error::Config(format!("cannot keep {n} of {} stages", self.stages.len())));
        }
        let mut m = self.clone();
        m.stages.truncate(n);
        m.config.stages = n;
        Ok(m)
    }
}

/// Activation of the previous stage carried into the next connection layer.
#[derive(Clone, Debug, PartialEq)]
pub struct PrevStage {
    /// Post-ReLU dense activation of the previous stage.
    pub hidden: Vec<f64>,
    /// Image → canonical transform the previous stage ran under.
    pub transform: SimilarityTransform,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageInput {
    pub stage: usize,
    /// Image → canonical transform for the current shape.
    pub transform: SimilarityTransform,
    pub channels: usize,
    /// `channels` canvas-sized planes, channel-major.
    pub planes: Vec<f64>,
}

/// Canonical normalization: the similarity taking `shape` onto `S₀`.
pub fn normalization(model: &CascadeModel, shape: &[Point]) -> Result<SimilarityTransform> {
    estimate_similarity(shape, &model.mean_shape.points)
}

/// Bilinear taps into the feature grid for canvas pixel `q` of the current
/// canonical frame. `rel` maps the current frame to the previous stage's.
fn feature_taps(q: Point, rel: &SimilarityTransform, grid: usize, canvas: usize) -> [(usize, f64); 4] {
    let p = rel.apply_point(q);
    let r = grid as f64 / canvas as f64;
    let gx = (p.x + 0.5) * r - 0.5;
    let gy = (p.y + 0.5) * r - 0.5;
    let (x0, y0) = (gx.floor(), gy.floor());
    let (fx, fy) = (gx - x0, gy - y0);
    let (x0, y0) = (x0 as i64, y0 as i64);
    let mut taps = [(0usize, 0.0); 4];
    for (k, (dx, dy, w)) in [
        (0, 0, (1.0 - fx) * (1.0 - fy)),
        (1, 0, fx * (1.0 - fy)),
        (0, 1, (1.0 - fx) * fy),
        (1, 1, fx * fy),
    ]
    .into_iter()
    .enumerate()
    {
        let (x, y) = (x0 + dx, y0 + dy);
        if x >= 0 && y >= 0 && (x as usize) < grid && (y as usize) < grid {
            taps[k] = (y as usize * grid + x as usize, w);
        }
    }
    taps
}

/// Upsamples the feature grid to the canvas, resampled into the current
/// canonical frame. Outside the grid reads zero.
fn feature_plane(grid_values: &[f64], rel: &SimilarityTransform, grid: usize, canvas: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(canvas * canvas);
    for y in 0..canvas {
        for x in 0..canvas {
            let taps = feature_taps(Point::new(x as f64, y as f64), rel, grid, canvas);
            out.push(taps.iter().map(|&(i, w)| w * grid_values[i]).sum());
        }
    }
    out
}

fn feature_plane_backward(dplane: &[f64], rel: &SimilarityTransform, grid: usize, canvas: usize) -> Vec<f64> {
    let mut dgrid = vec![0.0; grid * grid];
    for y in 0..canvas {
        for x in 0..canvas {
            let d = dplane[y * canvas + x];
            if d == 0.0 {
                continue;
            }
            for (i, w) in feature_taps(Point::new(x as f64, y as f64), rel, grid, canvas) {
                dgrid[i] += w * d;
            }
        }
    }
    dgrid
}

/// Feature-grid activation of a stage's feature layer.
fn feature_grid(layer: &Dense, hidden: &[f64]) -> Vec<f64> {
    let mut g = layer.forward(hidden);
    relu_in_place(&mut g);
    g
}

fn check_image(model: &CascadeModel, image: &GrayImage) -> Result<()> {
    let c = model.config.canvas;
    if image.width() != c || image.height() != c {
        return Err(Error::ShapeMismatch(format!(
            "image is {}×{}, network canvas is {c}×{c}",
            image.width(),
            image.height()
        )));
    }
    Ok(())
}

/// The canonical-frame image and, for later stages, the heatmap planes.
fn fixed_planes(model: &CascadeModel, stage: usize, image: &GrayImage, shape: &[Point], t: &SimilarityTransform) -> Vec<f64> {
    let c = model.config.canvas;
    let inv = t.inverse();
    let mut planes = image.warp(c, c, PAPER_WHITE, |q| inv.apply_point(q)).into_vec();
    if stage > 0 {
        let normalized = t.apply_points(shape);
        planes.extend(render_heatmap(&normalized, c, model.config.heatmap_radius).into_vec());
    }
    planes
}

/// Builds the input of `stage` (0-based) for the current shape in image
/// (canvas) coordinates. Stages after the first need the previous stage's
/// activation.
pub fn connection(
    model: &CascadeModel,
    stage: usize,
    image: &GrayImage,
    shape: &[Point],
    prev: Option<&PrevStage>,
) -> Result<StageInput> {
    check_image(model, image)?;
    if stage >= model.stages.len() {
        return Err(Error::ShapeMismatch(format!("stage {stage} of a {}-stage model", model.stages.len())));
    }
    let t = normalization(model, shape)?;
    let mut planes = fixed_planes(model, stage, image, shape, &t);
    if stage > 0 {
        let prev = prev.ok_or_else(|| Error::ShapeMismatch("later stages need the previous stage's activation".into()))?;
        let grid = feature_grid(&model.stages[stage - 1].feature, &prev.hidden);
        let rel = prev.transform.compose(&t.inverse());
        planes.extend(feature_plane(&grid, &rel, model.config.feature_grid, model.config.canvas));
    }
    Ok(StageInput {
        stage,
        transform: t,
        channels: model.config.input_channels(stage),
        planes,
    })
}

/// Intermediate activations kept for the backward pass.
pub(crate) struct StageTrace {
    conv_cols: Vec<Vec<f64>>,
    conv_out: Vec<Vec<f64>>,
    pool_idx: Vec<Vec<u32>>,
    pool_in_len: Vec<usize>,
    flat: Vec<f64>,
    pub(crate) hidden: Vec<f64>,
    pub(crate) out: Vec<f64>,
}

pub(crate) fn stage_forward_traced(w: &StageWeights, config: &NetConfig, input: &[f64]) -> StageTrace {
    let mut trace = StageTrace {
        conv_cols: Vec::new(),
        conv_out: Vec::new(),
        pool_idx: Vec::new(),
        pool_in_len: Vec::new(),
        flat: Vec::new(),
        hidden: Vec::new(),
        out: Vec::new(),
    };
    let mut side = config.canvas;
    let mut x = input.to_vec();
    let mut layer = 0;
    for &width in &config.conv_widths {
        for _ in 0..config.convs_per_block {
            let (mut y, cols) = w.convs[layer].forward(&x, side, side);
            relu_in_place(&mut y);
            trace.conv_cols.push(cols);
            trace.conv_out.push(y.clone());
            x = y;
            layer += 1;
        }
        let (y, idx) = maxpool_forward(&x, width, side, side);
        trace.pool_in_len.push(x.len());
        trace.pool_idx.push(idx);
        side /= 2;
        x = y;
    }
    let mut h = w.hidden.forward(&x);
    relu_in_place(&mut h);
    trace.out = w.output.forward(&h);
    trace.flat = x;
    trace.hidden = h;
    trace
}

/// Accumulates gradients of all stage parameters given `dL/d out`; returns
/// `dL/d input` when requested.
pub(crate) fn stage_backward(
    w: &StageWeights,
    config: &NetConfig,
    trace: &StageTrace,
    dout: &[f64],
    grad: &mut StageWeights,
    want_dinput: bool,
) -> Option<Vec<f64>> {
    let mut dh = w.output.backward(&trace.hidden, dout, &mut grad.output, true)?;
    relu_backward(&trace.hidden, &mut dh);
    let mut dx = w.hidden.backward(&trace.flat, &dh, &mut grad.hidden, true)?;
    let blocks = config.conv_widths.len();
    let mut layer = w.convs.len();
    let mut side = config.canvas >> blocks;
    for b in (0..blocks).rev() {
        dx = maxpool_backward(&dx, &trace.pool_idx[b], trace.pool_in_len[b]);
        side *= 2;
        for k in (0..config.convs_per_block).rev() {
            layer -= 1;
            relu_backward(&trace.conv_out[layer], &mut dx);
            let first = b == 0 && k == 0;
            if first && !want_dinput {
                w.convs[layer].backward(&trace.conv_cols[layer], &dx, side, side, &mut grad.convs[layer], false);
                return None;
            }
            dx = w.convs[layer]
                .backward(&trace.conv_cols[layer], &dx, side, side, &mut grad.convs[layer], true)
                .expect("dx requested");
        }
    }
    Some(dx)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageOutput {
    /// Offsets for the 60 landmarks in canonical-frame pixels.
    pub delta: Vec<Point>,
    /// Post-ReLU dense activation, feeding the next feature image.
    pub hidden: Vec<f64>,
}

pub fn stage_forward(model: &CascadeModel, input: &StageInput) -> Result<StageOutput> {
    let c = model.config.canvas;
    let expect = model.config.input_channels(input.stage);
    if input.stage >= model.stages.len() || input.channels != expect || input.planes.len() != expect * c * c {
        return Err(Error::ShapeMismatch(format!(
            "stage {} input has {} planes of {} values",
            input.stage,
            input.channels,
            input.planes.len()
        )));
    }
    let trace = stage_forward_traced(&model.stages[input.stage], &model.config, &input.planes);
    Ok(StageOutput {
        delta: out_to_delta(&trace.out, c),
        hidden: trace.hidden,
    })
}

fn out_to_delta(out: &[f64], canvas: usize) -> Vec<Point> {
    let k = canvas as f64;
    out.chunks_exact(2).map(|d| Point::new(k * d[0], k * d[1])).collect()
}

/// `S + A⁻¹ Δ`: applies canonical-frame offsets to an image-frame shape.
pub fn apply_delta(shape: &[Point], transform: &SimilarityTransform, delta: &[Point]) -> Vec<Point> {
    let back = transform.inverse();
    shape
        .iter()
        .zip(delta)
        .map(|(&p, &d)| p + back.apply_vector(d))
        .collect()
}

/// Shapes after each stage, starting from `init`.
pub fn forward_trace(model: &CascadeModel, image: &GrayImage, init: &[Point]) -> Result<Vec<Vec<Point>>> {
    if init.len() != NUM_LANDMARKS {
        return Err(Error::ShapeMismatch(format!("initial shape has {} points", init.len())));
    }
    let mut shape = init.to_vec();
    let mut prev: Option<PrevStage> = None;
    let mut shapes = Vec::with_capacity(model.stages.len());
    for s in 0..model.stages.len() {
        let input = connection(model, s, image, &shape, prev.as_ref())?;
        let out = stage_forward(model, &input)?;
        shape = apply_delta(&shape, &input.transform, &out.delta);
        prev = Some(PrevStage {
            hidden: out.hidden,
            transform: input.transform,
        });
        shapes.push(shape.clone());
    }
    Ok(shapes)
}

/// Runs the cascade from an arbitrary initial shape.
pub fn forward_from(model: &CascadeModel, image: &GrayImage, init: &[Point]) -> Result<LandmarkSet> {
    let shapes = forward_trace(model, image, init)?;
    let mut pts = [Point::ORIGIN; NUM_LANDMARKS];
    pts.copy_from_slice(shapes.last().expect("at least one stage"));
    Ok(LandmarkSet::from_points(pts))
}

/// Predicts all 60 landmarks in canvas coordinates, starting from `S₀`.
pub fn forward(model: &CascadeModel, image: &GrayImage) -> Result<LandmarkSet> {
    forward_from(model, image, &model.mean_shape.points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::compute_mean_shape;
    use rand::Rng;

    pub(crate) fn tiny_config(stages: usize) -> NetConfig {
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

    fn random_shape(rng: &mut ChaCha8Rng, canvas: f64) -> LandmarkSet {
        let mut pts = [Point::ORIGIN; NUM_LANDMARKS];
        for p in pts.iter_mut() {
            *p = Point::new(rng.random_range(0.0..canvas), rng.random_range(0.0..canvas));
        }
        LandmarkSet::from_points(pts)
    }

    fn model(config: &NetConfig, seed: u64) -> CascadeModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes: Vec<LandmarkSet> = (0..4).map(|_| random_shape(&mut rng, 50.0)).collect();
        let mean = compute_mean_shape(&shapes, config.canvas, config.mean_shape_margin).unwrap();
        init_model(config, &mean, seed).unwrap()
    }

    fn noise_image(canvas: usize, seed: u64) -> GrayImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GrayImage::from_fn(canvas, canvas, |_, _| rng.random_range(0.0..1.0))
    }

    #[test]
    fn config_validation() {
        assert!(NetConfig::default().validate().is_ok());
        assert!(NetConfig::desk().validate().is_ok());
        for bad in [
            NetConfig { stages: 0, ..NetConfig::desk() },
            NetConfig { stages: 4, ..NetConfig::desk() },
            NetConfig { canvas: 36, ..NetConfig::desk() },
            NetConfig { conv_widths: vec![], ..NetConfig::desk() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
        let mean = MeanShape { points: vec![Point::ORIGIN; 60], canvas: 32, margin: 0.1 };
        assert!(init_model(&NetConfig { stages: 0, ..NetConfig::desk() }, &mean, 0).is_err());
    }

    #[test]
    fn same_seed_same_weights() {
        let cfg = NetConfig::desk();
        assert_eq!(model(&cfg, 3), model(&cfg, 3));
        assert_ne!(model(&cfg, 3).stages, model(&cfg, 4).stages);
    }

    #[test]
    fn untrained_forward_returns_mean_shape() {
        let cfg = NetConfig::desk();
        let m = model(&cfg, 5);
        let out = forward(&m, &noise_image(32, 1)).unwrap();
        assert_eq!(out.present_count(), NUM_LANDMARKS);
        assert_eq!(&out.complete_points().unwrap()[..], &m.mean_shape.points[..]);
    }

    #[test]
    fn connection_at_mean_shape_is_identity() {
        let cfg = NetConfig::desk();
        let m = model(&cfg, 6);
        let img = noise_image(32, 2);
        let input = connection(&m, 0, &img, &m.mean_shape.points, None).unwrap();
        assert_eq!(input.transform, SimilarityTransform::IDENTITY);
        assert_eq!(&input.planes[..], img.data());

        // Later stages carry a heatmap peaking at 1 where landmarks sit on pixels.
        let prev = PrevStage { hidden: vec![0.5; cfg.hidden], transform: SimilarityTransform::IDENTITY };
        let mut shape = m.mean_shape.points.clone();
        shape[3] = Point::new(10.0, 12.0);
        let input = connection(&m, 1, &img, &shape, Some(&prev)).unwrap();
        assert_eq!(input.channels, 3);
        let heat = &input.planes[32 * 32..2 * 32 * 32];
        let p = input.transform.apply_point(shape[3]);
        let (x, y) = (p.x.round() as usize, p.y.round() as usize);
        assert!(heat[y * 32 + x] > 1.0 / (1.0 + 0.75));
        assert!(heat.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(connection(&m, 1, &img, &shape, None).is_err());
    }

    #[test]
    fn normalization_round_trip() {
        let cfg = NetConfig::desk();
        let m = model(&cfg, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let shape = random_shape(&mut rng, 32.0);
        let pts = shape.complete_points().unwrap();
        let t = normalization(&m, pts).unwrap();
        let back = t.inverse().apply_points(&t.apply_points(pts));
        for (a, b) in back.iter().zip(pts) {
            assert!(a.dist(*b) < 1e-6);
        }
        assert!(normalization(&m, &[Point::new(1.0, 1.0); 60]).is_err());
    }

    #[test]
    fn zero_stage_appended_changes_nothing() {
        let cfg = NetConfig { stages: 1, ..NetConfig::desk() };
        let mut m = model(&cfg, 9);
        // Make stage 1 non-trivial.
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for v in m.stages[0].output.w.data.iter_mut() {
            *v = snap(rng.random_range(-0.01..0.01));
        }
        let img = noise_image(32, 3);
        let one = forward(&m, &img).unwrap();
        assert_ne!(&one.complete_points().unwrap()[..], &m.mean_shape.points[..]);
        m.append_stage(11).unwrap();
        assert_eq!(forward(&m, &img).unwrap(), one);
    }

    #[test]
    fn weight_perturbation_changes_output() {
        let cfg = tiny_config(1);
        let mut m = model(&cfg, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for v in m.stages[0].output.w.data.iter_mut() {
            *v = rng.random_range(-0.1..0.1);
        }
        let img = noise_image(8, 4);
        let base = forward(&m, &img).unwrap();
        let mut moved = m.clone();
        moved.stages[0].convs[0].w.data[4] += 1e-3;
        assert_ne!(forward(&moved, &img).unwrap(), base);
        assert_eq!(forward(&m, &img).unwrap(), base);
    }

    #[test]
    fn mismatched_inputs_error() {
        let cfg = NetConfig::desk();
        let m = model(&cfg, 14);
        assert!(forward(&m, &noise_image(16, 1)).is_err());
        let bad = StageInput { stage: 0, transform: SimilarityTransform::IDENTITY, channels: 1, planes: vec![0.0; 10] };
        assert!(stage_forward(&m, &bad).is_err());
    }

    #[test]
    fn feature_plane_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let rel = SimilarityTransform::new(1.1, 0.2, -1.5, 0.7);
        let g: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let d: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let plane = feature_plane(&g, &rel, 4, 8);
        let back = feature_plane_backward(&d, &rel, 4, 8);
        let lhs: f64 = plane.iter().zip(&d).map(|(a, b)| a * b).sum();
        let rhs: f64 = back.iter().zip(&g).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
