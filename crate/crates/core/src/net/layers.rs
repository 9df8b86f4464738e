//! Dense, 3×3 convolution and 2×2 max-pool layers with hand-written
//! backward passes. Activations are flat `f64` buffers in channel-major
//! `(channel, row, column)` order.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Rounds to the nearest `f32`, so values survive a 32-bit checkpoint.
pub fn snap(v: f64) -> f64 {
    v as f32 as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(name: impl Into<String>, dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Self {
            name: name.into(),
            dims,
            data: vec![0.0; n],
        }
    }

    /// He-normal initialization with the given fan-in.
    pub fn he(name: impl Into<String>, dims: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Self {
        let mut t = Self::zeros(name, dims);
        let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive fan-in");
        for v in t.data.iter_mut() {
            *v = snap(dist.sample(rng));
        }
        t
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.name.clone(), self.dims.clone())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

pub fn relu_in_place(x: &mut [f64]) {
    for v in x.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes gradient entries whose forward ReLU output was zero.
pub fn relu_backward(activated: &[f64], grad: &mut [f64]) {
    for (g, &a) in grad.iter_mut().zip(activated) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// `y = W x + b` with `W` stored as `[out, in]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub w: Tensor,
    pub b: Tensor,
}

impl Dense {
    pub fn zeros(name: &str, nin: usize, nout: usize) -> Self {
        Self {
            w: Tensor::zeros(format!("{name}.weight"), vec![nout, nin]),
            b: Tensor::zeros(format!("{name}.bias"), vec![nout]),
        }
    }

    pub fn he(name: &str, nin: usize, nout: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: Tensor::he(format!("{name}.weight"), vec![nout, nin], nin, rng),
            b: Tensor::zeros(format!("{name}.bias"), vec![nout]),
        }
    }

    pub fn nin(&self) -> usize {
        self.w.dims[1]
    }

    pub fn nout(&self) -> usize {
        self.w.dims[0]
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let nin = self.nin();
        self.w
            .data
            .chunks_exact(nin)
            .zip(&self.b.data)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>())
            .collect()
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx` when
    /// asked for.
    pub fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Dense, want_dx: bool) -> Option<Vec<f64>> {
        let nin = self.nin();
        for ((grow, &d), gb) in grad.w.data.chunks_exact_mut(nin).zip(dy).zip(grad.b.data.iter_mut()) {
            *gb += d;
            if d != 0.0 {
                for (g, &xi) in grow.iter_mut().zip(x) {
                    *g += d * xi;
                }
            }
        }
        want_dx.then(|| {
            let mut dx = vec![0.0; nin];
            for (row, &d) in self.w.data.chunks_exact(nin).zip(dy) {
                if d != 0.0 {
                    for (o, &w) in dx.iter_mut().zip(row) {
                        *o += d * w;
                    }
                }
            }
            dx
        })
    }

    pub fn tensors(&self) -> [&Tensor; 2] {
        [&self.w, &self.b]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.w, &mut self.b]
    }
}

/// 3×3 convolution, stride 1, zero padding 1. `W` is `[out, in, 3, 3]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv {
    pub w: Tensor,
    pub b: Tensor,
}

fn im2col(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut cols = vec![0.0; c * 9 * hw];
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ch * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            row[y * w + xx] = plane[sy as usize * w + sx as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut x = vec![0.0; c * hw];
    for ch in 0..c {
        let plane = &mut x[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ch * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            plane[sy as usize * w + sx as usize] += row[y * w + xx];
                        }
                    }
                }
            }
        }
    }
    x
}

impl Conv {
    pub fn he(name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: Tensor::he(format!("{name}.weight"), vec![cout, cin, 3, 3], cin * 9, rng),
            b: Tensor::zeros(format!("{name}.bias"), vec![cout]),
        }
    }

    pub fn cin(&self) -> usize {
        self.w.dims[1]
    }

    pub fn cout(&self) -> usize {
        self.w.dims[0]
    }

    /// Returns the pre-activation output and the im2col buffer for backward.
    pub fn forward(&self, x: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
        let (cin, cout, hw) = (self.cin(), self.cout(), h * w);
        let k = cin * 9;
        let cols = im2col(x, cin, h, w);
        let mut y = vec![0.0; cout * hw];
        for (plane, &b) in y.chunks_exact_mut(hw).zip(&self.b.data) {
            plane.fill(b);
        }
        // SAFETY: slice lengths match the (m, k, n) shapes and strides given.
        unsafe {
            matrixmultiply::dgemm(
                cout, k, hw, 1.0,
                self.w.data.as_ptr(), k as isize, 1,
                cols.as_ptr(), hw as isize, 1,
                1.0,
                y.as_mut_ptr(), hw as isize, 1,
            );
        }
        (y, cols)
    }

    /// `dy` is the gradient of the pre-activation output.
    pub fn backward(&self, cols: &[f64], dy: &[f64], h: usize, w: usize, grad: &mut Conv, want_dx: bool) -> Option<Vec<f64>> {
        let (cin, cout, hw) = (self.cin(), self.cout(), h * w);
        let k = cin * 9;
        for (plane, gb) in dy.chunks_exact(hw).zip(grad.b.data.iter_mut()) {
            *gb += plane.iter().sum::<f64>();
        }
        // SAFETY: as in forward; the transposed operands use swapped strides.
        unsafe {
            matrixmultiply::dgemm(
                cout, hw, k, 1.0,
                dy.as_ptr(), hw as isize, 1,
                cols.as_ptr(), 1, hw as isize,
                1.0,
                grad.w.data.as_mut_ptr(), k as isize, 1,
            );
        }
        want_dx.then(|| {
            let mut dcols = vec![0.0; k * hw];
            // SAFETY: as above.
            unsafe {
                matrixmultiply::dgemm(
                    k, cout, hw, 1.0,
                    self.w.data.as_ptr(), 1, k as isize,
                    dy.as_ptr(), hw as isize, 1,
                    0.0,
                    dcols.as_mut_ptr(), hw as isize, 1,
                );
            }
            col2im(&dcols, cin, h, w)
        })
    }

    pub fn tensors(&self) -> [&Tensor; 2] {
        [&self.w, &self.b]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.w, &mut self.b]
    }
}

/// 2×2 max pool with stride 2. Returns the pooled map and, per output, the
/// flat input index that won.
pub fn maxpool_forward(x: &[f64], c: usize, h: usize, w: usize) -> (Vec<f64>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Vec::with_capacity(c * oh * ow);
    let mut idx = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                y.push(x[best]);
                idx.push(best as u32);
            }
        }
    }
    (y, idx)
}

pub fn maxpool_backward(dy: &[f64], idx: &[u32], input_len: usize) -> Vec<f64> {
    let mut dx = vec![0.0; input_len];
    for (&d, &i) in dy.iter().zip(idx) {
        dx[i as usize] += d;
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(conv: &Conv, x: &[f64], h: usize, w: usize) -> Vec<f64> {
        let (cin, cout) = (conv.cin(), conv.cout());
        let mut y = vec![0.0; cout * h * w];
        for o in 0..cout {
            for yy in 0..h {
                for xx in 0..w {
                    let mut acc = conv.b.data[o];
                    for i in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let sy = yy as isize + ky as isize - 1;
                                let sx = xx as isize + kx as isize - 1;
                                if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                                    acc += conv.w.data[((o * cin + i) * 3 + ky) * 3 + kx]
                                        * x[(i * h + sy as usize) * w + sx as usize];
                                }
                            }
                        }
                    }
                    y[(o * h + yy) * w + xx] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut conv = Conv::he("c", 3, 4, &mut rng);
        for b in conv.b.data.iter_mut() {
            *b = rng.random_range(-1.0..1.0);
        }
        let x: Vec<f64> = (0..3 * 5 * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (y, _) = conv.forward(&x, 5, 6);
        let expect = naive_conv(&conv, &x, 5, 6);
        for (a, b) in y.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <dy, conv_lin(x)> = <conv_lin^T(dy), x> for the bias-free map.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = Conv::he("c", 2, 3, &mut rng);
        let (h, w) = (4, 5);
        let x: Vec<f64> = (0..2 * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dy: Vec<f64> = (0..3 * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (y, cols) = conv.forward(&x, h, w);
        let mut g = Conv { w: conv.w.zeros_like(), b: conv.b.zeros_like() };
        let dx = conv.backward(&cols, &dy, h, w, &mut g, true).unwrap();
        let lhs: f64 = dy.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = dx.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        // Weight gradient of <dy, y> is linear in W, so <gW, W> = <dy, y>.
        let gw: f64 = g.w.data.iter().zip(&conv.w.data).map(|(a, b)| a * b).sum();
        assert!((gw - lhs).abs() < 1e-10);
    }

    #[test]
    fn dense_and_pool() {
        let d = Dense {
            w: Tensor { name: "w".into(), dims: vec![2, 3], data: vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0] },
            b: Tensor { name: "b".into(), dims: vec![2], data: vec![0.5, 0.0] },
        };
        assert_eq!(d.forward(&[1.0, 1.0, 1.0]), vec![6.5, 0.0]);
        let mut g = Dense { w: d.w.zeros_like(), b: d.b.zeros_like() };
        let dx = d.backward(&[1.0, 2.0, 3.0], &[1.0, 2.0], &mut g, true).unwrap();
        assert_eq!(dx, vec![-1.0, 2.0, 5.0]);
        assert_eq!(g.w.data, vec![1.0, 2.0, 3.0, 2.0, 4.0, 6.0]);

        let x = [1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 9.0, 1.0];
        let (y, idx) = maxpool_forward(&x, 1, 2, 4);
        assert_eq!(y, vec![5.0, 9.0]);
        assert_eq!(maxpool_backward(&[1.0, 2.0], &idx, 8), vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn snapped_values_are_f32_exact() {
        let v = snap(0.1);
        assert_eq!(v as f32 as f64, v);
        assert!((v - 0.1).abs() < 1e-8);
    }
}
