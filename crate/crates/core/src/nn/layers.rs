//! Dense tensor kernels with explicit backward passes.

use ndarray::{Array2, ArrayView2, ArrayViewMut2};
use serde::{Deserialize, Serialize};

/// Channel-major `c × h × w` activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }
}

/// Learnable array with its gradient accumulator. The gradient is scratch
/// space: it is neither serialized nor compared.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    #[serde(skip)]
    pub grad: Vec<f32>,
}

impl PartialEq for Param {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl Param {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        let grad = vec![0.0; data.len()];
        Self { shape, data, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.clear();
        self.grad.resize(self.data.len(), 0.0);
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// 3×3 convolution, stride 1, zero padding 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv3x3 {
    pub cin: usize,
    pub cout: usize,
    pub weight: Param,
    pub bias: Param,
}

fn im2col(x: &Tensor) -> Vec<f32> {
    let (h, w) = (x.h, x.w);
    let hw = h * w;
    let mut cols = vec![0.0f32; x.c * 9 * hw];
    for ci in 0..x.c {
        let src = &x.data[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                    let drow = &mut row[y * w..(y + 1) * w];
                    match kx {
                        0 => drow[1..].copy_from_slice(&srow[..w - 1]),
                        1 => drow.copy_from_slice(srow),
                        _ => drow[..w - 1].copy_from_slice(&srow[1..]),
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f32], c: usize, h: usize, w: usize) -> Tensor {
    let hw = h * w;
    let mut out = Tensor::zeros(c, h, w);
    for ci in 0..c {
        let dst = &mut out.data[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                    let srow = &row[y * w..(y + 1) * w];
                    match kx {
                        0 => drow[..w - 1].iter_mut().zip(&srow[1..]).for_each(|(d, s)| *d += s),
                        1 => drow.iter_mut().zip(srow).for_each(|(d, s)| *d += s),
                        _ => drow[1..].iter_mut().zip(&srow[..w - 1]).for_each(|(d, s)| *d += s),
                    }
                }
            }
        }
    }
    out
}

impl Conv3x3 {
    pub fn new(cin: usize, cout: usize, weight: Vec<f32>) -> Self {
        assert_eq!(weight.len(), cin * cout * 9);
        Self {
            cin,
            cout,
            weight: Param::new(vec![cout, cin, 3, 3], weight),
            bias: Param::new(vec![cout], vec![0.0; cout]),
        }
    }

    /// Returns the output and the im2col buffer needed by `backward`.
    pub fn forward(&self, x: &Tensor) -> (Tensor, Vec<f32>) {
        debug_assert_eq!(x.c, self.cin);
        let hw = x.plane();
        let cols = im2col(x);
        let wv = ArrayView2::from_shape((self.cout, self.cin * 9), &self.weight.data).expect("weight shape");
        let cv = ArrayView2::from_shape((self.cin * 9, hw), &cols).expect("cols shape");
        let mut y = wv.dot(&cv);
        for (mut row, &b) in y.rows_mut().into_iter().zip(&self.bias.data) {
            row += b;
        }
        let (data, _) = y.into_raw_vec_and_offset();
        (
            Tensor {
                c: self.cout,
                h: x.h,
                w: x.w,
                data,
            },
            cols,
        )
    }

    /// Accumulates parameter gradients; returns the input gradient when
    /// `need_input` is set.
    pub fn backward(&mut self, cols: &[f32], dy: &Tensor, need_input: bool) -> Option<Tensor> {
        let hw = dy.plane();
        let k = self.cin * 9;
        let dyv = ArrayView2::from_shape((self.cout, hw), &dy.data).expect("dy shape");
        let cv = ArrayView2::from_shape((k, hw), cols).expect("cols shape");
        let dw = dyv.dot(&cv.t());
        let mut gw = ArrayViewMut2::from_shape((self.cout, k), &mut self.weight.grad).expect("grad shape");
        gw += &dw;
        for (g, row) in self.bias.grad.iter_mut().zip(dyv.rows()) {
            *g += row.sum();
        }
        need_input.then(|| {
            let wv = ArrayView2::from_shape((self.cout, k), &self.weight.data).expect("weight shape");
            let dcols = wv.t().dot(&dyv);
            let dcols = dcols.as_standard_layout();
            col2im(dcols.as_slice().expect("standard layout"), self.cin, dy.h, dy.w)
        })
    }
}

const NORM_EPS: f64 = 1e-5;

/// Batch normalization of convolutional maps, one scale and shift per
/// channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelNorm {
    pub gamma: Param,
    pub beta: Param,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
}

/// Normalized activations and reciprocal deviations kept for the backward
/// pass of [`ChannelNorm::forward_batch`].
pub struct NormCache {
    xhat: Vec<Tensor>,
    inv: Vec<f64>,
}

impl ChannelNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(vec![channels], vec![1.0; channels]),
            beta: Param::new(vec![channels], vec![0.0; channels]),
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum: 0.1,
        }
    }

    /// Inference: normalizes with the running statistics.
    pub fn apply(&self, x: &mut Tensor) {
        let hw = x.plane();
        for (c, ch) in x.data.chunks_exact_mut(hw).enumerate() {
            let inv = 1.0 / (self.var[c] + NORM_EPS).sqrt();
            let (g, b, m) = (self.gamma.data[c] as f64, self.beta.data[c] as f64, self.mean[c]);
            ch.iter_mut().for_each(|v| *v = (g * (*v as f64 - m) * inv + b) as f32);
        }
    }

    /// Training: normalizes every tensor of the batch in place with the batch
    /// statistics of each channel and folds them into the running estimates.
    pub fn forward_batch(&mut self, xs: &mut [Tensor]) -> NormCache {
        let hw = xs[0].plane();
        let count = (xs.len() * hw) as f64;
        let channels = self.mean.len();
        let mut inv = Vec::with_capacity(channels);
        let mut xhat: Vec<Tensor> = xs.iter().map(|x| Tensor::zeros(x.c, x.h, x.w)).collect();
        for c in 0..channels {
            let range = c * hw..(c + 1) * hw;
            let sum: f64 = xs.iter().flat_map(|x| &x.data[range.clone()]).map(|&v| v as f64).sum();
            let mean = sum / count;
            let var = xs
                .iter()
                .flat_map(|x| &x.data[range.clone()])
                .map(|&v| (v as f64 - mean).powi(2))
                .sum::<f64>()
                / count;
            let s = 1.0 / (var + NORM_EPS).sqrt();
            let (g, b) = (self.gamma.data[c] as f64, self.beta.data[c] as f64);
            for (x, xh) in xs.iter_mut().zip(xhat.iter_mut()) {
                for (v, h) in x.data[range.clone()].iter_mut().zip(&mut xh.data[range.clone()]) {
                    let n = (*v as f64 - mean) * s;
                    *h = n as f32;
                    *v = (g * n + b) as f32;
                }
            }
            let unbiased = if count > 1.0 { var * count / (count - 1.0) } else { var };
            self.mean[c] += self.momentum * (mean - self.mean[c]);
            self.var[c] += self.momentum * (unbiased - self.var[c]);
            inv.push(s);
        }
        NormCache { xhat, inv }
    }

    /// Accumulates the scale and shift gradients and turns output gradients
    /// into input gradients in place.
    pub fn backward_batch(&mut self, cache: &NormCache, grads: &mut [Tensor]) {
        let hw = grads[0].plane();
        let count = (grads.len() * hw) as f64;
        for (c, &s) in cache.inv.iter().enumerate() {
            let range = c * hw..(c + 1) * hw;
            let (mut sum_g, mut sum_gx) = (0.0f64, 0.0f64);
            for (g, xh) in grads.iter().zip(&cache.xhat) {
                for (&d, &h) in g.data[range.clone()].iter().zip(&xh.data[range.clone()]) {
                    sum_g += d as f64;
                    sum_gx += d as f64 * h as f64;
                }
            }
            self.gamma.grad[c] += sum_gx as f32;
            self.beta.grad[c] += sum_g as f32;
            let gamma = self.gamma.data[c] as f64;
            let (mean_g, mean_gx) = (sum_g / count, sum_gx / count);
            for (g, xh) in grads.iter_mut().zip(&cache.xhat) {
                for (d, &h) in g.data[range.clone()].iter_mut().zip(&xh.data[range.clone()]) {
                    *d = (gamma * s * (*d as f64 - mean_g - h as f64 * mean_gx)) as f32;
                }
            }
        }
    }
}

pub fn relu_inplace(x: &mut Tensor) {
    x.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes the gradient wherever the (post-ReLU) output was not positive.
pub fn relu_backward(out: &Tensor, grad: &mut Tensor) {
    for (g, &o) in grad.data.iter_mut().zip(&out.data) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2×2 max pooling, stride 2. Returns the pooled tensor and, per output
/// element, the flat input index that won.
pub fn maxpool2(x: &Tensor) -> (Tensor, Vec<u32>) {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.c, oh, ow);
    let mut idx = vec![0u32; x.c * oh * ow];
    for c in 0..x.c {
        let base = c * x.h * x.w;
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = (f32::NEG_INFINITY, 0usize);
                for dy in 0..2 {
                    for dx in 0..2 {
                        let i = base + (2 * y + dy) * x.w + 2 * xx + dx;
                        if x.data[i] > best.0 {
                            best = (x.data[i], i);
                        }
                    }
                }
                let o = c * oh * ow + y * ow + xx;
                out.data[o] = best.0;
                idx[o] = best.1 as u32;
            }
        }
    }
    (out, idx)
}

pub fn maxpool2_backward(grad_out: &Tensor, idx: &[u32], c: usize, h: usize, w: usize) -> Tensor {
    let mut g = Tensor::zeros(c, h, w);
    for (o, &i) in idx.iter().enumerate() {
        g.data[i as usize] += grad_out.data[o];
    }
    g
}

/// 2×2 average pooling, stride 2 (no parameters, no backward needed).
pub fn avgpool2(x: &Tensor) -> Tensor {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.c, oh, ow);
    for c in 0..x.c {
        let base = c * x.h * x.w;
        for y in 0..oh {
            for xx in 0..ow {
                let i = base + 2 * y * x.w + 2 * xx;
                let s = x.data[i] + x.data[i + 1] + x.data[i + x.w] + x.data[i + x.w + 1];
                out.data[c * oh * ow + y * ow + xx] = 0.25 * s;
            }
        }
    }
    out
}

/// Global average pooling to one value per channel.
pub fn gap(x: &Tensor) -> Vec<f32> {
    let hw = x.plane() as f32;
    x.data.chunks_exact(x.plane()).map(|p| p.iter().sum::<f32>() / hw).collect()
}

/// Fully connected layer, `out × in` weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(inputs: usize, outputs: usize, weight: Vec<f32>) -> Self {
        assert_eq!(weight.len(), inputs * outputs);
        Self {
            inputs,
            outputs,
            weight: Param::new(vec![outputs, inputs], weight),
            bias: Param::new(vec![outputs], vec![0.0; outputs]),
        }
    }

    pub fn forward(&self, x: &[f32]) -> Vec<f64> {
        (0..self.outputs)
            .map(|o| {
                let row = &self.weight.data[o * self.inputs..(o + 1) * self.inputs];
                let dot: f64 = row.iter().zip(x).map(|(&w, &v)| w as f64 * v as f64).sum();
                dot + self.bias.data[o] as f64
            })
            .collect()
    }

    /// Accumulates gradients for upstream `dy`; adds the input gradient to `dx`.
    pub fn backward(&mut self, x: &[f32], dy: &[f64], dx: &mut [f64]) {
        for (o, &g) in dy.iter().enumerate() {
            let row = o * self.inputs;
            for i in 0..self.inputs {
                self.weight.grad[row + i] += (g * x[i] as f64) as f32;
                dx[i] += g * self.weight.data[row + i] as f64;
            }
            self.bias.grad[o] += g as f32;
        }
    }

    /// Row `class` of the weight matrix.
    pub fn class_weights(&self, class: usize) -> &[f32] {
        &self.weight.data[class * self.inputs..(class + 1) * self.inputs]
    }
}


/// Batch normalization of pooled features without affine parameters.
/// Training batches use their own statistics and fold them into running
/// estimates, which single samples are normalized with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
}

impl FeatureNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
            momentum: 0.1,
        }
    }

    /// Reciprocal running standard deviations.
    pub fn inv_std(&self) -> Vec<f64> {
        self.var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect()
    }

    pub fn apply(&self, f: &[f32]) -> Vec<f32> {
        f.iter()
            .zip(self.mean.iter().zip(self.inv_std()))
            .map(|(&x, (m, s))| ((x as f64 - m) * s) as f32)
            .collect()
    }

    /// Normalizes rows of `x` in place with batch statistics, updates the
    /// running estimates and returns the per-column reciprocal deviations.
    pub fn forward_batch(&mut self, x: &mut Array2<f64>) -> Vec<f64> {
        let n = x.nrows() as f64;
        let mut inv = Vec::with_capacity(x.ncols());
        for (k, mut col) in x.columns_mut().into_iter().enumerate() {
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let s = 1.0 / (var + NORM_EPS).sqrt();
            col.mapv_inplace(|v| (v - mean) * s);
            let unbiased = if n > 1.0 { var * n / (n - 1.0) } else { var };
            self.mean[k] += self.momentum * (mean - self.mean[k]);
            self.var[k] += self.momentum * (unbiased - self.var[k]);
            inv.push(s);
        }
        inv
    }

    /// Backward of [`forward_batch`](Self::forward_batch) given its output.
    pub fn backward_batch(y: &Array2<f64>, inv: &[f64], grad: &mut Array2<f64>) {
        let n = y.nrows() as f64;
        for ((yc, mut gc), &s) in y.columns().into_iter().zip(grad.columns_mut()).zip(inv) {
            let mean_g = gc.sum() / n;
            let mean_gy = gc.iter().zip(yc.iter()).map(|(g, v)| g * v).sum::<f64>() / n;
            gc.iter_mut()
                .zip(yc.iter())
                .for_each(|(g, v)| *g = s * (*g - mean_g - v * mean_gy));
        }
    }
}
