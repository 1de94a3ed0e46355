//! NHWC double-precision layers with explicit forward caches and backward passes.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub(crate) const KSIZE: usize = 5;
const PAD: usize = KSIZE / 2;
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
/// Upper bound on im2col buffer entries per chunk.
const CHUNK_ELEMS: usize = 1 << 16;

thread_local! {
    static SCRATCH: std::cell::RefCell<[Vec<f64>; 2]> = const { std::cell::RefCell::new([Vec::new(), Vec::new()]) };
}

/// Reusable buffer `slot` with at least `len` elements; contents are stale.
fn take_scratch(slot: usize, len: usize) -> Vec<f64> {
    let mut v = SCRATCH.with(|s| std::mem::take(&mut s.borrow_mut()[slot]));
    if v.len() < len {
        v.resize(len, 0.0);
    }
    v
}

fn give_scratch(slot: usize, v: Vec<f64>) {
    SCRATCH.with(|s| s.borrow_mut()[slot] = v);
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Tensor {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(n: usize, h: usize, w: usize, c: usize) -> Self {
        Self { n, h, w, c, data: vec![0.0; n * h * w * c] }
    }

    pub fn per_sample(&self) -> usize {
        self.h * self.w * self.c
    }
}

/// A trainable tensor and its accumulated gradient. Equality ignores the gradient.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl PartialEq for Param {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name && self.shape == other.shape && self.value == other.value
    }
}

impl Param {
    fn new(name: String, shape: Vec<usize>, value: Vec<f64>) -> Self {
        let grad = vec![0.0; value.len()];
        Self { name, shape, value, grad }
    }

    fn normal(name: String, shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("finite std");
        let value = (0..n).map(|_| dist.sample(rng)).collect();
        Self::new(name, shape, value)
    }

    fn constant(name: String, shape: Vec<usize>, v: f64) -> Self {
        let n = shape.iter().product();
        Self::new(name, shape, vec![v; n])
    }
}

/// 5x5 same-padding convolution; weights are `(out, 5*5*in)` in `(ky, kx, ci)` order.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Conv {
    pub cin: usize,
    pub cout: usize,
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Conv {
    pub fn new(name: &str, cin: usize, cout: usize, bias: bool, gain: f64, rng: &mut impl Rng) -> Self {
        let fan_in = (cin * KSIZE * KSIZE) as f64;
        let weight = Param::normal(format!("{name}.weight"), vec![cout, KSIZE * KSIZE * cin], (gain / fan_in).sqrt(), rng);
        let bias = bias.then(|| Param::constant(format!("{name}.bias"), vec![cout], 0.0));
        Self { cin, cout, weight, bias }
    }

    fn cols_width(&self) -> usize {
        KSIZE * KSIZE * self.cin
    }

    fn chunk(&self, x: &Tensor) -> usize {
        (CHUNK_ELEMS / (x.h * x.w * self.cols_width()).max(1)).max(1)
    }

    fn im2col(&self, x: &Tensor, n0: usize, n1: usize, cols: &mut [f64]) {
        let (h, w, c) = (x.h, x.w, x.c);
        let width = self.cols_width();
        for n in n0..n1 {
            let xs = &x.data[n * x.per_sample()..(n + 1) * x.per_sample()];
            for y in 0..h {
                for xx in 0..w {
                    let row = ((n - n0) * h + y) * w + xx;
                    let dst = &mut cols[row * width..(row + 1) * width];
                    for ky in 0..KSIZE {
                        let sy = (y + ky).checked_sub(PAD).filter(|&v| v < h);
                        for kx in 0..KSIZE {
                            let sx = (xx + kx).checked_sub(PAD).filter(|&v| v < w);
                            let d = &mut dst[(ky * KSIZE + kx) * c..(ky * KSIZE + kx + 1) * c];
                            match (sy, sx) {
                                (Some(sy), Some(sx)) => d.copy_from_slice(&xs[(sy * w + sx) * c..(sy * w + sx + 1) * c]),
                                _ => d.fill(0.0),
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, dcols: &[f64], n0: usize, n1: usize, dx: &mut Tensor) {
        let (h, w, c) = (dx.h, dx.w, dx.c);
        let width = self.cols_width();
        let ps = dx.per_sample();
        for n in n0..n1 {
            let xs = &mut dx.data[n * ps..(n + 1) * ps];
            for y in 0..h {
                for xx in 0..w {
                    let row = ((n - n0) * h + y) * w + xx;
                    let src = &dcols[row * width..(row + 1) * width];
                    for ky in 0..KSIZE {
                        let sy = y + ky;
                        if sy < PAD || sy - PAD >= h {
                            continue;
                        }
                        let sy = sy - PAD;
                        for kx in 0..KSIZE {
                            let sx = xx + kx;
                            if sx < PAD || sx - PAD >= w {
                                continue;
                            }
                            let sx = sx - PAD;
                            let d = &mut xs[(sy * w + sx) * c..(sy * w + sx + 1) * c];
                            for (a, b) in d.iter_mut().zip(&src[(ky * KSIZE + kx) * c..(ky * KSIZE + kx + 1) * c]) {
                                *a += b;
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        debug_assert_eq!(x.c, self.cin);
        let mut out = Tensor::zeros(x.n, x.h, x.w, self.cout);
        let width = self.cols_width();
        let chunk = self.chunk(x);
        let wmat = ArrayView2::from_shape((self.cout, width), &self.weight.value).unwrap();
        let mut cols = take_scratch(0, chunk.min(x.n) * x.h * x.w * width);
        let mut n0 = 0;
        while n0 < x.n {
            let n1 = (n0 + chunk).min(x.n);
            let rows = (n1 - n0) * x.h * x.w;
            self.im2col(x, n0, n1, &mut cols[..rows * width]);
            let cm = ArrayView2::from_shape((rows, width), &cols[..rows * width]).unwrap();
            let start = n0 * x.h * x.w * self.cout;
            let mut om = ArrayViewMut2::from_shape((rows, self.cout), &mut out.data[start..start + rows * self.cout]).unwrap();
            general_mat_mul(1.0, &cm, &wmat.t(), 0.0, &mut om);
            n0 = n1;
        }
        give_scratch(0, cols);
        if let Some(b) = &self.bias {
            for px in out.data.chunks_exact_mut(self.cout) {
                for (v, bb) in px.iter_mut().zip(&b.value) {
                    *v += bb;
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients; returns the input gradient when asked.
    pub fn backward(&mut self, x: &Tensor, dy: &Tensor, need_dx: bool) -> Option<Tensor> {
        let width = self.cols_width();
        let chunk = self.chunk(x);
        let len = chunk.min(x.n) * x.h * x.w * width;
        let mut cols = take_scratch(0, len);
        let mut dcols = if need_dx { take_scratch(1, len) } else { Vec::new() };
        let mut dx = need_dx.then(|| Tensor::zeros(x.n, x.h, x.w, x.c));
        if let Some(b) = &mut self.bias {
            for px in dy.data.chunks_exact(self.cout) {
                for (g, d) in b.grad.iter_mut().zip(px) {
                    *g += d;
                }
            }
        }
        let mut n0 = 0;
        while n0 < x.n {
            let n1 = (n0 + chunk).min(x.n);
            let rows = (n1 - n0) * x.h * x.w;
            self.im2col(x, n0, n1, &mut cols[..rows * width]);
            let cm = ArrayView2::from_shape((rows, width), &cols[..rows * width]).unwrap();
            let start = n0 * x.h * x.w * self.cout;
            let dym = ArrayView2::from_shape((rows, self.cout), &dy.data[start..start + rows * self.cout]).unwrap();
            {
                let mut gw = ArrayViewMut2::from_shape((self.cout, width), &mut self.weight.grad).unwrap();
                general_mat_mul(1.0, &dym.t(), &cm, 1.0, &mut gw);
            }
            if let Some(dx) = dx.as_mut() {
                let wmat = ArrayView2::from_shape((self.cout, width), &self.weight.value).unwrap();
                let mut dcm = ArrayViewMut2::from_shape((rows, width), &mut dcols[..rows * width]).unwrap();
                general_mat_mul(1.0, &dym, &wmat, 0.0, &mut dcm);
                self.col2im(&dcols[..rows * width], n0, n1, dx);
            }
            n0 = n1;
        }
        give_scratch(0, cols);
        if need_dx {
            give_scratch(1, dcols);
        }
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.weight];
        if let Some(b) = &mut self.bias {
            v.push(b);
        }
        v
    }
}

/// Per-channel batch normalization followed by ReLU.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct BnRelu {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

pub(crate) struct BnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    mean: Vec<f64>,
    var: Vec<f64>,
    out: Tensor,
}

impl BnRelu {
    pub fn new(name: &str, c: usize) -> Self {
        Self {
            gamma: Param::constant(format!("{name}.gamma"), vec![c], 1.0),
            beta: Param::constant(format!("{name}.beta"), vec![c], 0.0),
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
        }
    }

    fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    /// Training mode: batch statistics; running statistics are left to `update_running`.
    pub fn forward_train(&self, x: &Tensor) -> (Tensor, BnCache) {
        let c = self.channels();
        let m = (x.data.len() / c) as f64;
        let mut mean = vec![0.0; c];
        for px in x.data.chunks_exact(c) {
            for (a, v) in mean.iter_mut().zip(px) {
                *a += v;
            }
        }
        mean.iter_mut().for_each(|a| *a /= m);
        let mut var = vec![0.0; c];
        for px in x.data.chunks_exact(c) {
            for ((a, v), mu) in var.iter_mut().zip(px).zip(&mean) {
                *a += (v - mu) * (v - mu);
            }
        }
        var.iter_mut().for_each(|a| *a /= m);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; x.data.len()];
        let mut out = Tensor { data: vec![0.0; x.data.len()], ..*x };
        for ((px, xh), o) in x.data.chunks_exact(c).zip(xhat.chunks_exact_mut(c)).zip(out.data.chunks_exact_mut(c)) {
            for ch in 0..c {
                xh[ch] = (px[ch] - mean[ch]) * inv_std[ch];
                o[ch] = (self.gamma.value[ch] * xh[ch] + self.beta.value[ch]).max(0.0);
            }
        }
        let cache = BnCache { xhat, inv_std, mean, var, out: out.clone() };
        (out, cache)
    }

    pub fn update_running(&mut self, cache: &BnCache) {
        for ch in 0..self.channels() {
            self.running_mean[ch] = (1.0 - BN_MOMENTUM) * self.running_mean[ch] + BN_MOMENTUM * cache.mean[ch];
            self.running_var[ch] = (1.0 - BN_MOMENTUM) * self.running_var[ch] + BN_MOMENTUM * cache.var[ch];
        }
    }

    /// Inference mode: running statistics.
    pub fn forward_infer(&self, x: &Tensor) -> Tensor {
        let c = self.channels();
        let scale: Vec<f64> = (0..c).map(|ch| self.gamma.value[ch] / (self.running_var[ch] + BN_EPS).sqrt()).collect();
        let mut out = Tensor { data: vec![0.0; x.data.len()], ..*x };
        for (px, o) in x.data.chunks_exact(c).zip(out.data.chunks_exact_mut(c)) {
            for ch in 0..c {
                o[ch] = ((px[ch] - self.running_mean[ch]) * scale[ch] + self.beta.value[ch]).max(0.0);
            }
        }
        out
    }

    pub fn backward(&mut self, cache: &BnCache, dy: &Tensor) -> Tensor {
        let c = self.channels();
        let m = (dy.data.len() / c) as f64;
        // gradient through ReLU, then through the affine part
        let mut dxhat = vec![0.0; dy.data.len()];
        let mut sum_d = vec![0.0; c];
        let mut sum_dx = vec![0.0; c];
        for (((d, o), xh), dxh) in dy
            .data
            .chunks_exact(c)
            .zip(cache.out.data.chunks_exact(c))
            .zip(cache.xhat.chunks_exact(c))
            .zip(dxhat.chunks_exact_mut(c))
        {
            for ch in 0..c {
                let g = if o[ch] > 0.0 { d[ch] } else { 0.0 };
                self.gamma.grad[ch] += g * xh[ch];
                self.beta.grad[ch] += g;
                dxh[ch] = g * self.gamma.value[ch];
                sum_d[ch] += dxh[ch];
                sum_dx[ch] += dxh[ch] * xh[ch];
            }
        }
        let mut dx = Tensor { data: vec![0.0; dy.data.len()], ..*dy };
        for ((o, dxh), xh) in dx.data.chunks_exact_mut(c).zip(dxhat.chunks_exact(c)).zip(cache.xhat.chunks_exact(c)) {
            for ch in 0..c {
                o[ch] = cache.inv_std[ch] / m * (m * dxh[ch] - sum_d[ch] - xh[ch] * sum_dx[ch]);
            }
        }
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

/// Fully connected layer; weight shape `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Linear {
    pub din: usize,
    pub dout: usize,
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(name: &str, din: usize, dout: usize, gain: f64, rng: &mut impl Rng) -> Self {
        Self {
            din,
            dout,
            weight: Param::normal(format!("{name}.weight"), vec![dout, din], (gain / din as f64).sqrt(), rng),
            bias: Param::constant(format!("{name}.bias"), vec![dout], 0.0),
        }
    }

    /// `x` holds `n` rows of length `din`.
    pub fn forward(&self, x: &[f64], n: usize) -> Vec<f64> {
        let xm = ArrayView2::from_shape((n, self.din), x).unwrap();
        let wm = ArrayView2::from_shape((self.dout, self.din), &self.weight.value).unwrap();
        let mut out = vec![0.0; n * self.dout];
        let mut om = ArrayViewMut2::from_shape((n, self.dout), &mut out).unwrap();
        general_mat_mul(1.0, &xm, &wm.t(), 0.0, &mut om);
        for row in out.chunks_exact_mut(self.dout) {
            for (v, b) in row.iter_mut().zip(&self.bias.value) {
                *v += b;
            }
        }
        out
    }

    pub fn backward(&mut self, x: &[f64], dy: &[f64], n: usize) -> Vec<f64> {
        let xm = ArrayView2::from_shape((n, self.din), x).unwrap();
        let dym = ArrayView2::from_shape((n, self.dout), dy).unwrap();
        {
            let mut gw = ArrayViewMut2::from_shape((self.dout, self.din), &mut self.weight.grad).unwrap();
            general_mat_mul(1.0, &dym.t(), &xm, 1.0, &mut gw);
        }
        for row in dy.chunks_exact(self.dout) {
            for (g, d) in self.bias.grad.iter_mut().zip(row) {
                *g += d;
            }
        }
        let wm = ArrayView2::from_shape((self.dout, self.din), &self.weight.value).unwrap();
        let mut dx = vec![0.0; n * self.din];
        let mut dxm = ArrayViewMut2::from_shape((n, self.din), &mut dx).unwrap();
        general_mat_mul(1.0, &dym, &wm, 0.0, &mut dxm);
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// 2x2 max pooling with floor output size; returns argmax source offsets.
pub(crate) fn maxpool(x: &Tensor) -> (Tensor, Vec<u32>) {
    let (ho, wo) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.n, ho, wo, x.c);
    let mut arg = vec![0u32; out.data.len()];
    let c = x.c;
    for n in 0..x.n {
        let base = n * x.per_sample();
        for y in 0..ho {
            for xx in 0..wo {
                for ch in 0..c {
                    let mut at = base + (2 * y * x.w + 2 * xx) * c + ch;
                    let mut best = x.data[at];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + ((2 * y + dy) * x.w + 2 * xx + dx) * c + ch;
                        if x.data[idx] > best {
                            best = x.data[idx];
                            at = idx;
                        }
                    }
                    let o = ((n * ho + y) * wo + xx) * c + ch;
                    out.data[o] = best;
                    arg[o] = at as u32;
                }
            }
        }
    }
    (out, arg)
}

pub(crate) fn maxpool_backward(dy: &Tensor, arg: &[u32], dx: &mut Tensor) {
    for (d, &a) in dy.data.iter().zip(arg) {
        dx.data[a as usize] += d;
    }
}

/// Nearest-neighbor resize to `h x w`.
pub(crate) fn upsample(x: &Tensor, h: usize, w: usize) -> Tensor {
    let mut out = Tensor::zeros(x.n, h, w, x.c);
    let c = x.c;
    for n in 0..x.n {
        for y in 0..h {
            let sy = y * x.h / h;
            for xx in 0..w {
                let sx = xx * x.w / w;
                let src = n * x.per_sample() + (sy * x.w + sx) * c;
                let dst = ((n * h + y) * w + xx) * c;
                out.data[dst..dst + c].copy_from_slice(&x.data[src..src + c]);
            }
        }
    }
    out
}

pub(crate) fn upsample_backward(dy: &Tensor, h_in: usize, w_in: usize) -> Tensor {
    let mut dx = Tensor::zeros(dy.n, h_in, w_in, dy.c);
    let c = dy.c;
    for n in 0..dy.n {
        for y in 0..dy.h {
            let sy = y * h_in / dy.h;
            for xx in 0..dy.w {
                let sx = xx * w_in / dy.w;
                let src = ((n * dy.h + y) * dy.w + xx) * c;
                let dst = n * dx.per_sample() + (sy * w_in + sx) * c;
                for ch in 0..c {
                    dx.data[dst + ch] += dy.data[src + ch];
                }
            }
        }
    }
    dx
}

/// Channel concatenation `[a | b]` of tensors with equal `n, h, w`.
pub(crate) fn concat(a: &Tensor, b: &Tensor) -> Tensor {
    let c = a.c + b.c;
    let mut out = Tensor::zeros(a.n, a.h, a.w, c);
    for ((o, pa), pb) in out.data.chunks_exact_mut(c).zip(a.data.chunks_exact(a.c)).zip(b.data.chunks_exact(b.c)) {
        o[..a.c].copy_from_slice(pa);
        o[a.c..].copy_from_slice(pb);
    }
    out
}

pub(crate) fn split(d: &Tensor, ca: usize) -> (Tensor, Tensor) {
    let cb = d.c - ca;
    let mut a = Tensor::zeros(d.n, d.h, d.w, ca);
    let mut b = Tensor::zeros(d.n, d.h, d.w, cb);
    for ((p, pa), pb) in d.data.chunks_exact(d.c).zip(a.data.chunks_exact_mut(ca)).zip(b.data.chunks_exact_mut(cb)) {
        pa.copy_from_slice(&p[..ca]);
        pb.copy_from_slice(&p[ca..]);
    }
    (a, b)
}
