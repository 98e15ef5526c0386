//! Small dense-network toolkit with hand-written backward passes.
//!
//! Activations are row-major `n x width` slices. Every layer's backward pass
//! accumulates parameter gradients into a structurally identical gradient
//! value and returns the gradient with respect to its input.

use crate::rng::{self, Rng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: rng::normal_vec(rng, n).into_iter().map(|v| v * std).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Named traversal over every parameter tensor, in a fixed order.
pub trait Params {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));
}

pub fn tensors<P: Params + ?Sized>(p: &P) -> Vec<(String, &Tensor)> {
    let mut out = Vec::new();
    p.visit("", &mut |n, t| out.push((n, t)));
    out
}

pub fn param_count<P: Params + ?Sized>(p: &P) -> usize {
    tensors(p).iter().map(|(_, t)| t.len()).sum()
}

pub fn zeros_like<P: Params + Clone>(p: &P) -> P {
    let mut z = p.clone();
    z.visit_mut("", &mut |_, t| t.data.iter_mut().for_each(|v| *v = 0.0));
    z
}

pub fn flatten<P: Params + ?Sized>(p: &P) -> Vec<f64> {
    let mut out = Vec::new();
    p.visit("", &mut |_, t| out.extend_from_slice(&t.data));
    out
}

/// Overwrites parameters from a flat vector produced by [`flatten`].
pub fn unflatten<P: Params + ?Sized>(p: &mut P, flat: &[f64]) {
    let mut off = 0;
    p.visit_mut("", &mut |_, t| {
        let n = t.data.len();
        t.data.copy_from_slice(&flat[off..off + n]);
        off += n;
    });
    assert_eq!(off, flat.len(), "flat length mismatch");
}

/// `acc += k * other`, tensor by tensor.
pub fn add_scaled<P: Params>(acc: &mut P, other: &P, k: f64) {
    let src = flatten(other);
    let mut off = 0;
    acc.visit_mut("", &mut |_, t| {
        for v in t.data.iter_mut() {
            *v += k * src[off];
            off += 1;
        }
    });
}

pub fn scale<P: Params>(p: &mut P, k: f64) {
    p.visit_mut("", &mut |_, t| t.data.iter_mut().for_each(|v| *v *= k));
}

pub fn sq_norm<P: Params + ?Sized>(p: &P) -> f64 {
    flatten(p).iter().map(|v| v * v).sum()
}

/// Rounds every parameter to the nearest `f32`, so that 32-bit storage is
/// lossless.
pub fn round_to_f32<P: Params + ?Sized>(p: &mut P) {
    p.visit_mut("", &mut |_, t| {
        t.data.iter_mut().for_each(|v| *v = *v as f32 as f64)
    });
}

/// SHA-256 over names, shapes and little-endian values.
pub fn checksum<P: Params + ?Sized>(p: &P) -> String {
    let mut h = Sha256::new();
    p.visit("", &mut |n, t| {
        h.update(n.as_bytes());
        for d in &t.shape {
            h.update((*d as u64).to_le_bytes());
        }
        for v in &t.data {
            h.update(v.to_le_bytes());
        }
    });
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn is_finite<P: Params + ?Sized>(p: &P) -> bool {
    flatten(p).iter().all(|v| v.is_finite())
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

// ---------------------------------------------------------------------------
// Dense kernels. Each output row depends only on the matching input row and
// accumulates in a fixed order, so results are bitwise independent of how
// many rows are processed together.

/// `y[n x m] = x[n x k] * w[k x m]`.
pub fn matmul(x: &[f64], w: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut y = vec![0.0; n * m];
    for i in 0..n {
        let yr = &mut y[i * m..(i + 1) * m];
        for p in 0..k {
            let a = x[i * k + p];
            let wr = &w[p * m..(p + 1) * m];
            for (yv, wv) in yr.iter_mut().zip(wr) {
                *yv += a * wv;
            }
        }
    }
    y
}

/// `dx[n x k] = dy[n x m] * w^T`.
pub fn matmul_bt(dy: &[f64], w: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut dx = vec![0.0; n * k];
    for i in 0..n {
        let dr = &dy[i * m..(i + 1) * m];
        for p in 0..k {
            let wr = &w[p * m..(p + 1) * m];
            dx[i * k + p] = dr.iter().zip(wr).map(|(a, b)| a * b).sum();
        }
    }
    dx
}

/// `dw[k x m] += x^T * dy`.
pub fn matmul_at_acc(x: &[f64], dy: &[f64], dw: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let dr = &dy[i * m..(i + 1) * m];
        for p in 0..k {
            let a = x[i * k + p];
            let wr = &mut dw[p * m..(p + 1) * m];
            for (wv, dv) in wr.iter_mut().zip(dr) {
                *wv += a * dv;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `[in, out]`.
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    /// Xavier-normal weights, zero bias.
    pub fn new(d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        let std = (2.0 / (d_in + d_out) as f64).sqrt();
        Self::with_std(d_in, d_out, std, rng)
    }

    pub fn with_std(d_in: usize, d_out: usize, std: f64, rng: &mut Rng) -> Self {
        Self {
            w: Tensor::randn(&[d_in, d_out], std, rng),
            b: Tensor::zeros(&[d_out]),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w.shape[0]
    }

    pub fn d_out(&self) -> usize {
        self.w.shape[1]
    }

    pub fn forward(&self, x: &[f64], n: usize) -> Vec<f64> {
        let (k, m) = (self.d_in(), self.d_out());
        debug_assert_eq!(x.len(), n * k);
        let mut y = matmul(x, &self.w.data, n, k, m);
        for row in y.chunks_exact_mut(m) {
            for (v, b) in row.iter_mut().zip(&self.b.data) {
                *v += b;
            }
        }
        y
    }

    pub fn backward(&self, x: &[f64], dy: &[f64], n: usize, grad: &mut Linear) -> Vec<f64> {
        let (k, m) = (self.d_in(), self.d_out());
        matmul_at_acc(x, dy, &mut grad.w.data, n, k, m);
        for row in dy.chunks_exact(m) {
            for (g, d) in grad.b.data.iter_mut().zip(row) {
                *g += d;
            }
        }
        matmul_bt(dy, &self.w.data, n, k, m)
    }
}

impl Params for Linear {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "w"), &self.w);
        f(join(prefix, "b"), &self.b);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "w"), &mut self.w);
        f(join(prefix, "b"), &mut self.b);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Layer normalisation over the last dimension with learned gain and bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
}

pub struct LayerNormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        Self {
            gain: Tensor {
                shape: vec![d],
                data: vec![1.0; d],
            },
            bias: Tensor::zeros(&[d]),
        }
    }

    pub fn forward(&self, x: &[f64], n: usize) -> (Vec<f64>, LayerNormCache) {
        let d = self.gain.len();
        let mut y = vec![0.0; n * d];
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        for i in 0..n {
            let row = &x[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[i * d + j] = h;
                y[i * d + j] = h * self.gain.data[j] + self.bias.data[j];
            }
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: &[f64], n: usize, grad: &mut LayerNorm) -> Vec<f64> {
        let d = self.gain.len();
        let mut dx = vec![0.0; n * d];
        for i in 0..n {
            let xh = &cache.xhat[i * d..(i + 1) * d];
            let g = &dy[i * d..(i + 1) * d];
            let mut sum_dh = 0.0;
            let mut sum_dh_xh = 0.0;
            for j in 0..d {
                grad.gain.data[j] += g[j] * xh[j];
                grad.bias.data[j] += g[j];
                let dh = g[j] * self.gain.data[j];
                sum_dh += dh;
                sum_dh_xh += dh * xh[j];
            }
            let is = cache.inv_std[i];
            for j in 0..d {
                let dh = g[j] * self.gain.data[j];
                dx[i * d + j] = is * (dh - sum_dh / d as f64 - xh[j] * sum_dh_xh / d as f64);
            }
        }
        dx
    }
}

impl Params for LayerNorm {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "gain"), &self.gain);
        f(join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "gain"), &mut self.gain);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Three-layer perceptron `Linear -> GELU -> Linear -> GELU -> Linear`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

pub struct MlpCache {
    n: usize,
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl Mlp {
    pub fn new(d_in: usize, hidden: usize, d_out: usize, rng: &mut Rng) -> Self {
        Self {
            layers: vec![
                Linear::new(d_in, hidden, rng),
                Linear::new(hidden, hidden, rng),
                Linear::new(hidden, d_out, rng),
            ],
        }
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().unwrap().d_out()
    }

    pub fn forward(&self, x: &[f64], n: usize) -> (Vec<f64>, MlpCache) {
        let mut cache = MlpCache {
            n,
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h, n);
            cache.inputs.push(h);
            if i < last {
                h = z.iter().map(|&v| gelu(v)).collect();
                cache.pre.push(z);
            } else {
                h = z;
            }
        }
        (h, cache)
    }

    pub fn backward(&self, cache: &MlpCache, dy: &[f64], grad: &mut Mlp) -> Vec<f64> {
        let mut g = dy.to_vec();
        for i in (0..self.layers.len()).rev() {
            if i < self.layers.len() - 1 {
                for (gv, z) in g.iter_mut().zip(&cache.pre[i]) {
                    *gv *= gelu_grad(*z);
                }
            }
            g = self.layers[i].backward(&cache.inputs[i], &g, cache.n, &mut grad.layers[i]);
        }
        g
    }
}

impl Params for Mlp {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("l{i}")), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("l{i}")), f);
        }
    }
}

/// Sinusoidal embedding of a scalar time in `[0, 1]`.
pub fn time_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for j in 0..half {
        let freq = (-(j as f64) / half as f64 * 10000f64.ln()).exp();
        out.push((1000.0 * t * freq).sin());
    }
    for j in 0..half {
        let freq = (-(j as f64) / half as f64 * 10000f64.ln()).exp();
        out.push((1000.0 * t * freq).cos());
    }
    out
}

/// Adam with bias correction. Moments live in structures shaped like the
/// parameters and, like the parameters, are kept `f32`-representable.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<P> {
    pub m: P,
    pub v: P,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<P: Params + Clone> Adam<P> {
    pub fn new(like: &P) -> Self {
        Self {
            m: zeros_like(like),
            v: zeros_like(like),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update. Gradients are clipped to `clip_norm` in global L2 norm
    /// when `clip_norm > 0`.
    pub fn update(&mut self, params: &mut P, grads: &P, lr: f64, clip_norm: f64) {
        self.step += 1;
        let mut g = flatten(grads);
        if clip_norm > 0.0 {
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > clip_norm {
                let k = clip_norm / norm;
                g.iter_mut().for_each(|v| *v *= k);
            }
        }
        let mut m = flatten(&self.m);
        let mut v = flatten(&self.v);
        let mut p = flatten(params);
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..p.len() {
            m[i] = (self.beta1 * m[i] + (1.0 - self.beta1) * g[i]) as f32 as f64;
            v[i] = (self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i]) as f32 as f64;
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            p[i] = (p[i] - lr * mh / (vh.sqrt() + self.eps)) as f32 as f64;
        }
        unflatten(&mut self.m, &m);
        unflatten(&mut self.v, &v);
        unflatten(params, &p);
    }
}
