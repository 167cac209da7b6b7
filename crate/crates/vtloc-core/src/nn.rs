//! Trainable layers with explicit forward/backward passes.
//!
//! Backprop is hand-written per layer: each forward returns whatever cache
//! its backward needs, backward accumulates into `Param::grad` and returns
//! the input gradient. Every layer carries a finite-difference check in its
//! tests.

use alloc::string::String;
use alloc::vec::Vec;

use crate::mat::{scalar, Mat};
use crate::rng::Rng;

/// Score assigned to masked attention keys; exp() of it underflows to zero
/// so masked content can never leak into the output.
pub const MASKED_SCORE: f32 = -1e9;

/// A trainable array plus its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Param {
    pub value: Mat,
    pub grad: Mat,
}

impl Param {
    pub fn new(value: Mat) -> Self {
        let grad = Mat::zeros(value.rows(), value.cols());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Coarse ownership groups used by freeze policies and checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    FrameEncoder,
    TextEncoder,
    Fusion,
    Pyramid,
    Heads,
}

/// Fixed-order traversal over every parameter of a component.
pub trait VisitParams {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));
}

pub(crate) fn join_name(prefix: &str, name: &str) -> String {
    let mut s = String::with_capacity(prefix.len() + name.len() + 1);
    s.push_str(prefix);
    s.push('.');
    s.push_str(name);
    s
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Linear {
    /// (in_dim, out_dim)
    pub weight: Param,
    /// (1, out_dim)
    pub bias: Param,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let std = scalar::sqrt(2.0 / (in_dim + out_dim) as f32);
        Self {
            weight: Param::new(Mat::randn(in_dim, out_dim, std, rng)),
            bias: Param::new(Mat::zeros(1, out_dim)),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            weight: Param::new(Mat::identity(dim)),
            bias: Param::new(Mat::zeros(1, dim)),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn forward(&self, x: &Mat) -> Mat {
        let mut y = x.matmul(&self.weight.value);
        y.add_row_broadcast(self.bias.value.row(0));
        y
    }

    /// Accumulates weight/bias gradients and returns dL/dx.
    pub fn backward(&mut self, x: &Mat, dy: &Mat) -> Mat {
        self.weight.grad.add_assign(&x.at_b(dy));
        let db = dy.col_sums();
        for (g, d) in self.bias.grad.row_mut(0).iter_mut().zip(db.iter()) {
            *g += d;
        }
        dy.matmul_bt(&self.weight.value)
    }
}

impl VisitParams for Linear {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join_name(prefix, "weight"), &mut self.weight);
        f(&join_name(prefix, "bias"), &mut self.bias);
    }
}

// ---------------------------------------------------------------------------
// LayerNorm
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct LayerNorm {
    /// (1, dim)
    pub gamma: Param,
    /// (1, dim)
    pub beta: Param,
    pub eps: f32,
}

pub struct LayerNormCache {
    xhat: Mat,
    inv_std: Vec<f32>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Param::new(Mat::from_fn(1, dim, |_, _| 1.0)),
            beta: Param::new(Mat::zeros(1, dim)),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Mat) -> (Mat, LayerNormCache) {
        let (n, d) = (x.rows(), x.cols());
        let mut xhat = Mat::zeros(n, d);
        let mut inv_std = Vec::with_capacity(n);
        let mut y = Mat::zeros(n, d);
        let gamma = self.gamma.value.row(0);
        let beta = self.beta.value.row(0);
        for r in 0..n {
            let row = x.row(r);
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let istd = 1.0 / scalar::sqrt(var + self.eps);
            inv_std.push(istd);
            for c in 0..d {
                let xh = (row[c] - mean) * istd;
                xhat.set(r, c, xh);
                y.set(r, c, gamma[c] * xh + beta[c]);
            }
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &LayerNormCache, dy: &Mat) -> Mat {
        let (n, d) = (dy.rows(), dy.cols());
        let mut dx = Mat::zeros(n, d);
        let gamma = self.gamma.value.row(0);
        for r in 0..n {
            let dy_row = dy.row(r);
            let xhat_row = cache.xhat.row(r);
            for c in 0..d {
                self.gamma.grad.row_mut(0)[c] += dy_row[c] * xhat_row[c];
                self.beta.grad.row_mut(0)[c] += dy_row[c];
            }
            let mut mean_dxhat = 0.0f32;
            let mut mean_dxhat_xhat = 0.0f32;
            for c in 0..d {
                let dxh = dy_row[c] * gamma[c];
                mean_dxhat += dxh;
                mean_dxhat_xhat += dxh * xhat_row[c];
            }
            mean_dxhat /= d as f32;
            mean_dxhat_xhat /= d as f32;
            let istd = cache.inv_std[r];
            for c in 0..d {
                let dxh = dy_row[c] * gamma[c];
                dx.set(r, c, istd * (dxh - mean_dxhat - xhat_row[c] * mean_dxhat_xhat));
            }
        }
        dx
    }
}

impl VisitParams for LayerNorm {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join_name(prefix, "gamma"), &mut self.gamma);
        f(&join_name(prefix, "beta"), &mut self.beta);
    }
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

pub fn relu(x: &Mat) -> Mat {
    x.map(|v| v.max(0.0))
}

/// dL/dx given the pre-activation; subgradient 0 at exactly zero.
pub fn relu_backward(pre: &Mat, dy: &Mat) -> Mat {
    let mut dx = dy.clone();
    for (d, &p) in dx.as_mut_slice().iter_mut().zip(pre.as_slice().iter()) {
        if p <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

const INV_SQRT_2: f32 = 0.70710678;
const INV_SQRT_2PI: f32 = 0.39894228;

pub fn gelu(x: &Mat) -> Mat {
    x.map(|v| 0.5 * v * (1.0 + scalar::erf(v * INV_SQRT_2)))
}

pub fn gelu_backward(pre: &Mat, dy: &Mat) -> Mat {
    let mut dx = dy.clone();
    for (d, &x) in dx.as_mut_slice().iter_mut().zip(pre.as_slice().iter()) {
        let cdf = 0.5 * (1.0 + scalar::erf(x * INV_SQRT_2));
        let pdf = INV_SQRT_2PI * scalar::exp(-0.5 * x * x);
        *d *= cdf + x * pdf;
    }
    dx
}

// ---------------------------------------------------------------------------
// Masked softmax over rows
// ---------------------------------------------------------------------------

/// Row softmax where entries with `valid[j] == false` were pre-set to
/// `MASKED_SCORE` and come out exactly zero.
pub fn softmax_rows(scores: &Mat) -> Mat {
    let (n, m) = (scores.rows(), scores.cols());
    let mut probs = Mat::zeros(n, m);
    for r in 0..n {
        let row = scores.row(r);
        let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0f32;
        let out = probs.row_mut(r);
        for c in 0..m {
            let e = scalar::exp(row[c] - max);
            out[c] = e;
            sum += e;
        }
        let inv = 1.0 / sum;
        out.iter_mut().for_each(|p| *p *= inv);
    }
    probs
}

pub fn softmax_rows_backward(probs: &Mat, dprobs: &Mat) -> Mat {
    let (n, m) = (probs.rows(), probs.cols());
    let mut ds = Mat::zeros(n, m);
    for r in 0..n {
        let p = probs.row(r);
        let dp = dprobs.row(r);
        let dot: f32 = p.iter().zip(dp.iter()).map(|(a, b)| a * b).sum();
        let out = ds.row_mut(r);
        for c in 0..m {
            out[c] = p[c] * (dp[c] - dot);
        }
    }
    ds
}

// ---------------------------------------------------------------------------
// Single-head self-attention
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

pub struct AttentionCache {
    q: Mat,
    k: Mat,
    v: Mat,
    probs: Mat,
    ctx: Mat,
    x: Mat,
}

impl Attention {
    pub fn new(dim: usize, rng: &mut Rng) -> Self {
        Self {
            wq: Linear::new(dim, dim, rng),
            wk: Linear::new(dim, dim, rng),
            wv: Linear::new(dim, dim, rng),
            wo: Linear::new(dim, dim, rng),
        }
    }

    /// `key_valid[j] == false` removes token j as a key entirely.
    pub fn forward(&self, x: &Mat, key_valid: &[bool]) -> (Mat, AttentionCache) {
        assert_eq!(x.rows(), key_valid.len());
        let dim = x.cols();
        let scale = 1.0 / scalar::sqrt(dim as f32);
        let q = self.wq.forward(x);
        let k = self.wk.forward(x);
        let v = self.wv.forward(x);
        let mut scores = q.matmul_bt(&k);
        scores.scale(scale);
        for r in 0..scores.rows() {
            let row = scores.row_mut(r);
            for (j, &ok) in key_valid.iter().enumerate() {
                if !ok {
                    row[j] = MASKED_SCORE;
                }
            }
        }
        let probs = softmax_rows(&scores);
        let ctx = probs.matmul(&v);
        let out = self.wo.forward(&ctx);
        (
            out,
            AttentionCache {
                q,
                k,
                v,
                probs,
                ctx,
                x: x.clone(),
            },
        )
    }

    pub fn backward(&mut self, cache: &AttentionCache, dy: &Mat) -> Mat {
        let dim = cache.x.cols();
        let scale = 1.0 / scalar::sqrt(dim as f32);
        let dctx = self.wo.backward(&cache.ctx, dy);
        let dprobs = dctx.matmul_bt(&cache.v);
        let dv = cache.probs.at_b(&dctx);
        let mut dscores = softmax_rows_backward(&cache.probs, &dprobs);
        dscores.scale(scale);
        let dq = dscores.matmul(&cache.k);
        let dk = dscores.at_b(&cache.q);
        let mut dx = self.wq.backward(&cache.x, &dq);
        dx.add_assign(&self.wk.backward(&cache.x, &dk));
        dx.add_assign(&self.wv.backward(&cache.x, &dv));
        dx
    }
}

impl VisitParams for Attention {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.wq.visit_params(&join_name(prefix, "wq"), f);
        self.wk.visit_params(&join_name(prefix, "wk"), f);
        self.wv.visit_params(&join_name(prefix, "wv"), f);
        self.wo.visit_params(&join_name(prefix, "wo"), f);
    }
}

// ---------------------------------------------------------------------------
// Transformer encoder block (pre-norm)
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

pub struct EncoderBlockCache {
    ln1: LayerNormCache,
    attn: AttentionCache,
    ln2: LayerNormCache,
    normed2: Mat,
    h_pre: Mat,
    h_act: Mat,
}

impl EncoderBlock {
    pub fn new(dim: usize, mlp_dim: usize, rng: &mut Rng) -> Self {
        Self {
            ln1: LayerNorm::new(dim),
            attn: Attention::new(dim, rng),
            ln2: LayerNorm::new(dim),
            mlp_in: Linear::new(dim, mlp_dim, rng),
            mlp_out: Linear::new(mlp_dim, dim, rng),
        }
    }

    pub fn forward(&self, x: &Mat, key_valid: &[bool]) -> (Mat, EncoderBlockCache) {
        let (normed1, ln1) = self.ln1.forward(x);
        let (attn_out, attn) = self.attn.forward(&normed1, key_valid);
        let mut x_mid = x.clone();
        x_mid.add_assign(&attn_out);

        let (normed2, ln2) = self.ln2.forward(&x_mid);
        let h_pre = self.mlp_in.forward(&normed2);
        let h_act = gelu(&h_pre);
        let mlp_out = self.mlp_out.forward(&h_act);
        let mut y = x_mid;
        y.add_assign(&mlp_out);

        (
            y,
            EncoderBlockCache {
                ln1,
                attn,
                ln2,
                normed2,
                h_pre,
                h_act,
            },
        )
    }

    pub fn backward(&mut self, cache: &EncoderBlockCache, dy: &Mat) -> Mat {
        // MLP branch.
        let dh_act = self.mlp_out.backward(&cache.h_act, dy);
        let dh_pre = gelu_backward(&cache.h_pre, &dh_act);
        let dnormed2 = self.mlp_in.backward(&cache.normed2, &dh_pre);
        let mut dx_mid = self.ln2.backward(&cache.ln2, &dnormed2);
        dx_mid.add_assign(dy); // residual

        // Attention branch.
        let dnormed1 = self.attn.backward(&cache.attn, &dx_mid);
        let mut dx = self.ln1.backward(&cache.ln1, &dnormed1);
        dx.add_assign(&dx_mid); // residual
        dx
    }
}

impl VisitParams for EncoderBlock {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.ln1.visit_params(&join_name(prefix, "ln1"), f);
        self.attn.visit_params(&join_name(prefix, "attn"), f);
        self.ln2.visit_params(&join_name(prefix, "ln2"), f);
        self.mlp_in.visit_params(&join_name(prefix, "mlp_in"), f);
        self.mlp_out.visit_params(&join_name(prefix, "mlp_out"), f);
    }
}

// ---------------------------------------------------------------------------
// 1D temporal convolution (via im2col)
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Replicate,
}

#[derive(Clone, Debug)]
pub struct Conv1d {
    /// (kernel * in_ch, out_ch)
    pub weight: Param,
    /// (1, out_ch)
    pub bias: Param,
    pub kernel: usize,
    pub stride: usize,
    pub pad: PadMode,
}

pub struct Conv1dCache {
    cols: Mat,
    in_len: usize,
}

impl Conv1d {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: PadMode,
        rng: &mut Rng,
    ) -> Self {
        assert!(kernel % 2 == 1, "odd kernels only");
        let fan = kernel * in_ch;
        let std = scalar::sqrt(2.0 / (fan + out_ch) as f32);
        Self {
            weight: Param::new(Mat::randn(fan, out_ch, std, rng)),
            bias: Param::new(Mat::zeros(1, out_ch)),
            kernel,
            stride,
            pad,
        }
    }

    /// Center tap = identity, other taps zero; stride must be 1 for the
    /// output to equal the input.
    pub fn identity(dim: usize, kernel: usize, stride: usize, pad: PadMode) -> Self {
        assert!(kernel % 2 == 1);
        let half = kernel / 2;
        let mut weight = Mat::zeros(kernel * dim, dim);
        for c in 0..dim {
            weight.set(half * dim + c, c, 1.0);
        }
        Self {
            weight: Param::new(weight),
            bias: Param::new(Mat::zeros(1, dim)),
            kernel,
            stride,
            pad,
        }
    }

    pub fn out_len(&self, in_len: usize) -> usize {
        if self.stride == 1 {
            in_len
        } else {
            in_len / self.stride
        }
    }

    fn im2col(&self, x: &Mat) -> Mat {
        let (n, ch) = (x.rows(), x.cols());
        let n_out = self.out_len(n);
        let half = (self.kernel / 2) as isize;
        let mut cols = Mat::zeros(n_out, self.kernel * ch);
        for i in 0..n_out {
            let center = (i * self.stride) as isize;
            let dst = cols.row_mut(i);
            for j in 0..self.kernel {
                let src = center - half + j as isize;
                let seg = &mut dst[j * ch..(j + 1) * ch];
                match resolve_tap(src, n, self.pad) {
                    Some(s) => seg.copy_from_slice(x.row(s)),
                    None => seg.iter_mut().for_each(|v| *v = 0.0),
                }
            }
        }
        cols
    }

    pub fn forward(&self, x: &Mat) -> (Mat, Conv1dCache) {
        let cols = self.im2col(x);
        let mut y = cols.matmul(&self.weight.value);
        y.add_row_broadcast(self.bias.value.row(0));
        (
            y,
            Conv1dCache {
                cols,
                in_len: x.rows(),
            },
        )
    }

    pub fn backward(&mut self, cache: &Conv1dCache, dy: &Mat) -> Mat {
        let ch = self.weight.value.rows() / self.kernel;
        self.weight.grad.add_assign(&cache.cols.at_b(dy));
        let db = dy.col_sums();
        for (g, d) in self.bias.grad.row_mut(0).iter_mut().zip(db.iter()) {
            *g += d;
        }
        let dcols = dy.matmul_bt(&self.weight.value);
        let mut dx = Mat::zeros(cache.in_len, ch);
        let half = (self.kernel / 2) as isize;
        for i in 0..dcols.rows() {
            let center = (i * self.stride) as isize;
            let src_row = dcols.row(i);
            for j in 0..self.kernel {
                let src = center - half + j as isize;
                if let Some(s) = resolve_tap(src, cache.in_len, self.pad) {
                    let dst = dx.row_mut(s);
                    for (d, &g) in dst.iter_mut().zip(src_row[j * ch..(j + 1) * ch].iter()) {
                        *d += g;
                    }
                }
            }
        }
        dx
    }
}

fn resolve_tap(idx: isize, len: usize, pad: PadMode) -> Option<usize> {
    if idx >= 0 && (idx as usize) < len {
        Some(idx as usize)
    } else {
        match pad {
            PadMode::Zero => None,
            PadMode::Replicate => Some(idx.clamp(0, len as isize - 1) as usize),
        }
    }
}

impl VisitParams for Conv1d {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join_name(prefix, "weight"), &mut self.weight);
        f(&join_name(prefix, "bias"), &mut self.bias);
    }
}

// ---------------------------------------------------------------------------
// Momentum SGD
// ---------------------------------------------------------------------------

/// Classic momentum: v = mu*v + g; p -= lr*v. Velocities align with the
/// fixed parameter visitation order.
pub struct SgdMomentum {
    pub momentum: f32,
    velocities: Vec<Mat>,
}

impl SgdMomentum {
    pub fn new(momentum: f32) -> Self {
        Self {
            momentum,
            velocities: Vec::new(),
        }
    }

    /// Update one parameter by its position in the fixed visitation order.
    /// Frozen entries keep their velocity slot but are not touched.
    pub fn update_param(&mut self, index: usize, param: &mut Param, trainable: bool, lr: f32) {
        if index == self.velocities.len() {
            self.velocities
                .push(Mat::zeros(param.value.rows(), param.value.cols()));
        }
        let slot = &mut self.velocities[index];
        if !trainable {
            return;
        }
        slot.scale(self.momentum);
        slot.add_assign(&param.grad);
        param.value.add_scaled(slot, -lr);
    }

    /// `updates` pairs each parameter with whether it is trainable this step.
    pub fn step(&mut self, updates: &mut [(&mut Param, bool)], lr: f32) {
        for (i, (param, trainable)) in updates.iter_mut().enumerate() {
            self.update_param(i, param, *trainable, lr);
        }
    }
}
