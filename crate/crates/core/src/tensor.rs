//! Dense tensors, masked-binary parameter planes, and a record/replay tape
//! that differentiates losses with respect to pruning scores and batch-norm
//! affine parameters.
//!
//! Weights never receive gradients. The only trainable quantities are the
//! per-weight scores (through the straight-through relaxation of the mask)
//! and, where enabled, batch-norm gamma/beta. All reductions run in a fixed
//! order and parallel loops assign each output element to exactly one task,
//! so results are bitwise reproducible regardless of thread count.

use std::sync::Arc;

use rayon::prelude::*;

use crate::estimators::{spline_grad, SplineParam};
use crate::{Error, Result};

/// sgn with sgn(0) = +1. The packed formats and the score gradient both
/// assume this convention; keep every sign extraction in the crate on it.
#[inline]
pub fn sign_pm1(x: f32) -> f32 {
    if x < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Row-major dense f32 tensor. Rank 0 with one element is a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                context: "tensor construction",
                expected: shape,
                actual: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a single-element tensor. Panics on anything else; calling
    /// this on a non-scalar is a programming error, not a data error.
    pub fn item(&self) -> f32 {
        assert_eq!(
            self.data.len(),
            1,
            "item() called on tensor with {} elements",
            self.data.len()
        );
        self.data[0]
    }

    /// Per-row argmax of a rank-2 tensor. Ties resolve to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        assert_eq!(self.shape.len(), 2, "argmax_rows needs a rank-2 tensor");
        let cols = self.shape[1];
        self.data
            .chunks_exact(cols)
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }
}

fn rank2(x: &Tensor, context: &'static str) -> Result<(usize, usize)> {
    match *x.shape() {
        [a, b] => Ok((a, b)),
        _ => Err(Error::ShapeMismatch {
            context,
            expected: vec![2],
            actual: x.shape().to_vec(),
        }),
    }
}

fn rank4(x: &Tensor, context: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [a, b, c, d] => Ok((a, b, c, d)),
        _ => Err(Error::ShapeMismatch {
            context,
            expected: vec![4],
            actual: x.shape().to_vec(),
        }),
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(a: f32, x: &[f32], y: &mut [f32]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Geometry of a 2d convolution. Weights are laid out `[out_c, in_c, k_h,
/// k_w]` row-major, so one output channel's filter flattens to a row of
/// length [`Conv2dGeom::patch_len`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dGeom {
    pub fn validate(&self) -> Result<()> {
        if self.in_c == 0 || self.out_c == 0 || self.k_h == 0 || self.k_w == 0 {
            return Err(Error::invalid("conv geometry", "zero-sized channel or kernel"));
        }
        if self.stride == 0 {
            return Err(Error::invalid("conv geometry", "stride must be >= 1"));
        }
        if self.in_h + 2 * self.pad < self.k_h || self.in_w + 2 * self.pad < self.k_w {
            return Err(Error::invalid(
                "conv geometry",
                format!(
                    "kernel {}x{} exceeds padded input {}x{}",
                    self.k_h,
                    self.k_w,
                    self.in_h + 2 * self.pad,
                    self.in_w + 2 * self.pad
                ),
            ));
        }
        Ok(())
    }

    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.k_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.k_w) / self.stride + 1
    }

    /// Elements in one flattened receptive-field patch: `in_c * k_h * k_w`.
    pub fn patch_len(&self) -> usize {
        self.in_c * self.k_h * self.k_w
    }

    pub fn in_len(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    pub fn out_len(&self) -> usize {
        self.out_c * self.out_h() * self.out_w()
    }
}

/// Gathers one item's receptive fields into `col`, laid out as
/// `[patch_len, out_h * out_w]`. Padding positions stay zero.
fn im2col(xb: &[f32], g: &Conv2dGeom, col: &mut [f32]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let opix = oh * ow;
    col.fill(0.0);
    let mut k = 0;
    for c in 0..g.in_c {
        let plane = &xb[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for kh in 0..g.k_h {
            for kw in 0..g.k_w {
                let dst = &mut col[k * opix..(k + 1) * opix];
                for oy in 0..oh {
                    let iy = (oy * g.stride + kh) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let src_row = iy as usize * g.in_w;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kw) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        dst[oy * ow + ox] = plane[src_row + ix as usize];
                    }
                }
                k += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds column gradients back onto the
/// input plane gradient.
fn col2im(dcol: &[f32], g: &Conv2dGeom, dxb: &mut [f32]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let opix = oh * ow;
    let mut k = 0;
    for c in 0..g.in_c {
        let plane_off = c * g.in_h * g.in_w;
        for kh in 0..g.k_h {
            for kw in 0..g.k_w {
                let src = &dcol[k * opix..(k + 1) * opix];
                for oy in 0..oh {
                    let iy = (oy * g.stride + kh) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst_row = plane_off + iy as usize * g.in_w;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kw) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        dxb[dst_row + ix as usize] += src[oy * ow + ox];
                    }
                }
                k += 1;
            }
        }
    }
}

/// y = x W^T for x `[batch, in_dim]` and row-major w `[out_dim, in_dim]`.
pub fn linear(x: &Tensor, w: &[f32], out_dim: usize) -> Result<Tensor> {
    let (batch, in_dim) = rank2(x, "linear input rank")?;
    if w.len() != out_dim * in_dim {
        return Err(Error::ShapeMismatch {
            context: "linear weights",
            expected: vec![out_dim, in_dim],
            actual: vec![w.len()],
        });
    }
    let mut out = vec![0.0; batch * out_dim];
    out.par_chunks_mut(out_dim)
        .zip(x.data().par_chunks(in_dim))
        .for_each(|(yrow, xrow)| {
            for (q, y) in yrow.iter_mut().enumerate() {
                *y = dot(xrow, &w[q * in_dim..(q + 1) * in_dim]);
            }
        });
    Tensor::new(vec![batch, out_dim], out)
}

/// 2d cross-correlation of x `[batch, in_c, in_h, in_w]` with w laid out
/// per [`Conv2dGeom`]. Zero padding.
pub fn conv2d(x: &Tensor, w: &[f32], g: &Conv2dGeom) -> Result<Tensor> {
    g.validate()?;
    let (batch, c, h, wd) = rank4(x, "conv input rank")?;
    if (c, h, wd) != (g.in_c, g.in_h, g.in_w) {
        return Err(Error::ShapeMismatch {
            context: "conv input",
            expected: vec![batch, g.in_c, g.in_h, g.in_w],
            actual: x.shape().to_vec(),
        });
    }
    let k = g.patch_len();
    if w.len() != g.out_c * k {
        return Err(Error::ShapeMismatch {
            context: "conv weights",
            expected: vec![g.out_c, k],
            actual: vec![w.len()],
        });
    }
    let (oh, ow) = (g.out_h(), g.out_w());
    let opix = oh * ow;
    let mut out = vec![0.0; batch * g.out_c * opix];
    out.par_chunks_mut(g.out_c * opix)
        .zip(x.data().par_chunks(g.in_len()))
        .for_each(|(yb, xb)| {
            let mut col = vec![0.0; k * opix];
            im2col(xb, g, &mut col);
            for o in 0..g.out_c {
                let yrow = &mut yb[o * opix..(o + 1) * opix];
                for kk in 0..k {
                    let a = w[o * k + kk];
                    // Masked planes are mostly zero; skipping them here is
                    // the main win of the axpy formulation.
                    if a != 0.0 {
                        axpy(a, &col[kk * opix..(kk + 1) * opix], yrow);
                    }
                }
            }
        });
    Tensor::new(vec![batch, g.out_c, oh, ow], out)
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor {
        shape: x.shape().to_vec(),
        data,
    }
}

/// Elementwise sgn with sgn(0) = +1. The forward pass of the binary
/// activation; its surrogate gradient lives in the tape op.
pub fn hard_sign(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| sign_pm1(v)).collect();
    Tensor {
        shape: x.shape().to_vec(),
        data,
    }
}

pub(crate) fn max_pool2d_with_argmax(
    x: &Tensor,
    k: usize,
    stride: usize,
) -> Result<(Tensor, Vec<usize>)> {
    let (batch, c, h, w) = rank4(x, "max pool input rank")?;
    if k == 0 || stride == 0 {
        return Err(Error::invalid("max pool", "kernel and stride must be >= 1"));
    }
    if h < k || w < k {
        return Err(Error::invalid(
            "max pool",
            format!("window {k} exceeds input {h}x{w}"),
        ));
    }
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let opix = oh * ow;
    let planes = batch * c;
    let mut out = vec![0.0; planes * opix];
    let mut argmax = vec![0usize; planes * opix];
    let xdata = x.data();
    out.par_chunks_mut(opix)
        .zip(argmax.par_chunks_mut(opix))
        .enumerate()
        .for_each(|(p, (orow, arow))| {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_idx = base + oy * stride * w + ox * stride;
                    let mut best = xdata[best_idx];
                    for ky in 0..k {
                        for kx in 0..k {
                            let idx = base + (oy * stride + ky) * w + (ox * stride + kx);
                            // Strict comparison keeps the first maximum on
                            // ties, matching the row-major scan order.
                            if xdata[idx] > best {
                                best = xdata[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    orow[oy * ow + ox] = best;
                    arow[oy * ow + ox] = best_idx;
                }
            }
        });
    Ok((Tensor::new(vec![batch, c, oh, ow], out)?, argmax))
}

pub fn max_pool2d(x: &Tensor, k: usize, stride: usize) -> Result<Tensor> {
    Ok(max_pool2d_with_argmax(x, k, stride)?.0)
}

/// Collapses each `[h, w]` plane to its mean: `[b, c, h, w]` to `[b, c]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (batch, c, h, w) = rank4(x, "avg pool input rank")?;
    let plane = h * w;
    let mut out = vec![0.0; batch * c];
    out.par_iter_mut().enumerate().for_each(|(p, y)| {
        let s: f64 = x.data()[p * plane..(p + 1) * plane]
            .iter()
            .map(|&v| v as f64)
            .sum();
        *y = (s / plane as f64) as f32;
    });
    Tensor::new(vec![batch, c], out)
}

/// Channel count and plane layout for batch norm: `(outer, channels,
/// inner)` with element index `(o * channels + c) * inner + i`.
pub(crate) fn bn_layout(shape: &[usize], context: &'static str) -> Result<(usize, usize, usize)> {
    match *shape {
        [b, c] => Ok((b, c, 1)),
        [b, c, h, w] => Ok((b, c, h * w)),
        _ => Err(Error::ShapeMismatch {
            context,
            expected: vec![2],
            actual: shape.to_vec(),
        }),
    }
}

/// Inference-mode batch norm using stored running statistics.
pub fn batch_norm_eval(
    x: &Tensor,
    gamma: &[f32],
    beta: &[f32],
    running_mean: &[f32],
    running_var: &[f32],
    eps: f32,
) -> Result<Tensor> {
    let (_, c, inner) = bn_layout(x.shape(), "batch norm input rank")?;
    for (name, s) in [
        ("gamma", gamma.len()),
        ("beta", beta.len()),
        ("running_mean", running_mean.len()),
        ("running_var", running_var.len()),
    ] {
        if s != c {
            return Err(Error::invalid(
                "batch norm",
                format!("{name} has {s} entries for {c} channels"),
            ));
        }
    }
    let scale: Vec<f32> = (0..c)
        .map(|i| gamma[i] / (running_var[i] + eps).sqrt())
        .collect();
    let shift: Vec<f32> = (0..c).map(|i| beta[i] - running_mean[i] * scale[i]).collect();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(idx, &v)| {
            let ch = (idx / inner) % c;
            v * scale[ch] + shift[ch]
        })
        .collect();
    Ok(Tensor {
        shape: x.shape().to_vec(),
        data,
    })
}

/// Frozen binary weight plane with its trainable mask and shared gain.
///
/// `effective = alpha * mask * signs` is kept materialized; the forward
/// kernels only ever see that plane. Signs are fixed at construction and
/// never change afterwards, mask and gain change together through
/// [`MaskedParams::set_mask`].
#[derive(Debug, Clone)]
pub struct MaskedParams {
    rows: usize,
    cols: usize,
    alpha: f32,
    signs: Arc<Vec<f32>>,
    mask: Arc<Vec<f32>>,
    effective: Arc<Vec<f32>>,
}

impl MaskedParams {
    /// Full-mask plane derived from real weights: signs = sgn(w), mask all
    /// ones, gain = mean |w|.
    pub fn from_weights(weights: &[f32], rows: usize, cols: usize) -> Result<Self> {
        check_plane("weights", weights, rows, cols)?;
        if weights.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("weights", "non-finite weight"));
        }
        let signs: Vec<f32> = weights.iter().map(|&w| sign_pm1(w)).collect();
        let mask = vec![1.0; weights.len()];
        let alpha = gain(weights, &mask);
        let effective = signs.iter().map(|s| alpha * s).collect();
        Ok(MaskedParams {
            rows,
            cols,
            alpha,
            signs: Arc::new(signs),
            mask: Arc::new(mask),
            effective: Arc::new(effective),
        })
    }

    /// Plane from explicit parts. Signs must be exactly +-1, the mask
    /// exactly 0/1; the gain is taken as given rather than recomputed,
    /// which is what the constructive existence proofs need.
    pub fn from_parts(
        signs: Vec<f32>,
        mask: Vec<f32>,
        alpha: f32,
        rows: usize,
        cols: usize,
    ) -> Result<Self> {
        check_plane("signs", &signs, rows, cols)?;
        check_plane("mask", &mask, rows, cols)?;
        if signs.iter().any(|&s| s != 1.0 && s != -1.0) {
            return Err(Error::invalid("signs", "entries must be exactly +1 or -1"));
        }
        if mask.iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::invalid("mask", "entries must be exactly 0 or 1"));
        }
        if !alpha.is_finite() {
            return Err(Error::invalid("alpha", "gain must be finite"));
        }
        let effective = signs
            .iter()
            .zip(&mask)
            .map(|(s, m)| alpha * s * m)
            .collect();
        Ok(MaskedParams {
            rows,
            cols,
            alpha,
            signs: Arc::new(signs),
            mask: Arc::new(mask),
            effective: Arc::new(effective),
        })
    }

    /// Installs a new mask and recomputes the gain from the surviving
    /// weights: alpha = sum of |w| over kept entries / kept count, or 0
    /// when everything is pruned.
    pub fn set_mask(&mut self, mask: Vec<f32>, weights: &[f32]) -> Result<()> {
        check_plane("mask", &mask, self.rows, self.cols)?;
        check_plane("weights", weights, self.rows, self.cols)?;
        if mask.iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::invalid("mask", "entries must be exactly 0 or 1"));
        }
        self.alpha = gain(weights, &mask);
        let effective = self
            .signs
            .iter()
            .zip(&mask)
            .map(|(s, m)| self.alpha * s * m)
            .collect();
        self.mask = Arc::new(mask);
        self.effective = Arc::new(effective);
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn alpha(&self) -> f32 {
        self.alpha
    }

    pub fn signs(&self) -> &[f32] {
        &self.signs
    }

    pub fn mask(&self) -> &[f32] {
        &self.mask
    }

    /// The plane the forward pass multiplies by: `alpha * mask * signs`.
    pub fn effective(&self) -> &[f32] {
        &self.effective
    }

    /// Number of unpruned entries.
    pub fn surviving(&self) -> usize {
        self.mask.iter().filter(|&&m| m != 0.0).count()
    }
}

fn check_plane(name: &'static str, data: &[f32], rows: usize, cols: usize) -> Result<()> {
    if rows == 0 || cols == 0 {
        return Err(Error::invalid(name, "plane dimensions must be nonzero"));
    }
    if data.len() != rows * cols {
        return Err(Error::ShapeMismatch {
            context: "parameter plane",
            expected: vec![rows, cols],
            actual: vec![data.len()],
        });
    }
    Ok(())
}

/// Mean |w| over mask-kept entries, 0 for an empty mask.
fn gain(weights: &[f32], mask: &[f32]) -> f32 {
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for (&w, &m) in weights.iter().zip(mask) {
        if m != 0.0 {
            num += w.abs() as f64;
            den += 1.0;
        }
    }
    if den == 0.0 {
        0.0
    } else {
        (num / den) as f32
    }
}

fn ensure_finite(data: &[f32], layer: usize, what: &str) -> Result<()> {
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericFailure {
            layer,
            message: format!("{what} contains non-finite values"),
        });
    }
    Ok(())
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

struct Node {
    value: Tensor,
    op: Op,
}

enum Op {
    Leaf,
    MaskedLinear {
        x: NodeId,
        params: MaskedParams,
        slot: usize,
    },
    MaskedConv2d {
        x: NodeId,
        params: MaskedParams,
        geom: Conv2dGeom,
        slot: usize,
    },
    Relu {
        x: NodeId,
    },
    SignAct {
        x: NodeId,
        t: SplineParam,
    },
    BatchNorm {
        x: NodeId,
        gamma: Vec<f32>,
        inv_std: Vec<f32>,
        /// Normalized activations, present only in training mode.
        xhat: Option<Vec<f32>>,
        slot: usize,
    },
    MaxPool2d {
        x: NodeId,
        /// Flat index into the input buffer of each window's maximum.
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        x: NodeId,
    },
    Reshape {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sum {
        x: NodeId,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        probs: Vec<f32>,
        labels: Vec<usize>,
    },
}

/// Unbiased batch statistics produced by a training-mode batch norm, for
/// the caller to fold into its running estimates.
#[derive(Debug, Clone)]
pub struct BnBatchStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

/// Gradients for one batch-norm site.
#[derive(Debug, Clone)]
pub struct BnGrad {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

/// Result of [`Tape::backward`], keyed by the slot ids the caller chose
/// when recording. A slot the loss never reached stays `None`.
#[derive(Debug, Default)]
pub struct Gradients {
    score: Vec<Option<Vec<f32>>>,
    bn: Vec<Option<BnGrad>>,
    leaf: Vec<(NodeId, Vec<f32>)>,
}

impl Gradients {
    /// Loss gradient with respect to the relaxed mask of a score slot,
    /// laid out like the parameter plane.
    pub fn score(&self, slot: usize) -> Option<&[f32]> {
        self.score.get(slot)?.as_deref()
    }

    pub fn bn(&self, slot: usize) -> Option<&BnGrad> {
        self.bn.get(slot)?.as_ref()
    }

    /// Loss gradient with respect to a leaf's value. Diagnostic only; the
    /// search itself never differentiates inputs.
    pub fn leaf(&self, id: NodeId) -> Option<&[f32]> {
        self.leaf
            .iter()
            .find(|(n, _)| *n == id)
            .map(|(_, g)| g.as_slice())
    }

    fn score_entry(&mut self, slot: usize, len: usize) -> &mut [f32] {
        if self.score.len() <= slot {
            self.score.resize(slot + 1, None);
        }
        let entry = self.score[slot].get_or_insert_with(|| vec![0.0; len]);
        assert_eq!(entry.len(), len, "score slot {slot} recorded with two sizes");
        entry
    }

    fn bn_entry(&mut self, slot: usize, channels: usize) -> &mut BnGrad {
        if self.bn.len() <= slot {
            self.bn.resize(slot + 1, None);
        }
        let entry = self.bn[slot].get_or_insert_with(|| BnGrad {
            gamma: vec![0.0; channels],
            beta: vec![0.0; channels],
        });
        assert_eq!(
            entry.gamma.len(),
            channels,
            "batch norm slot {slot} recorded with two sizes"
        );
        entry
    }
}

fn accum(slot: &mut Option<Vec<f32>>, contrib: Vec<f32>) {
    match slot {
        Some(acc) => {
            debug_assert_eq!(acc.len(), contrib.len());
            for (a, c) in acc.iter_mut().zip(&contrib) {
                *a += c;
            }
        }
        None => *slot = Some(contrib),
    }
}

/// Record/replay autodiff tape. Forward runs eagerly while recording;
/// [`Tape::backward`] replays in reverse once, after which the tape is
/// spent.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    spent: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Linear layer through the effective plane of `params`. `slot` keys
    /// the score gradient in the backward result; it doubles as the layer
    /// index in numeric-failure reports.
    pub fn masked_linear(&mut self, x: NodeId, params: &MaskedParams, slot: usize) -> Result<NodeId> {
        let (_, in_dim) = rank2(self.value(x), "masked linear input rank")?;
        if in_dim != params.cols() {
            return Err(Error::ShapeMismatch {
                context: "masked linear input",
                expected: vec![params.rows(), params.cols()],
                actual: self.value(x).shape().to_vec(),
            });
        }
        let y = linear(self.value(x), params.effective(), params.rows())?;
        ensure_finite(y.data(), slot, "masked linear output")?;
        Ok(self.push(
            y,
            Op::MaskedLinear {
                x,
                params: params.clone(),
                slot,
            },
        ))
    }

    /// Convolution through the effective plane of `params`, whose rows must
    /// be `geom.out_c` and cols `geom.patch_len()`.
    pub fn masked_conv2d(
        &mut self,
        x: NodeId,
        params: &MaskedParams,
        geom: &Conv2dGeom,
        slot: usize,
    ) -> Result<NodeId> {
        if params.rows() != geom.out_c || params.cols() != geom.patch_len() {
            return Err(Error::ShapeMismatch {
                context: "masked conv plane",
                expected: vec![geom.out_c, geom.patch_len()],
                actual: vec![params.rows(), params.cols()],
            });
        }
        let y = conv2d(self.value(x), params.effective(), geom)?;
        ensure_finite(y.data(), slot, "masked conv output")?;
        Ok(self.push(
            y,
            Op::MaskedConv2d {
                x,
                params: params.clone(),
                geom: *geom,
                slot,
            },
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = relu(self.value(x));
        self.push(y, Op::Relu { x })
    }

    /// Binary activation: exact sgn forward, quadratic-spline surrogate
    /// backward.
    pub fn sign_act(&mut self, x: NodeId, t: SplineParam) -> NodeId {
        let y = hard_sign(self.value(x));
        self.push(y, Op::SignAct { x, t })
    }

    /// Batch norm. With `running` absent this is training mode: batch
    /// statistics normalize, gradients flow to gamma/beta under `slot`,
    /// and the returned stats (unbiased variance) are for the caller's
    /// running-average update. With `running = (mean, var)` present this
    /// is inference mode recorded on tape; only the input gradient flows.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: &[f32],
        beta: &[f32],
        running: Option<(&[f32], &[f32])>,
        eps: f32,
        slot: usize,
    ) -> Result<(NodeId, Option<BnBatchStats>)> {
        let (outer, c, inner) = bn_layout(self.value(x).shape(), "batch norm input rank")?;
        if gamma.len() != c || beta.len() != c {
            return Err(Error::invalid(
                "batch norm",
                format!("{} affine entries for {c} channels", gamma.len()),
            ));
        }
        let shape = self.value(x).shape().to_vec();
        let xdata = self.value(x).data();
        let n = outer * inner;

        if let Some((rm, rv)) = running {
            if rm.len() != c || rv.len() != c {
                return Err(Error::invalid(
                    "batch norm",
                    format!("{} running entries for {c} channels", rm.len()),
                ));
            }
            let inv_std: Vec<f32> = rv.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
            let mut out = vec![0.0; xdata.len()];
            out.par_iter_mut().enumerate().for_each(|(idx, y)| {
                let ch = (idx / inner) % c;
                *y = (xdata[idx] - rm[ch]) * inv_std[ch] * gamma[ch] + beta[ch];
            });
            ensure_finite(&out, slot, "batch norm output")?;
            let value = Tensor::new(shape, out)?;
            let id = self.push(
                value,
                Op::BatchNorm {
                    x,
                    gamma: gamma.to_vec(),
                    inv_std,
                    xhat: None,
                    slot,
                },
            );
            return Ok((id, None));
        }

        // Training mode: biased variance normalizes, unbiased variance is
        // reported for the running estimate.
        let mut mean = vec![0.0f32; c];
        let mut var = vec![0.0f32; c];
        mean.par_iter_mut()
            .zip(var.par_iter_mut())
            .enumerate()
            .for_each(|(ch, (m, v))| {
                let mut s = 0.0f64;
                for o in 0..outer {
                    let base = (o * c + ch) * inner;
                    for i in 0..inner {
                        s += xdata[base + i] as f64;
                    }
                }
                let mu = s / n as f64;
                let mut sq = 0.0f64;
                for o in 0..outer {
                    let base = (o * c + ch) * inner;
                    for i in 0..inner {
                        let d = xdata[base + i] as f64 - mu;
                        sq += d * d;
                    }
                }
                *m = mu as f32;
                *v = (sq / n as f64) as f32;
            });
        let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xdata.len()];
        let mut out = vec![0.0; xdata.len()];
        xhat.par_iter_mut()
            .zip(out.par_iter_mut())
            .enumerate()
            .for_each(|(idx, (xh, y))| {
                let ch = (idx / inner) % c;
                let h = (xdata[idx] - mean[ch]) * inv_std[ch];
                *xh = h;
                *y = h * gamma[ch] + beta[ch];
            });
        ensure_finite(&out, slot, "batch norm output")?;
        let correction = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
        let stats = BnBatchStats {
            mean,
            var: var
                .iter()
                .map(|&v| (v as f64 * correction) as f32)
                .collect(),
        };
        let value = Tensor::new(shape, out)?;
        let id = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma: gamma.to_vec(),
                inv_std,
                xhat: Some(xhat),
                slot,
            },
        );
        Ok((id, Some(stats)))
    }

    pub fn max_pool2d(&mut self, x: NodeId, k: usize, stride: usize) -> Result<NodeId> {
        let (y, argmax) = max_pool2d_with_argmax(self.value(x), k, stride)?;
        Ok(self.push(y, Op::MaxPool2d { x, argmax }))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let y = global_avg_pool(self.value(x))?;
        Ok(self.push(y, Op::GlobalAvgPool { x }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Error::ShapeMismatch {
                context: "reshape",
                expected: shape,
                actual: self.value(x).shape().to_vec(),
            });
        }
        let y = Tensor::new(shape, self.value(x).data().to_vec())?;
        Ok(self.push(y, Op::Reshape { x }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch {
                context: "add",
                expected: self.value(a).shape().to_vec(),
                actual: self.value(b).shape().to_vec(),
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    /// Sum of all elements. A diagnostic scalarizer; training goes through
    /// [`Tape::softmax_cross_entropy`].
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        self.push(Tensor::scalar(s as f32), Op::Sum { x })
    }

    /// Mean cross-entropy of rank-2 logits against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (batch, classes) = rank2(self.value(logits), "cross entropy logits rank")?;
        if batch == 0 {
            return Err(Error::invalid("labels", "empty batch"));
        }
        if labels.len() != batch {
            return Err(Error::ShapeMismatch {
                context: "cross entropy labels",
                expected: vec![batch],
                actual: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(
                "labels",
                format!("label {bad} out of range for {classes} classes"),
            ));
        }
        let mut probs = vec![0.0f32; batch * classes];
        let mut loss = 0.0f64;
        for (b, row) in self.value(logits).data().chunks_exact(classes).enumerate() {
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0.0f64;
            for &v in row {
                z += ((v - m) as f64).exp();
            }
            for (k, &v) in row.iter().enumerate() {
                probs[b * classes + k] = (((v - m) as f64).exp() / z) as f32;
            }
            loss += z.ln() - (row[labels[b]] - m) as f64;
        }
        let value = Tensor::scalar((loss / batch as f64) as f32);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Reverse sweep from `loss`, which must be scalar. Consumes the
    /// tape's ability to run again; a second call is an error.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if self.spent {
            return Err(Error::TapeContract(
                "backward called twice on the same tape".into(),
            ));
        }
        if self.nodes.get(loss.0).is_none() {
            return Err(Error::TapeContract(format!(
                "loss node {} was not recorded on this tape",
                loss.0
            )));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::TapeContract(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.spent = true;

        let nodes = &self.nodes;
        let mut dvals: Vec<Option<Vec<f32>>> = vec![None; nodes.len()];
        dvals[loss.0] = Some(vec![1.0]);
        let mut grads = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(up) = dvals[idx].take() else { continue };
            match &nodes[idx].op {
                Op::Leaf => {
                    // Re-stash so leaf gradients survive to the harvest
                    // below.
                    dvals[idx] = Some(up);
                }
                Op::MaskedLinear { x, params, slot } => {
                    let xval = nodes[x.0].value.data();
                    let (batch, in_dim) = (nodes[x.0].value.shape()[0], params.cols());
                    let out_dim = params.rows();
                    let eff = params.effective();
                    let mut dx = vec![0.0; batch * in_dim];
                    dx.par_chunks_mut(in_dim)
                        .zip(up.par_chunks(out_dim))
                        .for_each(|(dxrow, uprow)| {
                            for (q, &u) in uprow.iter().enumerate() {
                                if u != 0.0 {
                                    axpy(u, &eff[q * in_dim..(q + 1) * in_dim], dxrow);
                                }
                            }
                        });
                    // Straight-through: the score gradient deliberately
                    // omits the mask factor so pruned weights keep
                    // receiving signal and can come back.
                    let alpha = params.alpha();
                    let signs = params.signs();
                    let ds = grads.score_entry(*slot, out_dim * in_dim);
                    ds.par_chunks_mut(in_dim).enumerate().for_each(|(q, dsrow)| {
                        let mut acc = vec![0.0f32; in_dim];
                        for b in 0..batch {
                            let u = up[b * out_dim + q];
                            if u != 0.0 {
                                axpy(u, &xval[b * in_dim..(b + 1) * in_dim], &mut acc);
                            }
                        }
                        for (p, a) in acc.iter().enumerate() {
                            dsrow[p] += alpha * signs[q * in_dim + p] * a;
                        }
                    });
                    accum(&mut dvals[x.0], dx);
                }
                Op::MaskedConv2d {
                    x,
                    params,
                    geom: g,
                    slot,
                } => {
                    let xval = nodes[x.0].value.data();
                    let batch = nodes[x.0].value.shape()[0];
                    let k = g.patch_len();
                    let opix = g.out_h() * g.out_w();
                    let in_len = g.in_len();
                    let out_len = g.out_len();
                    let alpha = params.alpha();
                    let signs = params.signs();
                    let eff = params.effective();
                    let mut dx = vec![0.0; batch * in_len];
                    let mut col = vec![0.0; k * opix];
                    let mut dcol = vec![0.0; k * opix];
                    let ds = grads.score_entry(*slot, g.out_c * k);
                    // Items run sequentially so the score accumulation
                    // order is fixed; the per-item work parallelizes over
                    // rows, which touch disjoint output.
                    for b in 0..batch {
                        let xb = &xval[b * in_len..(b + 1) * in_len];
                        let upb = &up[b * out_len..(b + 1) * out_len];
                        im2col(xb, g, &mut col);
                        ds.par_chunks_mut(k).enumerate().for_each(|(o, dsrow)| {
                            let uprow = &upb[o * opix..(o + 1) * opix];
                            for (kk, d) in dsrow.iter_mut().enumerate() {
                                let s = dot(uprow, &col[kk * opix..(kk + 1) * opix]);
                                *d += alpha * signs[o * k + kk] * s;
                            }
                        });
                        dcol.par_chunks_mut(opix).enumerate().for_each(|(kk, drow)| {
                            drow.fill(0.0);
                            for o in 0..g.out_c {
                                let a = eff[o * k + kk];
                                if a != 0.0 {
                                    axpy(a, &upb[o * opix..(o + 1) * opix], drow);
                                }
                            }
                        });
                        col2im(&dcol, g, &mut dx[b * in_len..(b + 1) * in_len]);
                    }
                    accum(&mut dvals[x.0], dx);
                }
                Op::Relu { x } => {
                    let y = nodes[idx].value.data();
                    let dx = up
                        .iter()
                        .zip(y)
                        .map(|(&u, &v)| if v > 0.0 { u } else { 0.0 })
                        .collect();
                    accum(&mut dvals[x.0], dx);
                }
                Op::SignAct { x, t } => {
                    let xval = nodes[x.0].value.data();
                    let dx = up
                        .iter()
                        .zip(xval)
                        .map(|(&u, &v)| (u as f64 * spline_grad(v as f64, *t)) as f32)
                        .collect();
                    accum(&mut dvals[x.0], dx);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    inv_std,
                    xhat,
                    slot,
                } => {
                    let (outer, c, inner) =
                        bn_layout(nodes[x.0].value.shape(), "batch norm input rank")?;
                    let n = (outer * inner) as f64;
                    match xhat {
                        Some(xhat) => {
                            // s1 = sum of upstream, s2 = sum of
                            // upstream * xhat, per channel; then
                            // dx = inv_std * gamma * (up - s1/n - xhat * s2/n).
                            let mut s1 = vec![0.0f64; c];
                            let mut s2 = vec![0.0f64; c];
                            s1.par_iter_mut()
                                .zip(s2.par_iter_mut())
                                .enumerate()
                                .for_each(|(ch, (a, b))| {
                                    let mut t1 = 0.0f64;
                                    let mut t2 = 0.0f64;
                                    for o in 0..outer {
                                        let base = (o * c + ch) * inner;
                                        for i in 0..inner {
                                            let u = up[base + i] as f64;
                                            t1 += u;
                                            t2 += u * xhat[base + i] as f64;
                                        }
                                    }
                                    *a = t1;
                                    *b = t2;
                                });
                            {
                                let bn = grads.bn_entry(*slot, c);
                                for ch in 0..c {
                                    bn.beta[ch] += s1[ch] as f32;
                                    bn.gamma[ch] += s2[ch] as f32;
                                }
                            }
                            let mut dx = vec![0.0; up.len()];
                            dx.par_iter_mut().enumerate().for_each(|(i, d)| {
                                let ch = (i / inner) % c;
                                *d = (inv_std[ch] * gamma[ch]) as f32
                                    * (up[i] - (s1[ch] / n) as f32
                                        - xhat[i] * (s2[ch] / n) as f32);
                            });
                            accum(&mut dvals[x.0], dx);
                        }
                        None => {
                            let mut dx = vec![0.0; up.len()];
                            dx.par_iter_mut().enumerate().for_each(|(i, d)| {
                                let ch = (i / inner) % c;
                                *d = up[i] * gamma[ch] * inv_std[ch];
                            });
                            accum(&mut dvals[x.0], dx);
                        }
                    }
                }
                Op::MaxPool2d { x, argmax } => {
                    let mut dx = vec![0.0; nodes[x.0].value.numel()];
                    for (&src, &u) in argmax.iter().zip(&up) {
                        dx[src] += u;
                    }
                    accum(&mut dvals[x.0], dx);
                }
                Op::GlobalAvgPool { x } => {
                    let shape = nodes[x.0].value.shape();
                    let plane = shape[2] * shape[3];
                    let scale = 1.0 / plane as f32;
                    let mut dx = vec![0.0; nodes[x.0].value.numel()];
                    dx.chunks_exact_mut(plane)
                        .zip(&up)
                        .for_each(|(chunk, &u)| chunk.fill(u * scale));
                    accum(&mut dvals[x.0], dx);
                }
                Op::Reshape { x } => {
                    accum(&mut dvals[x.0], up);
                }
                Op::Add { a, b } => {
                    accum(&mut dvals[a.0], up.clone());
                    accum(&mut dvals[b.0], up);
                }
                Op::Sum { x } => {
                    let dx = vec![up[0]; nodes[x.0].value.numel()];
                    accum(&mut dvals[x.0], dx);
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    probs,
                    labels,
                } => {
                    let batch = labels.len();
                    let classes = probs.len() / batch;
                    let scale = up[0] / batch as f32;
                    let mut dl = probs.clone();
                    for (b, &y) in labels.iter().enumerate() {
                        dl[b * classes + y] -= 1.0;
                    }
                    dl.iter_mut().for_each(|v| *v *= scale);
                    accum(&mut dvals[logits.0], dl);
                }
            }
        }

        for (i, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                if let Some(g) = dvals[i].take() {
                    grads.leaf.push((NodeId(i), g));
                }
            }
        }
        Ok(grads)
    }
}
