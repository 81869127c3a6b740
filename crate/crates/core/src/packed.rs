//! Bit-packed deployment format and inference kernels.
//!
//! Sign and mask planes pack one bit per weight into 64-bit words,
//! LSB-first within a word, row-major, each row padded to a word
//! boundary with zero bits. Sign bit 1 means +1. Binary-activation
//! layers run as xnor-popcount over these words; real-activation layers
//! accumulate signed sums driven by the planes. Batch norms fold into
//! per-channel scale/shift constants at pack time.

use rayon::prelude::*;

use crate::layers::{
    ActivationMode, BatchNormState, InputShape, MaskedBinaryLayer, NetworkState, Unit, BN_EPS,
};
use crate::tensor::{self, Conv2dGeom, Tensor};
use crate::{Error, Result};

const WORD_BITS: usize = 64;

fn words_for(bits: usize) -> usize {
    bits.div_ceil(WORD_BITS)
}

/// A packed sign vector, one bit per activation, same word layout as the
/// weight planes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedActivation {
    len: usize,
    words: Vec<u64>,
}

impl PackedActivation {
    /// Packs sgn of each value; zero counts as +1, matching the sign
    /// convention of the float path.
    pub fn from_signs(x: &[f32]) -> Self {
        let mut words = vec![0u64; words_for(x.len())];
        for (i, &v) in x.iter().enumerate() {
            if tensor::sign_pm1(v) > 0.0 {
                words[i / WORD_BITS] |= 1u64 << (i % WORD_BITS);
            }
        }
        PackedActivation { len: x.len(), words }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn bit(&self, i: usize) -> bool {
        debug_assert!(i < self.len);
        self.words[i / WORD_BITS] >> (i % WORD_BITS) & 1 == 1
    }

    /// Expands back to ±1 floats.
    pub fn to_signs(&self) -> Vec<f32> {
        (0..self.len)
            .map(|i| if self.bit(i) { 1.0 } else { -1.0 })
            .collect()
    }
}

/// One packed layer: bit planes plus the gain.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedLayer {
    rows: usize,
    cols: usize,
    alpha: f32,
    sign_words: Vec<u64>,
    mask_words: Vec<u64>,
}

/// Packs a layer's sign and mask planes. Pruned weights keep their sign
/// bit, so the output is a pure function of (B, M, alpha).
pub fn pack(layer: &MaskedBinaryLayer) -> PackedLayer {
    let (rows, cols) = (layer.rows(), layer.cols());
    let wpr = words_for(cols);
    let mut sign_words = vec![0u64; rows * wpr];
    let mut mask_words = vec![0u64; rows * wpr];
    let signs = layer.params().signs();
    let mask = layer.params().mask();
    for r in 0..rows {
        for c in 0..cols {
            let word = r * wpr + c / WORD_BITS;
            let bit = 1u64 << (c % WORD_BITS);
            if signs[r * cols + c] > 0.0 {
                sign_words[word] |= bit;
            }
            if mask[r * cols + c] != 0.0 {
                mask_words[word] |= bit;
            }
        }
    }
    PackedLayer {
        rows,
        cols,
        alpha: layer.params().alpha(),
        sign_words,
        mask_words,
    }
}

impl PackedLayer {
    /// Rebuilds a layer from raw planes (checkpoint path). Word counts
    /// must match the layout and padding bits must be zero.
    pub fn from_words(
        rows: usize,
        cols: usize,
        alpha: f32,
        sign_words: Vec<u64>,
        mask_words: Vec<u64>,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid("packed layer", "dimensions must be nonzero"));
        }
        let wpr = words_for(cols);
        if sign_words.len() != rows * wpr || mask_words.len() != rows * wpr {
            return Err(Error::ShapeMismatch {
                context: "packed planes",
                expected: vec![rows * wpr],
                actual: vec![sign_words.len(), mask_words.len()],
            });
        }
        if !alpha.is_finite() || alpha < 0.0 {
            return Err(Error::invalid("alpha", format!("must be finite and >= 0, got {alpha}")));
        }
        let tail_bits = cols % WORD_BITS;
        if tail_bits != 0 {
            let pad = !0u64 << tail_bits;
            for r in 0..rows {
                let last = r * wpr + wpr - 1;
                if sign_words[last] & pad != 0 || mask_words[last] & pad != 0 {
                    return Err(Error::invalid("packed planes", "padding bits must be zero"));
                }
            }
        }
        Ok(PackedLayer { rows, cols, alpha, sign_words, mask_words })
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

    pub fn words_per_row(&self) -> usize {
        words_for(self.cols)
    }

    pub fn sign_row(&self, r: usize) -> &[u64] {
        let wpr = self.words_per_row();
        &self.sign_words[r * wpr..(r + 1) * wpr]
    }

    pub fn mask_row(&self, r: usize) -> &[u64] {
        let wpr = self.words_per_row();
        &self.mask_words[r * wpr..(r + 1) * wpr]
    }

    pub fn sign_words(&self) -> &[u64] {
        &self.sign_words
    }

    pub fn mask_words(&self) -> &[u64] {
        &self.mask_words
    }

    pub fn mask_popcount(&self) -> usize {
        self.mask_words.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Bytes of bit-plane payload (signs plus masks).
    pub fn payload_bytes(&self) -> usize {
        (self.sign_words.len() + self.mask_words.len()) * 8
    }

    /// Expands to the ternary matrix alpha * (M * B), bit-exactly equal
    /// to the effective weights of the source layer.
    pub fn unpack(&self) -> Vec<f32> {
        let mut out = vec![0.0f32; self.rows * self.cols];
        for r in 0..self.rows {
            let signs = self.sign_row(r);
            let mask = self.mask_row(r);
            for c in 0..self.cols {
                if mask[c / WORD_BITS] >> (c % WORD_BITS) & 1 == 1 {
                    let s = signs[c / WORD_BITS] >> (c % WORD_BITS) & 1;
                    out[r * self.cols + c] = if s == 1 { self.alpha } else { -self.alpha };
                }
            }
        }
        out
    }
}

/// Integer core of the xnor kernel: masked agreements minus masked
/// disagreements between a sign row and an activation word slice.
#[inline]
fn xnor_int(sign: &[u64], mask: &[u64], x: &[u64]) -> i32 {
    let mut kept = 0u32;
    let mut mismatch = 0u32;
    for i in 0..sign.len() {
        let m = mask[i];
        kept += m.count_ones();
        mismatch += ((sign[i] ^ x[i]) & m).count_ones();
    }
    kept as i32 - 2 * mismatch as i32
}

/// Binary-binary dot for one output unit: alpha * (popcount(mask) - 2 *
/// popcount((sign xor x) and mask)). Exactly alpha times the signed
/// agreement count.
pub fn xnor_dot(layer: &PackedLayer, row: usize, x: &PackedActivation) -> Result<f32> {
    if x.len() != layer.cols {
        return Err(Error::ShapeMismatch {
            context: "xnor activation length",
            expected: vec![layer.cols],
            actual: vec![x.len()],
        });
    }
    Ok(layer.alpha * xnor_int(layer.sign_row(row), layer.mask_row(row), x.words()) as f32)
}

/// Binary-real dot for one output unit: alpha * (sum of x over positive
/// masked signs minus sum over negative masked signs).
pub fn masked_signed_dot(layer: &PackedLayer, row: usize, x: &[f32]) -> Result<f32> {
    if x.len() != layer.cols {
        return Err(Error::ShapeMismatch {
            context: "signed-dot input length",
            expected: vec![layer.cols],
            actual: vec![x.len()],
        });
    }
    Ok((layer.alpha as f64 * signed_sum(layer.sign_row(row), layer.mask_row(row), x)) as f32)
}

/// Signed accumulation driven by the planes; padding bits never touch
/// `x` because mask padding is zero.
#[inline]
fn signed_sum(sign: &[u64], mask: &[u64], x: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (wi, (&sw, &mw)) in sign.iter().zip(mask).enumerate() {
        let base = wi * WORD_BITS;
        let mut pos = sw & mw;
        while pos != 0 {
            acc += x[base + pos.trailing_zeros() as usize] as f64;
            pos &= pos - 1;
        }
        let mut neg = !sw & mw;
        while neg != 0 {
            acc -= x[base + neg.trailing_zeros() as usize] as f64;
            neg &= neg - 1;
        }
    }
    acc
}

/// Folded batch-norm constants: y = scale * x + shift per channel, built
/// from eval-mode running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldedNorm {
    pub scale: Vec<f32>,
    pub shift: Vec<f32>,
}

fn fold_bn(bn: &BatchNormState) -> FoldedNorm {
    let scale: Vec<f32> = bn
        .gamma
        .iter()
        .zip(&bn.running_var)
        .map(|(g, v)| g / (v + BN_EPS).sqrt())
        .collect();
    let shift = bn
        .beta
        .iter()
        .zip(&bn.running_mean)
        .zip(&scale)
        .map(|((b, m), s)| b - m * s)
        .collect();
    FoldedNorm { scale, shift }
}

#[derive(Debug, Clone)]
enum PackedUnit {
    Linear { layer: usize },
    Conv { layer: usize, geom: Conv2dGeom },
    Norm { fold: FoldedNorm },
    Relu,
    Sign,
    MaxPool { k: usize, stride: usize },
    GlobalAvgPool,
    Flatten { features: usize },
    Residual { body: Vec<PackedUnit>, shortcut: Vec<PackedUnit> },
}

/// A whole network in deployment form.
#[derive(Debug, Clone)]
pub struct PackedNet {
    mode: ActivationMode,
    input: InputShape,
    layers: Vec<PackedLayer>,
    units: Vec<PackedUnit>,
    output_dim: usize,
    dense_params: usize,
}

fn pack_units(units: &[Unit], bns: &[BatchNormState]) -> Vec<PackedUnit> {
    units
        .iter()
        .map(|u| match u {
            Unit::Linear { layer } => PackedUnit::Linear { layer: *layer },
            Unit::Conv { layer, geom } => PackedUnit::Conv { layer: *layer, geom: *geom },
            Unit::Bn { idx } => PackedUnit::Norm { fold: fold_bn(&bns[*idx]) },
            Unit::Relu => PackedUnit::Relu,
            Unit::Sign => PackedUnit::Sign,
            Unit::MaxPool { k, stride } => PackedUnit::MaxPool { k: *k, stride: *stride },
            Unit::GlobalAvgPool => PackedUnit::GlobalAvgPool,
            Unit::Flatten { features } => PackedUnit::Flatten { features: *features },
            Unit::Residual { body, shortcut } => PackedUnit::Residual {
                body: pack_units(body, bns),
                shortcut: pack_units(shortcut, bns),
            },
        })
        .collect()
}

/// Packs every layer and folds every batch norm of a searched network.
pub fn pack_network(net: &NetworkState) -> Result<PackedNet> {
    let layers: Vec<PackedLayer> = net.layers().iter().map(pack).collect();
    Ok(PackedNet {
        mode: net.spec().mode,
        input: net.spec().input,
        units: pack_units(net.units(), net.bns()),
        layers,
        output_dim: net.output_dim(),
        dense_params: net.dense_param_count(),
    })
}

/// Integer accumulators captured from the xnor layers, keyed by layer
/// index, flattened per batch item in output order.
#[derive(Debug, Clone, Default)]
pub struct PackedTrace {
    pub accumulators: Vec<(usize, Vec<i32>)>,
}

/// Activations flowing through the packed program: real tensors, or one
/// packed sign vector per batch item after a binary activation.
enum Act {
    Real(Tensor),
    Bits { shape: Vec<usize>, items: Vec<PackedActivation> },
}

impl Act {
    fn shape(&self) -> &[usize] {
        match self {
            Act::Real(t) => t.shape(),
            Act::Bits { shape, .. } => shape,
        }
    }

    fn to_real(&self) -> Tensor {
        match self {
            Act::Real(t) => t.clone(),
            Act::Bits { shape, items } => {
                let mut data = Vec::with_capacity(shape.iter().product());
                for item in items {
                    data.extend(item.to_signs());
                }
                Tensor::new(shape.clone(), data).expect("bit shape arithmetic")
            }
        }
    }
}

impl PackedNet {
    pub fn mode(&self) -> ActivationMode {
        self.mode
    }

    pub fn layers(&self) -> &[PackedLayer] {
        &self.layers
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn dense_param_count(&self) -> usize {
        self.dense_params
    }

    /// Inference over the packed program.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.run(x, None)?)
    }

    /// Inference that also captures the integer accumulators of every
    /// xnor layer, for exactness checks against a reference.
    pub fn forward_with_trace(&self, x: &Tensor) -> Result<(Tensor, PackedTrace)> {
        let mut trace = PackedTrace::default();
        let y = self.run(x, Some(&mut trace))?;
        Ok((y, trace))
    }

    fn run(&self, x: &Tensor, mut trace: Option<&mut PackedTrace>) -> Result<Tensor> {
        let ok = match self.input {
            InputShape::Features(f) => x.shape().len() == 2 && x.shape()[1] == f,
            InputShape::Image { c, h, w } => x.shape().len() == 4 && x.shape()[1..] == [c, h, w],
        };
        if !ok {
            return Err(Error::ShapeMismatch {
                context: "packed network input",
                expected: match self.input {
                    InputShape::Features(f) => vec![f],
                    InputShape::Image { c, h, w } => vec![c, h, w],
                },
                actual: x.shape().to_vec(),
            });
        }
        let mut first_prunable_done = false;
        let act = self.run_units(
            &self.units,
            Act::Real(x.clone()),
            &mut first_prunable_done,
            &mut trace,
        )?;
        Ok(act.to_real())
    }

    fn run_units(
        &self,
        units: &[PackedUnit],
        mut act: Act,
        first_prunable_done: &mut bool,
        trace: &mut Option<&mut PackedTrace>,
    ) -> Result<Act> {
        for unit in units {
            act = match unit {
                PackedUnit::Linear { layer } => {
                    let l = &self.layers[*layer];
                    match &act {
                        Act::Bits { shape, items } => {
                            if shape[1..].iter().product::<usize>() != l.cols() {
                                return Err(Error::ShapeMismatch {
                                    context: "packed linear input",
                                    expected: vec![l.cols()],
                                    actual: shape[1..].to_vec(),
                                });
                            }
                            let per_item: Vec<(Vec<f32>, Vec<i32>)> = items
                                .par_iter()
                                .map(|item| xnor_linear_item(l, item))
                                .collect();
                            finish_int_layer(*layer, shape[0], l.rows(), per_item, trace)?
                        }
                        Act::Real(x) => {
                            self.check_real_allowed(*layer, first_prunable_done)?;
                            Act::Real(masked_signed_linear(l, x)?)
                        }
                    }
                }
                PackedUnit::Conv { layer, geom } => {
                    let l = &self.layers[*layer];
                    match &act {
                        Act::Bits { shape, items } => {
                            if shape[1..] != [geom.in_c, geom.in_h, geom.in_w] {
                                return Err(Error::ShapeMismatch {
                                    context: "packed conv input",
                                    expected: vec![geom.in_c, geom.in_h, geom.in_w],
                                    actual: shape[1..].to_vec(),
                                });
                            }
                            let per_item: Vec<(Vec<f32>, Vec<i32>)> = items
                                .par_iter()
                                .map(|item| xnor_conv_item(l, geom, item))
                                .collect();
                            let out = finish_int_layer(
                                *layer,
                                shape[0],
                                geom.out_len(),
                                per_item,
                                trace,
                            )?;
                            reshape_act(out, vec![
                                shape[0],
                                geom.out_c,
                                geom.out_h(),
                                geom.out_w(),
                            ])
                        }
                        Act::Real(x) => {
                            self.check_real_allowed(*layer, first_prunable_done)?;
                            Act::Real(masked_signed_conv(l, geom, x)?)
                        }
                    }
                }
                PackedUnit::Norm { fold } => {
                    Act::Real(apply_fold(&act.to_real(), fold)?)
                }
                PackedUnit::Relu => Act::Real(tensor::relu(&act.to_real())),
                PackedUnit::Sign => {
                    let real = act.to_real();
                    let shape = real.shape().to_vec();
                    let item_len: usize = shape[1..].iter().product();
                    let items = real
                        .data()
                        .chunks_exact(item_len.max(1))
                        .map(PackedActivation::from_signs)
                        .collect();
                    Act::Bits { shape, items }
                }
                PackedUnit::MaxPool { k, stride } => {
                    Act::Real(tensor::max_pool2d(&act.to_real(), *k, *stride)?)
                }
                PackedUnit::GlobalAvgPool => Act::Real(tensor::global_avg_pool(&act.to_real())?),
                PackedUnit::Flatten { features } => {
                    let batch = act.shape()[0];
                    match act {
                        // Bit items are already flat per item.
                        Act::Bits { items, .. } => {
                            Act::Bits { shape: vec![batch, *features], items }
                        }
                        Act::Real(t) => {
                            Act::Real(Tensor::new(vec![batch, *features], t.data().to_vec())?)
                        }
                    }
                }
                PackedUnit::Residual { body, shortcut } => {
                    let input = act.to_real();
                    let b = self
                        .run_units(body, Act::Real(input.clone()), first_prunable_done, trace)?
                        .to_real();
                    let s = if shortcut.is_empty() {
                        input
                    } else {
                        self.run_units(shortcut, Act::Real(input), first_prunable_done, trace)?
                            .to_real()
                    };
                    let data = b.data().iter().zip(s.data()).map(|(x, y)| x + y).collect();
                    Act::Real(Tensor::new(b.shape().to_vec(), data)?)
                }
            };
        }
        Ok(act)
    }

    /// Real input into a prunable layer is the entry point in 1/32 mode
    /// and the first layer in 1/1 mode; anywhere else in a 1/1 net it
    /// means a binary activation went missing.
    fn check_real_allowed(&self, layer: usize, first_prunable_done: &mut bool) -> Result<()> {
        if self.mode == ActivationMode::Sign && *first_prunable_done {
            return Err(Error::ModeMismatch(format!(
                "layer {layer} expects packed binary activations but received real values"
            )));
        }
        *first_prunable_done = true;
        Ok(())
    }
}

fn reshape_act(act: Act, shape: Vec<usize>) -> Act {
    match act {
        Act::Real(t) => {
            let data = t.data().to_vec();
            Act::Real(Tensor::new(shape, data).expect("conv output arithmetic"))
        }
        Act::Bits { items, .. } => Act::Bits { shape, items },
    }
}

/// Collects per-item (values, accumulators) into one tensor plus the
/// trace entry.
fn finish_int_layer(
    layer: usize,
    batch: usize,
    out_len: usize,
    per_item: Vec<(Vec<f32>, Vec<i32>)>,
    trace: &mut Option<&mut PackedTrace>,
) -> Result<Act> {
    let mut data = Vec::with_capacity(batch * out_len);
    let mut ints = Vec::with_capacity(batch * out_len);
    for (values, acc) in per_item {
        data.extend(values);
        ints.extend(acc);
    }
    if let Some(t) = trace.as_deref_mut() {
        t.accumulators.push((layer, ints));
    }
    Ok(Act::Real(Tensor::new(vec![batch, out_len], data)?))
}

fn xnor_linear_item(l: &PackedLayer, x: &PackedActivation) -> (Vec<f32>, Vec<i32>) {
    let mut values = Vec::with_capacity(l.rows());
    let mut ints = Vec::with_capacity(l.rows());
    for r in 0..l.rows() {
        let acc = xnor_int(l.sign_row(r), l.mask_row(r), x.words());
        ints.push(acc);
        values.push(l.alpha() * acc as f32);
    }
    (values, ints)
}

/// Xnor convolution for one item: per output position the patch bits
/// and a validity plane are gathered, then every output channel reduces
/// with popcounts. Positions outside the input (zero padding) are
/// excluded by the validity plane, matching the float path's zero
/// contribution.
fn xnor_conv_item(l: &PackedLayer, g: &Conv2dGeom, x: &PackedActivation) -> (Vec<f32>, Vec<i32>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let patch = g.patch_len();
    let pw = words_for(patch);
    let mut values = vec![0.0f32; g.out_c * oh * ow];
    let mut ints = vec![0i32; g.out_c * oh * ow];
    let mut xbits = vec![0u64; pw];
    let mut valid = vec![0u64; pw];
    for oy in 0..oh {
        for ox in 0..ow {
            xbits.iter_mut().for_each(|w| *w = 0);
            valid.iter_mut().for_each(|w| *w = 0);
            let mut p = 0usize;
            for c in 0..g.in_c {
                for ky in 0..g.k_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for kx in 0..g.k_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if iy >= 0 && (iy as usize) < g.in_h && ix >= 0 && (ix as usize) < g.in_w {
                            valid[p / WORD_BITS] |= 1u64 << (p % WORD_BITS);
                            let src = (c * g.in_h + iy as usize) * g.in_w + ix as usize;
                            if x.bit(src) {
                                xbits[p / WORD_BITS] |= 1u64 << (p % WORD_BITS);
                            }
                        }
                        p += 1;
                    }
                }
            }
            for oc in 0..g.out_c {
                let sign = l.sign_row(oc);
                let mask = l.mask_row(oc);
                let mut kept = 0u32;
                let mut mismatch = 0u32;
                for i in 0..pw {
                    let m = mask[i] & valid[i];
                    kept += m.count_ones();
                    mismatch += ((sign[i] ^ xbits[i]) & m).count_ones();
                }
                let acc = kept as i32 - 2 * mismatch as i32;
                let at = (oc * oh + oy) * ow + ox;
                ints[at] = acc;
                values[at] = l.alpha() * acc as f32;
            }
        }
    }
    (values, ints)
}

fn masked_signed_linear(l: &PackedLayer, x: &Tensor) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() != 2 || shape[1] != l.cols() {
        return Err(Error::ShapeMismatch {
            context: "packed linear input",
            expected: vec![l.cols()],
            actual: shape.to_vec(),
        });
    }
    let batch = shape[0];
    let mut out = vec![0.0f32; batch * l.rows()];
    out.par_chunks_mut(l.rows())
        .zip(x.data().par_chunks(l.cols()))
        .for_each(|(row_out, xin)| {
            for r in 0..l.rows() {
                row_out[r] =
                    (l.alpha() as f64 * signed_sum(l.sign_row(r), l.mask_row(r), xin)) as f32;
            }
        });
    Tensor::new(vec![batch, l.rows()], out)
}

fn masked_signed_conv(l: &PackedLayer, g: &Conv2dGeom, x: &Tensor) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() != 4 || shape[1..] != [g.in_c, g.in_h, g.in_w] {
        return Err(Error::ShapeMismatch {
            context: "packed conv input",
            expected: vec![g.in_c, g.in_h, g.in_w],
            actual: shape.to_vec(),
        });
    }
    let batch = shape[0];
    let (oh, ow) = (g.out_h(), g.out_w());
    let patch = g.patch_len();
    let item_in = g.in_len();
    let item_out = g.out_len();
    let mut out = vec![0.0f32; batch * item_out];
    out.par_chunks_mut(item_out)
        .zip(x.data().par_chunks(item_in))
        .for_each(|(yout, xin)| {
            let mut buf = vec![0.0f32; patch];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut p = 0usize;
                    for c in 0..g.in_c {
                        for ky in 0..g.k_h {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            for kx in 0..g.k_w {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                buf[p] = if iy >= 0
                                    && (iy as usize) < g.in_h
                                    && ix >= 0
                                    && (ix as usize) < g.in_w
                                {
                                    xin[(c * g.in_h + iy as usize) * g.in_w + ix as usize]
                                } else {
                                    0.0
                                };
                                p += 1;
                            }
                        }
                    }
                    for oc in 0..g.out_c {
                        yout[(oc * oh + oy) * ow + ox] = (l.alpha() as f64
                            * signed_sum(l.sign_row(oc), l.mask_row(oc), &buf))
                            as f32;
                    }
                }
            }
        });
    Tensor::new(vec![batch, g.out_c, oh, ow], out)
}

fn apply_fold(x: &Tensor, fold: &FoldedNorm) -> Result<Tensor> {
    let (outer, c, inner) = tensor::bn_layout(x.shape(), "folded norm input rank")?;
    if fold.scale.len() != c {
        return Err(Error::ShapeMismatch {
            context: "folded norm channels",
            expected: vec![c],
            actual: vec![fold.scale.len()],
        });
    }
    let mut out = vec![0.0f32; x.numel()];
    for o in 0..outer {
        for ch in 0..c {
            let base = (o * c + ch) * inner;
            for i in 0..inner {
                out[base + i] = x.data()[base + i] * fold.scale[ch] + fold.shift[ch];
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Size accounting for a packed network against dense f32 storage.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct CompressionReport {
    /// Bit-plane bytes over all layers.
    pub payload_bytes: usize,
    /// Per-layer dims, gain, and folded-norm constants.
    pub constant_bytes: usize,
    /// The dense network at f32.
    pub dense_f32_bytes: usize,
    pub ratio: f64,
}

pub fn compression_report(net: &PackedNet) -> CompressionReport {
    let payload_bytes: usize = net.layers.iter().map(|l| l.payload_bytes()).sum();
    fn const_bytes(units: &[PackedUnit]) -> usize {
        units
            .iter()
            .map(|u| match u {
                PackedUnit::Linear { .. } | PackedUnit::Conv { .. } => 2 * 4 + 4,
                PackedUnit::Norm { fold } => fold.scale.len() * 8,
                PackedUnit::Residual { body, shortcut } => {
                    const_bytes(body) + const_bytes(shortcut)
                }
                _ => 0,
            })
            .sum()
    }
    let constant_bytes = const_bytes(&net.units);
    let dense_f32_bytes = net.dense_params * 4;
    CompressionReport {
        payload_bytes,
        constant_bytes,
        dense_f32_bytes,
        ratio: dense_f32_bytes as f64 / (payload_bytes + constant_bytes).max(1) as f64,
    }
}

/// Whole-network packed inference.
pub fn packed_forward(net: &PackedNet, x: &Tensor) -> Result<Tensor> {
    net.forward(x)
}
