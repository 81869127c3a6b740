//! Masked-binary layers and network assembly.
//!
//! A network is described by a [`NetworkSpec`] (structural blocks plus
//! activation mode, batch-norm policy and init) and lowered into a flat
//! sequence of execution units. Lowering is where the 1-bit-activation
//! rewrite happens: max pooling moves directly behind its convolution and
//! a batch norm is inserted before every sign activation. Real-activation
//! networks keep the conventional conv / relu / pool order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::estimators::SplineParam;
use crate::tensor::{
    self, BnBatchStats, Conv2dGeom, MaskedParams, NodeId, Tape, Tensor,
};
use crate::{Error, Result};

/// Running-average coefficient for batch-norm statistics: new = (1 - m) *
/// old + m * batch.
pub const BN_MOMENTUM: f32 = 0.1;
/// Variance floor inside every batch-norm denominator.
pub const BN_EPS: f32 = 1e-5;

/// Activation family of a ticket: `Real` is the 1-bit-weight /
/// 32-bit-activation variant (ReLU), `Sign` binarizes activations too
/// (the 1/1 variant).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActivationMode {
    Real,
    Sign,
}

/// Whether batch-norm affine parameters train along with the scores.
/// `Frozen` keeps gamma = 1, beta = 0; running statistics update in
/// search mode either way.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BnPolicy {
    Frozen,
    Learned,
}

/// Weight initialization family. Both use the fan-in Gaussian scale
/// sqrt(2 / fan_in); `SignedConstant` keeps only its sign times that
/// scale, so every magnitude in a layer is equal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightInit {
    KaimingNormal,
    SignedConstant,
}

/// Shape of one network input item.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputShape {
    Features(usize),
    Image { c: usize, h: usize, w: usize },
}

/// Structural building blocks, written in the conventional (real
/// activation) order. Activations and batch norms are not listed; the
/// lowering pass inserts them according to the activation mode.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockSpec {
    Conv {
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
    },
    Pool {
        k: usize,
        stride: usize,
    },
    Dense {
        out: usize,
    },
    GlobalPool,
    /// Minimal two-conv residual block with projection shortcut when the
    /// shape changes. Real activation mode only.
    Residual {
        out_c: usize,
        stride: usize,
    },
}

/// Architecture description plus the knobs that affect how it is built.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NetworkSpec {
    pub input: InputShape,
    pub blocks: Vec<BlockSpec>,
    pub mode: ActivationMode,
    pub bn_policy: BnPolicy,
    pub init: WeightInit,
    /// Insert a batch norm before each ReLU. Sign mode always has batch
    /// norms regardless of this flag.
    pub with_bn: bool,
    /// Multiplies every hidden width (conv channels, hidden dense units);
    /// the final dense output is never scaled.
    pub width_multiplier: f64,
    /// When false, the first and last prunable layers keep their full
    /// masks (ablation switch; they stay binarized).
    pub prune_first_last: bool,
}

impl NetworkSpec {
    fn base(input: InputShape, blocks: Vec<BlockSpec>) -> Self {
        NetworkSpec {
            input,
            blocks,
            mode: ActivationMode::Real,
            bn_policy: BnPolicy::Frozen,
            init: WeightInit::KaimingNormal,
            with_bn: false,
            width_multiplier: 1.0,
            prune_first_last: true,
        }
    }

    /// Fully-connected net: hidden widths then a `classes`-way output.
    pub fn mlp(in_features: usize, hidden: &[usize], classes: usize) -> Self {
        let mut blocks: Vec<BlockSpec> =
            hidden.iter().map(|&out| BlockSpec::Dense { out }).collect();
        blocks.push(BlockSpec::Dense { out: classes });
        NetworkSpec::base(InputShape::Features(in_features), blocks)
    }

    /// VGG-style stack of 3x3 conv pairs with 2x2 pooling, depth conv
    /// layers in {2, 4, 6, 8}, then a 256-256-`classes` dense head.
    /// Channel plan: 64, 128, 256, 512 per pair.
    pub fn conv_net(depth: usize, input: (usize, usize, usize), classes: usize) -> Result<Self> {
        if !matches!(depth, 2 | 4 | 6 | 8) {
            return Err(Error::invalid("depth", format!("conv depth {depth} not in {{2,4,6,8}}")));
        }
        let mut blocks = Vec::new();
        for pair in 0..depth / 2 {
            let c = 64 << pair;
            blocks.push(BlockSpec::Conv { out_c: c, k: 3, stride: 1, pad: 1 });
            blocks.push(BlockSpec::Conv { out_c: c, k: 3, stride: 1, pad: 1 });
            blocks.push(BlockSpec::Pool { k: 2, stride: 2 });
        }
        blocks.push(BlockSpec::Dense { out: 256 });
        blocks.push(BlockSpec::Dense { out: 256 });
        blocks.push(BlockSpec::Dense { out: classes });
        let (c, h, w) = input;
        Ok(NetworkSpec::base(InputShape::Image { c, h, w }, blocks))
    }

    /// Six 3x3 convs (128, 128, 256, 256, 512, 512) with pooling after
    /// each pair and a single dense classifier.
    pub fn vgg_small(input: (usize, usize, usize), classes: usize) -> Self {
        let mut blocks = Vec::new();
        for c in [128usize, 256, 512] {
            blocks.push(BlockSpec::Conv { out_c: c, k: 3, stride: 1, pad: 1 });
            blocks.push(BlockSpec::Conv { out_c: c, k: 3, stride: 1, pad: 1 });
            blocks.push(BlockSpec::Pool { k: 2, stride: 2 });
        }
        blocks.push(BlockSpec::Dense { out: classes });
        let (c, h, w) = input;
        NetworkSpec::base(InputShape::Image { c, h, w }, blocks)
    }

    /// Stem conv plus four stages of two residual blocks (64, 128, 256,
    /// 512), global average pooling and a dense classifier. Batch norms
    /// on by default, as the residual blocks assume them.
    pub fn resnet18(input: (usize, usize, usize), classes: usize) -> Self {
        let mut blocks = vec![BlockSpec::Conv { out_c: 64, k: 3, stride: 1, pad: 1 }];
        for (stage, c) in [64usize, 128, 256, 512].into_iter().enumerate() {
            let first_stride = if stage == 0 { 1 } else { 2 };
            blocks.push(BlockSpec::Residual { out_c: c, stride: first_stride });
            blocks.push(BlockSpec::Residual { out_c: c, stride: 1 });
        }
        blocks.push(BlockSpec::GlobalPool);
        blocks.push(BlockSpec::Dense { out: classes });
        let (c, h, w) = input;
        let mut spec = NetworkSpec::base(InputShape::Image { c, h, w }, blocks);
        spec.with_bn = true;
        spec
    }

    pub fn with_mode(mut self, mode: ActivationMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_bn_policy(mut self, policy: BnPolicy) -> Self {
        self.bn_policy = policy;
        self
    }

    pub fn with_init(mut self, init: WeightInit) -> Self {
        self.init = init;
        self
    }

    pub fn with_batch_norms(mut self, on: bool) -> Self {
        self.with_bn = on;
        self
    }

    pub fn with_width_multiplier(mut self, m: f64) -> Self {
        self.width_multiplier = m;
        self
    }

    pub fn with_prune_first_last(mut self, on: bool) -> Self {
        self.prune_first_last = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::UnsupportedArchitecture("no blocks".into()));
        }
        if !(self.width_multiplier.is_finite() && self.width_multiplier > 0.0) {
            return Err(Error::invalid(
                "width_multiplier",
                format!("must be positive and finite, got {}", self.width_multiplier),
            ));
        }
        Ok(())
    }
}

/// One prunable layer: frozen weights, trainable scores, and the derived
/// binary plane (signs, mask, gain).
///
/// The sign plane is computed from the weights once at construction and
/// the weights are immutable afterwards, so signs = sgn(weights) holds by
/// construction for the life of the layer.
#[derive(Debug, Clone)]
pub struct MaskedBinaryLayer {
    weights: Vec<f32>,
    scores: Vec<f32>,
    params: MaskedParams,
    prunable: bool,
}

impl MaskedBinaryLayer {
    pub fn new(weights: Vec<f32>, scores: Vec<f32>, rows: usize, cols: usize) -> Result<Self> {
        let params = MaskedParams::from_weights(&weights, rows, cols)?;
        if scores.len() != weights.len() {
            return Err(Error::ShapeMismatch {
                context: "layer scores",
                expected: vec![rows, cols],
                actual: vec![scores.len()],
            });
        }
        Ok(MaskedBinaryLayer { weights, scores, params, prunable: true })
    }

    /// Layer with an explicitly supplied plane (mask, gain). The signs in
    /// `params` must equal sgn(weights); this is how constructed
    /// existence certificates become runnable networks.
    pub fn with_params(weights: Vec<f32>, scores: Vec<f32>, params: MaskedParams) -> Result<Self> {
        if weights.len() != params.rows() * params.cols() || scores.len() != weights.len() {
            return Err(Error::ShapeMismatch {
                context: "layer plane",
                expected: vec![params.rows(), params.cols()],
                actual: vec![weights.len()],
            });
        }
        if weights
            .iter()
            .zip(params.signs())
            .any(|(&w, &s)| tensor::sign_pm1(w) != s)
        {
            return Err(Error::invalid("params", "signs disagree with sgn(weights)"));
        }
        Ok(MaskedBinaryLayer { weights, scores, params, prunable: true })
    }

    pub fn rows(&self) -> usize {
        self.params.rows()
    }

    pub fn cols(&self) -> usize {
        self.params.cols()
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn scores(&self) -> &[f32] {
        &self.scores
    }

    pub fn scores_mut(&mut self) -> &mut [f32] {
        &mut self.scores
    }

    pub fn params(&self) -> &MaskedParams {
        &self.params
    }

    /// Whether the mask-recompute pass may prune this layer.
    pub fn prunable(&self) -> bool {
        self.prunable
    }

    pub fn set_prunable(&mut self, on: bool) {
        self.prunable = on;
    }

    /// Installs a new mask and recomputes the gain from the surviving
    /// weights.
    pub fn apply_mask(&mut self, mask: Vec<f32>) -> Result<()> {
        self.params.set_mask(mask, &self.weights)
    }

    /// The ternary plane the ticket computes with: alpha * (mask * signs),
    /// entries in {-alpha, 0, +alpha}.
    pub fn effective_weights(&self) -> &[f32] {
        self.params.effective()
    }

    /// Mask applied to the real weights (no binarization); the
    /// subnetwork-error diagnostic evaluates this plane.
    pub fn masked_real_weights(&self) -> Vec<f32> {
        self.weights
            .iter()
            .zip(self.params.mask())
            .map(|(w, m)| w * m)
            .collect()
    }
}

/// Per-site batch-norm state: running statistics plus the affine pair.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    /// Mirrors the network's bn_policy; the optimizer consults it.
    pub trainable: bool,
}

impl BatchNormState {
    pub fn new(channels: usize, trainable: bool) -> Self {
        BatchNormState {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            trainable,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn update_running(&mut self, stats: &BnBatchStats, momentum: f32) {
        for (r, &b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(&stats.var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

/// Lowered execution step. Prunable layers and batch norms are referenced
/// by index into the state's stores.
#[derive(Debug, Clone)]
pub(crate) enum Unit {
    Linear { layer: usize },
    Conv { layer: usize, geom: Conv2dGeom },
    Bn { idx: usize },
    Relu,
    Sign,
    MaxPool { k: usize, stride: usize },
    GlobalAvgPool,
    Flatten { features: usize },
    Residual { body: Vec<Unit>, shortcut: Vec<Unit> },
}

/// Shape contract for one prunable layer produced by lowering.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerShape {
    rows: usize,
    cols: usize,
}

struct Lowered {
    units: Vec<Unit>,
    layer_shapes: Vec<LayerShape>,
    bn_channels: Vec<usize>,
    output_dim: usize,
}

fn scale_width(w: usize, m: f64) -> usize {
    ((w as f64 * m).round() as usize).max(1)
}

/// Walks the block list and produces the executable unit sequence for the
/// chosen activation mode, allocating layer and batch-norm indices.
fn lower(spec: &NetworkSpec) -> Result<Lowered> {
    spec.validate()?;
    let m = spec.width_multiplier;
    let mut units = Vec::new();
    let mut layer_shapes = Vec::new();
    let mut bn_channels = Vec::new();
    let mut cur = spec.input;

    let new_layer = |shapes: &mut Vec<LayerShape>, rows: usize, cols: usize| -> usize {
        shapes.push(LayerShape { rows, cols });
        shapes.len() - 1
    };
    let new_bn = |channels: &mut Vec<usize>, c: usize| -> usize {
        channels.push(c);
        channels.len() - 1
    };

    let last = spec.blocks.len() - 1;
    let mut i = 0;
    while i < spec.blocks.len() {
        let block = spec.blocks[i];
        let is_classifier = i == last && matches!(block, BlockSpec::Dense { .. });
        match block {
            BlockSpec::Conv { out_c, k, stride, pad } => {
                let (c, h, w) = match cur {
                    InputShape::Image { c, h, w } => (c, h, w),
                    InputShape::Features(_) => {
                        return Err(Error::UnsupportedArchitecture(
                            "conv block after the dense stage".into(),
                        ))
                    }
                };
                let out_c = scale_width(out_c, m);
                let geom = Conv2dGeom {
                    in_c: c,
                    in_h: h,
                    in_w: w,
                    out_c,
                    k_h: k,
                    k_w: k,
                    stride,
                    pad,
                };
                geom.validate()?;
                let layer = new_layer(&mut layer_shapes, out_c, geom.patch_len());
                units.push(Unit::Conv { layer, geom });
                let (mut oh, mut ow) = (geom.out_h(), geom.out_w());
                match spec.mode {
                    ActivationMode::Sign => {
                        // Pooling moves to directly behind the conv, then
                        // batch norm, then the binary activation.
                        if let Some(BlockSpec::Pool { k, stride }) = spec.blocks.get(i + 1) {
                            pool_dims(&mut oh, &mut ow, *k, *stride)?;
                            units.push(Unit::MaxPool { k: *k, stride: *stride });
                            i += 1;
                        }
                        let bn = new_bn(&mut bn_channels, out_c);
                        units.push(Unit::Bn { idx: bn });
                        units.push(Unit::Sign);
                    }
                    ActivationMode::Real => {
                        if spec.with_bn {
                            let bn = new_bn(&mut bn_channels, out_c);
                            units.push(Unit::Bn { idx: bn });
                        }
                        units.push(Unit::Relu);
                    }
                }
                cur = InputShape::Image { c: out_c, h: oh, w: ow };
            }
            BlockSpec::Pool { k, stride } => {
                let (c, mut h, mut w) = match cur {
                    InputShape::Image { c, h, w } => (c, h, w),
                    InputShape::Features(_) => {
                        return Err(Error::UnsupportedArchitecture(
                            "pool block after the dense stage".into(),
                        ))
                    }
                };
                pool_dims(&mut h, &mut w, k, stride)?;
                units.push(Unit::MaxPool { k, stride });
                cur = InputShape::Image { c, h, w };
            }
            BlockSpec::Dense { out } => {
                let features = match cur {
                    InputShape::Features(f) => f,
                    InputShape::Image { c, h, w } => {
                        let f = c * h * w;
                        units.push(Unit::Flatten { features: f });
                        f
                    }
                };
                let out = if is_classifier { out } else { scale_width(out, m) };
                let layer = new_layer(&mut layer_shapes, out, features);
                units.push(Unit::Linear { layer });
                if !is_classifier {
                    match spec.mode {
                        ActivationMode::Sign => {
                            let bn = new_bn(&mut bn_channels, out);
                            units.push(Unit::Bn { idx: bn });
                            units.push(Unit::Sign);
                        }
                        ActivationMode::Real => {
                            if spec.with_bn {
                                let bn = new_bn(&mut bn_channels, out);
                                units.push(Unit::Bn { idx: bn });
                            }
                            units.push(Unit::Relu);
                        }
                    }
                }
                cur = InputShape::Features(out);
            }
            BlockSpec::GlobalPool => {
                let c = match cur {
                    InputShape::Image { c, .. } => c,
                    InputShape::Features(_) => {
                        return Err(Error::UnsupportedArchitecture(
                            "global pool after the dense stage".into(),
                        ))
                    }
                };
                units.push(Unit::GlobalAvgPool);
                cur = InputShape::Features(c);
            }
            BlockSpec::Residual { out_c, stride } => {
                if spec.mode == ActivationMode::Sign {
                    return Err(Error::UnsupportedArchitecture(
                        "residual blocks are only supported with real activations".into(),
                    ));
                }
                let (c, h, w) = match cur {
                    InputShape::Image { c, h, w } => (c, h, w),
                    InputShape::Features(_) => {
                        return Err(Error::UnsupportedArchitecture(
                            "residual block after the dense stage".into(),
                        ))
                    }
                };
                let out_c = scale_width(out_c, m);
                let g1 = Conv2dGeom {
                    in_c: c,
                    in_h: h,
                    in_w: w,
                    out_c,
                    k_h: 3,
                    k_w: 3,
                    stride,
                    pad: 1,
                };
                g1.validate()?;
                let (oh, ow) = (g1.out_h(), g1.out_w());
                let g2 = Conv2dGeom {
                    in_c: out_c,
                    in_h: oh,
                    in_w: ow,
                    out_c,
                    k_h: 3,
                    k_w: 3,
                    stride: 1,
                    pad: 1,
                };
                let mut body = Vec::new();
                let l1 = new_layer(&mut layer_shapes, out_c, g1.patch_len());
                body.push(Unit::Conv { layer: l1, geom: g1 });
                if spec.with_bn {
                    let bn = new_bn(&mut bn_channels, out_c);
                    body.push(Unit::Bn { idx: bn });
                }
                body.push(Unit::Relu);
                let l2 = new_layer(&mut layer_shapes, out_c, g2.patch_len());
                body.push(Unit::Conv { layer: l2, geom: g2 });
                if spec.with_bn {
                    let bn = new_bn(&mut bn_channels, out_c);
                    body.push(Unit::Bn { idx: bn });
                }
                let mut shortcut = Vec::new();
                if c != out_c || stride != 1 {
                    let gs = Conv2dGeom {
                        in_c: c,
                        in_h: h,
                        in_w: w,
                        out_c,
                        k_h: 1,
                        k_w: 1,
                        stride,
                        pad: 0,
                    };
                    let ls = new_layer(&mut layer_shapes, out_c, gs.patch_len());
                    shortcut.push(Unit::Conv { layer: ls, geom: gs });
                    if spec.with_bn {
                        let bn = new_bn(&mut bn_channels, out_c);
                        shortcut.push(Unit::Bn { idx: bn });
                    }
                }
                units.push(Unit::Residual { body, shortcut });
                units.push(Unit::Relu);
                cur = InputShape::Image { c: out_c, h: oh, w: ow };
            }
        }
        i += 1;
    }

    let output_dim = match cur {
        InputShape::Features(f) => f,
        InputShape::Image { c, h, w } => c * h * w,
    };
    Ok(Lowered { units, layer_shapes, bn_channels, output_dim })
}

fn pool_dims(h: &mut usize, w: &mut usize, k: usize, stride: usize) -> Result<()> {
    if k == 0 || stride == 0 || *h < k || *w < k {
        return Err(Error::invalid(
            "pool",
            format!("{k}x{k}/{stride} window does not fit {h}x{w}"),
        ));
    }
    *h = (*h - k) / stride + 1;
    *w = (*w - k) / stride + 1;
    Ok(())
}

/// A built network: the lowered unit program plus live parameters.
#[derive(Debug)]
pub struct NetworkState {
    spec: NetworkSpec,
    units: Vec<Unit>,
    layers: Vec<MaskedBinaryLayer>,
    bns: Vec<BatchNormState>,
    output_dim: usize,
}

/// Which weight plane a reference forward should use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlaneSel {
    /// alpha * (mask * signs): the ticket itself.
    Effective,
    /// mask * weights: the unbinarized subnetwork.
    MaskedReal,
    /// weights: the dense random network the ticket lives in.
    DenseReal,
}

/// Draws weights and scores for every layer of `spec`. Two calls with the
/// same seed produce bitwise-identical parameters.
pub fn build_network(spec: &NetworkSpec, seed: u64) -> Result<NetworkState> {
    let lowered = lower(spec)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(lowered.layer_shapes.len());
    for shape in &lowered.layer_shapes {
        let weights = draw_weights(&mut rng, shape.rows, shape.cols, spec.init);
        let scores = draw_scores(&mut rng, shape.rows, shape.cols);
        layers.push(MaskedBinaryLayer::new(weights, scores, shape.rows, shape.cols)?);
    }
    if !spec.prune_first_last && !layers.is_empty() {
        layers.first_mut().unwrap().set_prunable(false);
        layers.last_mut().unwrap().set_prunable(false);
    }
    let trainable = spec.bn_policy == BnPolicy::Learned;
    let bns = lowered
        .bn_channels
        .iter()
        .map(|&c| BatchNormState::new(c, trainable))
        .collect();
    Ok(NetworkState {
        spec: spec.clone(),
        units: lowered.units,
        layers,
        bns,
        output_dim: lowered.output_dim,
    })
}

impl NetworkState {
    /// Assembles a network from externally constructed layers (and batch
    /// norms), validating them against the spec's lowering. This is the
    /// entry point for analytically constructed masks.
    pub fn from_parts(
        spec: &NetworkSpec,
        layers: Vec<MaskedBinaryLayer>,
        bns: Vec<BatchNormState>,
    ) -> Result<Self> {
        let lowered = lower(spec)?;
        if layers.len() != lowered.layer_shapes.len() {
            return Err(Error::ShapeMismatch {
                context: "layer count",
                expected: vec![lowered.layer_shapes.len()],
                actual: vec![layers.len()],
            });
        }
        for (l, shape) in layers.iter().zip(&lowered.layer_shapes) {
            if l.rows() != shape.rows || l.cols() != shape.cols {
                return Err(Error::ShapeMismatch {
                    context: "layer plane",
                    expected: vec![shape.rows, shape.cols],
                    actual: vec![l.rows(), l.cols()],
                });
            }
        }
        if bns.len() != lowered.bn_channels.len() {
            return Err(Error::ShapeMismatch {
                context: "batch norm count",
                expected: vec![lowered.bn_channels.len()],
                actual: vec![bns.len()],
            });
        }
        for (b, &c) in bns.iter().zip(&lowered.bn_channels) {
            if b.channels() != c {
                return Err(Error::ShapeMismatch {
                    context: "batch norm channels",
                    expected: vec![c],
                    actual: vec![b.channels()],
                });
            }
        }
        Ok(NetworkState {
            spec: spec.clone(),
            units: lowered.units,
            layers,
            bns,
            output_dim: lowered.output_dim,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[MaskedBinaryLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [MaskedBinaryLayer] {
        &mut self.layers
    }

    pub fn bns(&self) -> &[BatchNormState] {
        &self.bns
    }

    pub fn bns_mut(&mut self) -> &mut [BatchNormState] {
        &mut self.bns
    }

    pub(crate) fn units(&self) -> &[Unit] {
        &self.units
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    /// Surviving parameters: sum of mask popcounts over layers.
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.params().surviving()).sum()
    }

    /// Parameters of the dense network the ticket is cut from.
    pub fn dense_param_count(&self) -> usize {
        self.layers.iter().map(|l| l.rows() * l.cols()).sum()
    }

    /// SHA-256 over all frozen weights in layer order. The search loop
    /// asserts this never changes.
    pub fn weight_hash(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for layer in &self.layers {
            for w in layer.weights() {
                hasher.update(w.to_le_bytes());
            }
        }
        hasher.finalize().into()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let ok = match self.spec.input {
            InputShape::Features(f) => x.shape().len() == 2 && x.shape()[1] == f,
            InputShape::Image { c, h, w } => {
                x.shape().len() == 4 && x.shape()[1..] == [c, h, w]
            }
        };
        if ok {
            Ok(())
        } else {
            let expected = match self.spec.input {
                InputShape::Features(f) => vec![f],
                InputShape::Image { c, h, w } => vec![c, h, w],
            };
            Err(Error::ShapeMismatch {
                context: "network input",
                expected,
                actual: x.shape().to_vec(),
            })
        }
    }

    /// Differentiable forward for the search loop: records on `tape`,
    /// uses batch statistics in every batch norm and folds them into the
    /// running averages. Returns the logits node.
    pub fn forward_search(
        &mut self,
        tape: &mut Tape,
        x: Tensor,
        t: SplineParam,
    ) -> Result<NodeId> {
        self.check_input(&x)?;
        let root = tape.leaf(x);
        let mut updates = Vec::new();
        let out = record_units(
            &self.units,
            &self.layers,
            &self.bns,
            tape,
            root,
            t,
            &mut updates,
        )?;
        for (idx, stats) in updates {
            self.bns[idx].update_running(&stats, BN_MOMENTUM);
        }
        Ok(out)
    }

    /// Pure inference forward over the ticket plane, using running batch
    /// statistics. Never mutates state.
    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        run_units(&self.units, &self.layers, &self.bns, self.spec.mode, x.clone(), PlaneSel::Effective)
    }

    /// Reference forward over a chosen weight plane (diagnostics).
    pub fn forward_reference(&self, x: &Tensor, sel: PlaneSel) -> Result<Tensor> {
        self.check_input(x)?;
        run_units(&self.units, &self.layers, &self.bns, self.spec.mode, x.clone(), sel)
    }
}

/// Records the unit program on the tape. Score slots are layer indices,
/// batch-norm slots are batch-norm indices.
fn record_units(
    units: &[Unit],
    layers: &[MaskedBinaryLayer],
    bns: &[BatchNormState],
    tape: &mut Tape,
    mut cur: NodeId,
    t: SplineParam,
    bn_updates: &mut Vec<(usize, BnBatchStats)>,
) -> Result<NodeId> {
    for unit in units {
        cur = match unit {
            Unit::Linear { layer } => {
                tape.masked_linear(cur, layers[*layer].params(), *layer)?
            }
            Unit::Conv { layer, geom } => {
                tape.masked_conv2d(cur, layers[*layer].params(), geom, *layer)?
            }
            Unit::Bn { idx } => {
                let bn = &bns[*idx];
                let (id, stats) =
                    tape.batch_norm(cur, &bn.gamma, &bn.beta, None, BN_EPS, *idx)?;
                bn_updates.push((*idx, stats.expect("training-mode batch norm returns stats")));
                id
            }
            Unit::Relu => tape.relu(cur),
            Unit::Sign => tape.sign_act(cur, t),
            Unit::MaxPool { k, stride } => tape.max_pool2d(cur, *k, *stride)?,
            Unit::GlobalAvgPool => tape.global_avg_pool(cur)?,
            Unit::Flatten { features } => {
                let batch = tape.value(cur).shape()[0];
                tape.reshape(cur, vec![batch, *features])?
            }
            Unit::Residual { body, shortcut } => {
                let b = record_units(body, layers, bns, tape, cur, t, bn_updates)?;
                let s = if shortcut.is_empty() {
                    cur
                } else {
                    record_units(shortcut, layers, bns, tape, cur, t, bn_updates)?
                };
                tape.add(b, s)?
            }
        };
    }
    Ok(cur)
}

/// Tape-free forward used by eval and the diagnostic planes.
fn run_units(
    units: &[Unit],
    layers: &[MaskedBinaryLayer],
    bns: &[BatchNormState],
    mode: ActivationMode,
    mut cur: Tensor,
    sel: PlaneSel,
) -> Result<Tensor> {
    let _ = mode;
    for unit in units {
        cur = match unit {
            Unit::Linear { layer } => {
                let l = &layers[*layer];
                match sel {
                    PlaneSel::Effective => tensor::linear(&cur, l.effective_weights(), l.rows())?,
                    PlaneSel::MaskedReal => {
                        tensor::linear(&cur, &l.masked_real_weights(), l.rows())?
                    }
                    PlaneSel::DenseReal => tensor::linear(&cur, l.weights(), l.rows())?,
                }
            }
            Unit::Conv { layer, geom } => {
                let l = &layers[*layer];
                match sel {
                    PlaneSel::Effective => tensor::conv2d(&cur, l.effective_weights(), geom)?,
                    PlaneSel::MaskedReal => {
                        tensor::conv2d(&cur, &l.masked_real_weights(), geom)?
                    }
                    PlaneSel::DenseReal => tensor::conv2d(&cur, l.weights(), geom)?,
                }
            }
            Unit::Bn { idx } => {
                let bn = &bns[*idx];
                tensor::batch_norm_eval(
                    &cur,
                    &bn.gamma,
                    &bn.beta,
                    &bn.running_mean,
                    &bn.running_var,
                    BN_EPS,
                )?
            }
            Unit::Relu => tensor::relu(&cur),
            Unit::Sign => tensor::hard_sign(&cur),
            Unit::MaxPool { k, stride } => tensor::max_pool2d(&cur, *k, *stride)?,
            Unit::GlobalAvgPool => tensor::global_avg_pool(&cur)?,
            Unit::Flatten { features } => {
                let batch = cur.shape()[0];
                Tensor::new(vec![batch, *features], cur.data().to_vec())?
            }
            Unit::Residual { body, shortcut } => {
                let b = run_units(body, layers, bns, mode, cur.clone(), sel)?;
                let s = if shortcut.is_empty() {
                    cur
                } else {
                    run_units(shortcut, layers, bns, mode, cur, sel)?
                };
                let data = b.data().iter().zip(s.data()).map(|(x, y)| x + y).collect();
                Tensor::new(b.shape().to_vec(), data)?
            }
        };
    }
    Ok(cur)
}

fn draw_weights(rng: &mut ChaCha20Rng, rows: usize, cols: usize, init: WeightInit) -> Vec<f32> {
    let std = (2.0 / cols as f64).sqrt();
    match init {
        WeightInit::KaimingNormal => {
            let dist = Normal::new(0.0, std).expect("positive std");
            (0..rows * cols).map(|_| dist.sample(rng) as f32).collect()
        }
        WeightInit::SignedConstant => {
            let c = std as f32;
            (0..rows * cols)
                .map(|_| if rng.gen::<bool>() { c } else { -c })
                .collect()
        }
    }
}

fn draw_scores(rng: &mut ChaCha20Rng, rows: usize, cols: usize) -> Vec<f32> {
    let bound = (6.0 / cols as f64).sqrt() as f32;
    (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn small_mlp(mode: ActivationMode) -> NetworkSpec {
        NetworkSpec::mlp(4, &[6], 3).with_mode(mode)
    }

    #[test]
    fn same_seed_builds_identical_networks() {
        let spec = small_mlp(ActivationMode::Real);
        let a = build_network(&spec, 11).unwrap();
        let b = build_network(&spec, 11).unwrap();
        let c = build_network(&spec, 12).unwrap();
        for (la, lb) in a.layers().iter().zip(b.layers()) {
            assert_eq!(la.weights(), lb.weights());
            assert_eq!(la.scores(), lb.scores());
        }
        assert_eq!(a.weight_hash(), b.weight_hash());
        assert_ne!(a.weight_hash(), c.weight_hash());
    }

    #[test]
    fn fresh_network_gain_is_mean_abs_weight() {
        let net = build_network(&small_mlp(ActivationMode::Real), 3).unwrap();
        for layer in net.layers() {
            let mean: f64 = layer.weights().iter().map(|w| w.abs() as f64).sum::<f64>()
                / layer.weights().len() as f64;
            assert_abs_diff_eq!(layer.params().alpha(), mean as f32, epsilon = 1e-6);
        }
    }

    #[test]
    fn signed_constant_init_gain_equals_magnitude() {
        let spec = small_mlp(ActivationMode::Real).with_init(WeightInit::SignedConstant);
        let net = build_network(&spec, 5).unwrap();
        for layer in net.layers() {
            let c = (2.0f64 / layer.cols() as f64).sqrt() as f32;
            assert!(layer.weights().iter().all(|w| w.abs() == c));
            assert_abs_diff_eq!(layer.params().alpha(), c, epsilon = 1e-6);
        }
    }

    #[test]
    fn effective_weights_are_ternary_with_sup_alpha() {
        let mut net = build_network(&small_mlp(ActivationMode::Real), 7).unwrap();
        let mask: Vec<f32> = (0..net.layers()[0].weights().len())
            .map(|i| (i % 2 == 0) as u32 as f32)
            .collect();
        net.layers_mut()[0].apply_mask(mask).unwrap();
        let layer = &net.layers()[0];
        let a = layer.params().alpha();
        let sup = layer
            .effective_weights()
            .iter()
            .fold(0.0f32, |acc, v| acc.max(v.abs()));
        assert!(layer
            .effective_weights()
            .iter()
            .all(|&v| v == 0.0 || v == a || v == -a));
        assert_abs_diff_eq!(sup, a);
    }

    #[test]
    fn signs_always_rebuild_from_weights() {
        let net = build_network(&small_mlp(ActivationMode::Real), 9).unwrap();
        for layer in net.layers() {
            for (w, s) in layer.weights().iter().zip(layer.params().signs()) {
                assert_eq!(tensor::sign_pm1(*w), *s);
            }
        }
    }

    #[test]
    fn hand_built_two_layer_composition() {
        // 2-2-2 real-activation net with explicit masks; forward must
        // equal the closed-form composition alpha2 (M2 B2) relu(alpha1 (M1 B1) x).
        let w1 = vec![0.5, -1.5, 2.0, 0.25];
        let w2 = vec![-1.0, 0.75, 0.5, -0.5];
        let p1 = MaskedParams::from_parts(
            vec![1.0, -1.0, 1.0, 1.0],
            vec![1.0, 1.0, 0.0, 1.0],
            0.75,
            2,
            2,
        )
        .unwrap();
        let p2 = MaskedParams::from_parts(
            vec![-1.0, 1.0, 1.0, -1.0],
            vec![1.0, 0.0, 1.0, 1.0],
            0.5,
            2,
            2,
        )
        .unwrap();
        let l1 = MaskedBinaryLayer::with_params(w1, vec![0.0; 4], p1).unwrap();
        let l2 = MaskedBinaryLayer::with_params(w2, vec![0.0; 4], p2).unwrap();
        let spec = NetworkSpec::mlp(2, &[2], 2);
        let net = NetworkState::from_parts(&spec, vec![l1, l2], vec![]).unwrap();

        let x = Tensor::new(vec![1, 2], vec![2.0, -1.0]).unwrap();
        let y = net.forward_eval(&x).unwrap();
        // Layer 1: h = relu(0.75 * [[1,-1],[0,1]] [2,-1]) = relu([2.25, -0.75]).
        // Layer 2: 0.5 * [[-1,0],[1,-1]] [2.25, 0] = [-1.125, 1.125].
        assert_abs_diff_eq!(y.data()[0], -1.125, epsilon = 1e-6);
        assert_abs_diff_eq!(y.data()[1], 1.125, epsilon = 1e-6);
    }

    #[test]
    fn sign_mode_logits_are_integer_multiples_of_gain() {
        let spec = small_mlp(ActivationMode::Sign);
        let net = build_network(&spec, 21).unwrap();
        let x = Tensor::new(vec![2, 4], vec![0.3, -0.8, 1.2, 0.05, -0.4, 0.9, -1.1, 0.6]).unwrap();
        let y = net.forward_eval(&x).unwrap();
        let a = net.layers().last().unwrap().params().alpha();
        for &v in y.data() {
            let q = v / a;
            assert_abs_diff_eq!(q, q.round(), epsilon = 1e-4);
        }
    }

    #[test]
    fn eval_forward_is_pure_but_search_updates_running_stats() {
        let spec = small_mlp(ActivationMode::Sign);
        let mut net = build_network(&spec, 23).unwrap();
        let x = Tensor::new(vec![3, 4], (0..12).map(|i| i as f32 * 0.1 - 0.5).collect()).unwrap();
        let y1 = net.forward_eval(&x).unwrap();
        let y2 = net.forward_eval(&x).unwrap();
        assert_eq!(y1.data(), y2.data());

        let before = net.bns()[0].running_mean.clone();
        let mut tape = Tape::new();
        net.forward_search(&mut tape, x.clone(), SplineParam::default())
            .unwrap();
        assert_ne!(before, net.bns()[0].running_mean);
    }

    #[test]
    fn single_layer_real_forward_is_linear_in_input() {
        let spec = NetworkSpec::mlp(3, &[], 2);
        let net = build_network(&spec, 31).unwrap();
        let x = Tensor::new(vec![1, 3], vec![0.2, -0.7, 1.1]).unwrap();
        let y = Tensor::new(vec![1, 3], vec![-0.4, 0.5, 0.3]).unwrap();
        let sum = Tensor::new(vec![1, 3], vec![-0.2, -0.2, 1.4]).unwrap();
        let fx = net.forward_eval(&x).unwrap();
        let fy = net.forward_eval(&y).unwrap();
        let fsum = net.forward_eval(&sum).unwrap();
        for i in 0..2 {
            assert_abs_diff_eq!(fsum.data()[i], fx.data()[i] + fy.data()[i], epsilon = 1e-5);
        }
    }

    #[test]
    fn conv_net_lowering_and_forward_shapes() {
        let spec = NetworkSpec::conv_net(4, (3, 32, 32), 10).unwrap();
        let net = build_network(&spec, 1).unwrap();
        // 4 convs + 3 dense.
        assert_eq!(net.layers().len(), 7);
        // After two pools: 128 channels at 8x8 feed the head.
        assert_eq!(net.layers()[4].cols(), 128 * 8 * 8);
        let x = Tensor::zeros(vec![2, 3, 32, 32]);
        let y = net.forward_eval(&x).unwrap();
        assert_eq!(y.shape(), &[2, 10]);
    }

    #[test]
    fn sign_mode_moves_pool_before_bn_and_activation() {
        let (c, h, w) = (2, 8, 8);
        let spec = NetworkSpec {
            input: InputShape::Image { c, h, w },
            blocks: vec![
                BlockSpec::Conv { out_c: 4, k: 3, stride: 1, pad: 1 },
                BlockSpec::Pool { k: 2, stride: 2 },
                BlockSpec::Dense { out: 5 },
            ],
            ..NetworkSpec::mlp(1, &[], 1)
        }
        .with_mode(ActivationMode::Sign);
        let net = build_network(&spec, 2).unwrap();
        let kinds: Vec<&str> = net
            .units()
            .iter()
            .map(|u| match u {
                Unit::Conv { .. } => "conv",
                Unit::MaxPool { .. } => "pool",
                Unit::Bn { .. } => "bn",
                Unit::Sign => "sign",
                Unit::Flatten { .. } => "flatten",
                Unit::Linear { .. } => "linear",
                _ => "other",
            })
            .collect();
        assert_eq!(kinds, ["conv", "pool", "bn", "sign", "flatten", "linear"]);
    }

    #[test]
    fn unsupported_structures_are_rejected() {
        let conv_after_dense = NetworkSpec {
            input: InputShape::Features(8),
            blocks: vec![
                BlockSpec::Dense { out: 4 },
                BlockSpec::Conv { out_c: 2, k: 1, stride: 1, pad: 0 },
            ],
            ..NetworkSpec::mlp(1, &[], 1)
        };
        assert!(matches!(
            build_network(&conv_after_dense, 0).unwrap_err(),
            Error::UnsupportedArchitecture(_)
        ));

        let residual_signed = NetworkSpec {
            input: InputShape::Image { c: 2, h: 8, w: 8 },
            blocks: vec![
                BlockSpec::Residual { out_c: 2, stride: 1 },
                BlockSpec::Dense { out: 2 },
            ],
            ..NetworkSpec::mlp(1, &[], 1)
        }
        .with_mode(ActivationMode::Sign);
        assert!(matches!(
            build_network(&residual_signed, 0).unwrap_err(),
            Error::UnsupportedArchitecture(_)
        ));
    }

    #[test]
    fn width_multiplier_scales_hidden_layers_only() {
        let spec = NetworkSpec::conv_net(2, (3, 16, 16), 10)
            .unwrap()
            .with_width_multiplier(2.0);
        let net = build_network(&spec, 3).unwrap();
        assert_eq!(net.layers()[0].rows(), 128);
        assert_eq!(net.layers()[2].rows(), 512);
        assert_eq!(net.layers().last().unwrap().rows(), 10);
    }

    #[test]
    fn from_parts_validates_shapes() {
        let spec = NetworkSpec::mlp(2, &[], 2);
        let bad = MaskedBinaryLayer::new(vec![1.0; 6], vec![0.0; 6], 3, 2).unwrap();
        assert!(NetworkState::from_parts(&spec, vec![bad], vec![]).is_err());
    }

    #[test]
    fn masked_real_plane_matches_dense_at_full_mask() {
        let net = build_network(&small_mlp(ActivationMode::Real), 41).unwrap();
        let x = Tensor::new(vec![1, 4], vec![0.1, 0.4, -0.2, 0.9]).unwrap();
        let a = net.forward_reference(&x, PlaneSel::MaskedReal).unwrap();
        let b = net.forward_reference(&x, PlaneSel::DenseReal).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn prune_exemption_marks_first_and_last_layers() {
        let spec = NetworkSpec::mlp(4, &[5, 6], 3).with_prune_first_last(false);
        let net = build_network(&spec, 1).unwrap();
        let flags: Vec<bool> = net.layers().iter().map(|l| l.prunable()).collect();
        assert_eq!(flags, [false, true, false]);
    }

    #[test]
    fn residual_net_builds_and_runs() {
        let spec = NetworkSpec::resnet18((3, 32, 32), 10);
        let net = build_network(&spec, 1).unwrap();
        // Stem + 8 blocks of 2 convs + 3 projection shortcuts + classifier.
        assert_eq!(net.layers().len(), 1 + 16 + 3 + 1);
        let x = Tensor::zeros(vec![1, 3, 32, 32]);
        let y = net.forward_eval(&x).unwrap();
        assert_eq!(y.shape(), &[1, 10]);
    }

    #[test]
    fn param_count_tracks_masks() {
        let mut net = build_network(&small_mlp(ActivationMode::Real), 2).unwrap();
        assert_eq!(net.param_count(), net.dense_param_count());
        let n0 = net.layers()[0].weights().len();
        let mask: Vec<f32> = (0..n0).map(|i| (i % 4 != 0) as u32 as f32).collect();
        let kept: usize = mask.iter().map(|&m| m as usize).sum();
        net.layers_mut()[0].apply_mask(mask).unwrap();
        assert_eq!(
            net.param_count(),
            kept + net.layers()[1].weights().len()
        );
    }
}
