//! Ticket search: score ascent with the straight-through surrogate, plus
//! the per-epoch mask and gain recompute.
//!
//! The loop never touches weights. Scores move every batch; masks and
//! gains move at epoch boundaries (or per batch under the ablation
//! setting), and a weight hash taken before and after the run guards the
//! frozen-weight contract.

use rayon::prelude::*;

use crate::data::{Dataset, Split};
use crate::estimators::SplineParam;
use crate::layers::{
    build_network, BnPolicy, MaskedBinaryLayer, NetworkSpec, NetworkState, PlaneSel,
};
use crate::tensor::{Tape, Tensor};
use crate::{Error, Result};

/// Optimizer family for the scores (and batch-norm affine when learned).
/// Semantics match the reference framework: SGD keeps a momentum buffer
/// seeded by the first gradient; Adam uses bias-corrected first and
/// second moments. L2 weight decay is folded into the gradient.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam_default() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from the base rate to zero over the post-warmup
    /// epochs.
    Cosine,
}

/// How often masks and gains recompute. Scores update every batch either
/// way.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskUpdate {
    PerEpoch,
    /// Ablation setting: resort after every score step.
    PerBatch,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub lr: f64,
    /// L2 decay on scores only; batch-norm affine is never decayed.
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    /// Epochs of linear ramp-up before the schedule proper.
    pub warmup_epochs: usize,
    /// Percent of each layer pruned, in [0, 100).
    pub prune_percent: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub bn_policy: BnPolicy,
    /// Temperature of the surrogate gradient for sign activations.
    pub spline_t: f64,
    pub mask_update: MaskUpdate,
    /// Score-gradient norms above this log a warning; the step is still
    /// applied.
    pub grad_warn_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: Optimizer::Sgd { momentum: 0.9 },
            lr: 0.1,
            weight_decay: 1e-4,
            schedule: LrSchedule::Cosine,
            warmup_epochs: 0,
            prune_percent: 50.0,
            epochs: 1,
            batch_size: 128,
            seed: 0,
            bn_policy: BnPolicy::Frozen,
            spline_t: 1.0,
            mask_update: MaskUpdate::PerEpoch,
            grad_warn_norm: 1e3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.prune_percent >= 0.0 && self.prune_percent < 100.0) {
            return Err(Error::invalid(
                "prune_percent",
                format!("must lie in [0, 100), got {}", self.prune_percent),
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid("lr", format!("must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::invalid(
                "weight_decay",
                format!("must be nonnegative, got {}", self.weight_decay),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be at least 1"));
        }
        if !(self.spline_t.is_finite() && self.spline_t > 0.0) {
            return Err(Error::invalid(
                "spline_t",
                format!("must be positive, got {}", self.spline_t),
            ));
        }
        match self.optimizer {
            Optimizer::Sgd { momentum } => {
                if !(0.0..1.0).contains(&momentum) {
                    return Err(Error::invalid(
                        "momentum",
                        format!("must lie in [0, 1), got {momentum}"),
                    ));
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 {
                    return Err(Error::invalid(
                        "adam",
                        format!("betas must lie in [0, 1) and eps > 0, got ({beta1}, {beta2}, {eps})"),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Learning rate for `epoch`: linear warmup, then the schedule.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            return self.lr * (epoch + 1) as f64 / self.warmup_epochs as f64;
        }
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let t = (epoch - self.warmup_epochs) as f64;
                let span = (self.epochs.saturating_sub(self.warmup_epochs)).max(1) as f64;
                self.lr * 0.5 * (1.0 + (std::f64::consts::PI * t / span).cos())
            }
        }
    }
}

/// Per-parameter optimizer memory.
#[derive(Debug, Clone)]
enum SlotState {
    Sgd { buf: Vec<f32> },
    Adam { m: Vec<f32>, v: Vec<f32> },
}

impl SlotState {
    fn new(opt: &Optimizer, len: usize) -> Self {
        match opt {
            Optimizer::Sgd { .. } => SlotState::Sgd { buf: vec![0.0; len] },
            Optimizer::Adam { .. } => SlotState::Adam { m: vec![0.0; len], v: vec![0.0; len] },
        }
    }
}

/// Optimizer state for one network: score slots per layer and affine
/// slots per batch norm.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    scores: Vec<SlotState>,
    bn_gamma: Vec<SlotState>,
    bn_beta: Vec<SlotState>,
    step: u64,
}

impl OptimizerState {
    pub fn new(net: &NetworkState, config: &TrainConfig) -> Self {
        let opt = &config.optimizer;
        OptimizerState {
            scores: net
                .layers()
                .iter()
                .map(|l| SlotState::new(opt, l.rows() * l.cols()))
                .collect(),
            bn_gamma: net
                .bns()
                .iter()
                .map(|b| SlotState::new(opt, b.channels()))
                .collect(),
            bn_beta: net
                .bns()
                .iter()
                .map(|b| SlotState::new(opt, b.channels()))
                .collect(),
            step: 0,
        }
    }
}

/// One framework-semantics update of `param` in place. `step` is
/// 1-based.
fn apply_update(
    param: &mut [f32],
    grad: &[f32],
    state: &mut SlotState,
    opt: &Optimizer,
    lr: f64,
    wd: f64,
    step: u64,
) {
    match (state, opt) {
        (SlotState::Sgd { buf }, Optimizer::Sgd { momentum }) => {
            let (lr, wd, mu) = (lr as f32, wd as f32, *momentum as f32);
            for i in 0..param.len() {
                let mut g = grad[i] + wd * param[i];
                if mu != 0.0 {
                    buf[i] = mu * buf[i] + g;
                    g = buf[i];
                }
                param[i] -= lr * g;
            }
        }
        (SlotState::Adam { m, v }, Optimizer::Adam { beta1, beta2, eps }) => {
            let bc1 = 1.0 - beta1.powi(step as i32);
            let bc2_sqrt = (1.0 - beta2.powi(step as i32)).sqrt();
            let step_size = (lr / bc1) as f32;
            let (b1, b2, eps) = (*beta1 as f32, *beta2 as f32, *eps as f32);
            let (wd, bc2_sqrt) = (wd as f32, bc2_sqrt as f32);
            for i in 0..param.len() {
                let g = grad[i] + wd * param[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                param[i] -= step_size * m[i] / (v[i].sqrt() / bc2_sqrt + eps);
            }
        }
        _ => unreachable!("optimizer state allocated for a different family"),
    }
}

/// Diagnostics from one score step.
#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub loss: f32,
    /// L2 norm over all trainable gradients, before weight decay.
    pub grad_norm: f64,
}

/// One batch of score training: forward through the masked-binary
/// network, cross-entropy backward, then an optimizer step on every
/// score matrix (and batch-norm affine pair when learned). Weights and
/// signs are untouched; scores of pruned weights keep receiving
/// gradients.
pub fn score_step(
    net: &mut NetworkState,
    opt: &mut OptimizerState,
    x: Tensor,
    labels: &[usize],
    config: &TrainConfig,
    lr: f64,
) -> Result<StepStats> {
    let t = SplineParam::new(config.spline_t)?;
    let mut tape = Tape::new();
    let logits = net.forward_search(&mut tape, x, t)?;
    let loss_id = tape.softmax_cross_entropy(logits, labels)?;
    let loss = tape.value(loss_id).item();
    let grads = tape.backward(loss_id)?;

    let mut sq_norm = 0.0f64;
    for slot in 0..net.layers().len() {
        if let Some(g) = grads.score(slot) {
            sq_norm += g.par_iter().map(|&v| v as f64 * v as f64).sum::<f64>();
        }
    }
    let train_bn = config.bn_policy == BnPolicy::Learned;
    if train_bn {
        for idx in 0..net.bns().len() {
            if let Some(bg) = grads.bn(idx) {
                sq_norm += bg.gamma.iter().map(|&v| v as f64 * v as f64).sum::<f64>();
                sq_norm += bg.beta.iter().map(|&v| v as f64 * v as f64).sum::<f64>();
            }
        }
    }
    let grad_norm = sq_norm.sqrt();
    if grad_norm > config.grad_warn_norm {
        log::warn!(
            "score gradient norm {grad_norm:.3e} exceeds {:.3e}; applying the step anyway",
            config.grad_warn_norm
        );
    }

    opt.step += 1;
    for (slot, layer) in net.layers_mut().iter_mut().enumerate() {
        if let Some(g) = grads.score(slot) {
            apply_update(
                layer.scores_mut(),
                g,
                &mut opt.scores[slot],
                &config.optimizer,
                lr,
                config.weight_decay,
                opt.step,
            );
        }
    }
    if train_bn {
        for (idx, bn) in net.bns_mut().iter_mut().enumerate() {
            if let Some(bg) = grads.bn(idx) {
                apply_update(
                    &mut bn.gamma,
                    &bg.gamma,
                    &mut opt.bn_gamma[idx],
                    &config.optimizer,
                    lr,
                    0.0,
                    opt.step,
                );
                apply_update(
                    &mut bn.beta,
                    &bg.beta,
                    &mut opt.bn_beta[idx],
                    &config.optimizer,
                    lr,
                    0.0,
                    opt.step,
                );
            }
        }
    }
    Ok(StepStats { loss, grad_norm })
}

/// New mask for one layer: the smallest ceil(count * p / 100) absolute
/// scores get 0, ties broken by pruning the lower flat index first.
pub fn recompute_mask(scores: &[f32], p: f64) -> Vec<f32> {
    let count = scores.len();
    let raw = count as f64 * p / 100.0;
    // Products like 20 * 95 / 100 must land on the integer, not a ulp
    // above it.
    let nearest = raw.round();
    let k = if (raw - nearest).abs() < 1e-9 { nearest as usize } else { raw.ceil() as usize };
    let mut order: Vec<usize> = (0..count).collect();
    order.sort_unstable_by(|&a, &b| {
        scores[a]
            .abs()
            .total_cmp(&scores[b].abs())
            .then(a.cmp(&b))
    });
    let mut mask = vec![1.0; count];
    for &i in &order[..k.min(count)] {
        mask[i] = 0.0;
    }
    mask
}

/// Gain for a mask: mean absolute surviving weight, 0 for an empty mask.
pub fn recompute_gain(mask: &[f32], weights: &[f32]) -> f32 {
    debug_assert_eq!(mask.len(), weights.len());
    let mut sum = 0.0f64;
    let mut kept = 0usize;
    for (w, m) in weights.iter().zip(mask) {
        if *m != 0.0 {
            sum += w.abs() as f64;
            kept += 1;
        }
    }
    if kept == 0 {
        0.0
    } else {
        (sum / kept as f64) as f32
    }
}

/// Distance between the surviving weights and their binarized stand-ins:
/// the Frobenius norm of M * (W - alpha B).
pub fn binarization_error(layer: &MaskedBinaryLayer) -> f32 {
    let alpha = layer.params().alpha() as f64;
    let mut sq = 0.0f64;
    for (w, m) in layer.weights().iter().zip(layer.params().mask()) {
        if *m != 0.0 {
            let d = w.abs() as f64 - alpha;
            sq += d * d;
        }
    }
    sq.sqrt() as f32
}

/// Mean distance between the masked-real subnetwork and a dense
/// reference on a batch: ||g(x; M * W) - f(x; W_ref)||_2 averaged over
/// rows. With no reference the net's own dense weights serve.
pub fn subnetwork_error(
    net: &NetworkState,
    reference: Option<&NetworkState>,
    x: &Tensor,
) -> Result<f32> {
    let g = net.forward_reference(x, PlaneSel::MaskedReal)?;
    let f = reference.unwrap_or(net).forward_reference(x, PlaneSel::DenseReal)?;
    if g.shape() != f.shape() {
        return Err(Error::ShapeMismatch {
            context: "subnetwork error outputs",
            expected: g.shape().to_vec(),
            actual: f.shape().to_vec(),
        });
    }
    let batch = g.shape()[0].max(1);
    let row = g.numel() / batch;
    let mut total = 0.0f64;
    for b in 0..g.shape()[0] {
        let mut sq = 0.0f64;
        for i in 0..row {
            let d = g.data()[b * row + i] as f64 - f.data()[b * row + i] as f64;
            sq += d * d;
        }
        total += sq.sqrt();
    }
    Ok((total / batch as f64) as f32)
}

/// Per-epoch snapshot of the search.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f32,
    pub test_top1: Option<f32>,
    pub layer_alpha: Vec<f32>,
    /// Pruned fraction per layer.
    pub layer_sparsity: Vec<f32>,
    pub layer_binarization_error: Vec<f32>,
}

const EVAL_BATCH: usize = 256;

/// Top-1 accuracy of the ticket on a split, `None` when empty.
pub fn evaluate_top1(net: &NetworkState, split: &Split) -> Result<Option<f32>> {
    if split.is_empty() {
        return Ok(None);
    }
    let mut correct = 0usize;
    for (x, labels) in split.eval_batches(EVAL_BATCH) {
        let logits = net.forward_eval(&x)?;
        for (pred, label) in logits.argmax_rows().into_iter().zip(labels) {
            correct += (pred == label) as usize;
        }
    }
    Ok(Some(correct as f32 / split.len() as f32))
}

fn recompute_all(net: &mut NetworkState, p: f64) -> Result<()> {
    for layer in net.layers_mut() {
        if layer.prunable() {
            let mask = recompute_mask(layer.scores(), p);
            layer.apply_mask(mask)?;
        }
    }
    Ok(())
}

fn epoch_report(net: &NetworkState, data: &Dataset, epoch: usize, lr: f64, train_loss: f32) -> Result<EpochReport> {
    Ok(EpochReport {
        epoch,
        lr,
        train_loss,
        test_top1: evaluate_top1(net, &data.test)?,
        layer_alpha: net.layers().iter().map(|l| l.params().alpha()).collect(),
        layer_sparsity: net
            .layers()
            .iter()
            .map(|l| 1.0 - l.params().surviving() as f32 / (l.rows() * l.cols()) as f32)
            .collect(),
        layer_binarization_error: net.layers().iter().map(binarization_error).collect(),
    })
}

/// Adds the epoch to numeric-failure messages so a blown-up run names
/// both coordinates.
fn with_epoch(err: Error, epoch: usize) -> Error {
    match err {
        Error::NumericFailure { layer, message } => Error::NumericFailure {
            layer,
            message: format!("epoch {epoch}: {message}"),
        },
        other => other,
    }
}

/// Full search: builds the network from the spec and seed, runs `epochs`
/// rounds of score steps over shuffled batches followed by the mask and
/// gain recompute, and reports per epoch. The frozen weights are hashed
/// before and after.
pub fn run_biprop(
    spec: &NetworkSpec,
    data: &Dataset,
    config: &TrainConfig,
) -> Result<(NetworkState, Vec<EpochReport>)> {
    run_biprop_with(spec, data, config, |_, _| ())
}

/// As [`run_biprop`], invoking `on_epoch` with an immutable snapshot
/// after each epoch's recompute.
pub fn run_biprop_with(
    spec: &NetworkSpec,
    data: &Dataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&NetworkState, &EpochReport),
) -> Result<(NetworkState, Vec<EpochReport>)> {
    config.validate()?;
    let mut net = build_network(spec, config.seed)?;
    let trainable = config.bn_policy == BnPolicy::Learned;
    for bn in net.bns_mut() {
        bn.trainable = trainable;
    }
    let hash_before = net.weight_hash();
    let mut opt = OptimizerState::new(&net, config);
    let mut reports = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let mut loss_sum = 0.0f64;
        let mut items = 0usize;
        for (x, labels) in data.train_batches(config.seed, epoch, config.batch_size) {
            let n = labels.len();
            let stats = score_step(&mut net, &mut opt, x, &labels, config, lr)
                .map_err(|e| with_epoch(e, epoch))?;
            loss_sum += stats.loss as f64 * n as f64;
            items += n;
            if config.mask_update == MaskUpdate::PerBatch {
                recompute_all(&mut net, config.prune_percent)?;
            }
        }
        recompute_all(&mut net, config.prune_percent)?;
        let train_loss = if items == 0 { f32::NAN } else { (loss_sum / items as f64) as f32 };
        let report = epoch_report(&net, data, epoch, lr, train_loss)?;
        on_epoch(&net, &report);
        reports.push(report);
    }

    assert_eq!(hash_before, net.weight_hash(), "frozen weights changed during search");
    Ok((net, reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::toy_two_moons;
    use crate::layers::ActivationMode;
    use crate::tensor::MaskedParams;
    use approx::assert_abs_diff_eq;

    fn plain_sgd(lr: f64) -> TrainConfig {
        TrainConfig {
            optimizer: Optimizer::Sgd { momentum: 0.0 },
            lr,
            weight_decay: 0.0,
            schedule: LrSchedule::Constant,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn mask_prunes_smallest_absolute_scores() {
        let m = recompute_mask(&[0.1, -0.5, 0.3, -0.2], 50.0);
        assert_eq!(m, vec![0.0, 1.0, 1.0, 0.0]);
        assert_eq!(recompute_mask(&[0.1, -0.5], 0.0), vec![1.0, 1.0]);
    }

    #[test]
    fn mask_ties_prune_lower_index_first() {
        let m = recompute_mask(&[0.5, -0.5, 0.5, 0.5], 50.0);
        assert_eq!(m, vec![0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn mask_zero_count_is_exact_under_duplicates() {
        let mut rng_state = 12345u64;
        let mut next = move || {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((rng_state >> 33) % 7) as f32 * 0.25
        };
        for count in [1usize, 7, 20, 97] {
            for p in [0.0, 12.5, 33.333333, 50.0, 95.0, 99.9] {
                let scores: Vec<f32> = (0..count).map(|_| next()).collect();
                let mask = recompute_mask(&scores, p);
                let zeros = mask.iter().filter(|&&m| m == 0.0).count();
                let raw = count as f64 * p / 100.0;
                let nearest = raw.round();
                let expected = if (raw - nearest).abs() < 1e-9 {
                    nearest as usize
                } else {
                    raw.ceil() as usize
                };
                assert_eq!(zeros, expected, "count={count} p={p}");
                assert_eq!(mask, recompute_mask(&scores, p));
            }
        }
    }

    #[test]
    fn integer_products_do_not_round_up() {
        // 20 * 95 / 100 = 19 exactly; naive f64 ceil would give 20.
        let scores: Vec<f32> = (0..20).map(|i| i as f32).collect();
        let zeros = recompute_mask(&scores, 95.0).iter().filter(|&&m| m == 0.0).count();
        assert_eq!(zeros, 19);
    }

    #[test]
    fn gain_examples() {
        assert_abs_diff_eq!(recompute_gain(&[1.0, 1.0], &[0.5, -1.5]), 1.0);
        assert_abs_diff_eq!(recompute_gain(&[1.0, 0.0], &[0.5, -1.5]), 0.5);
        assert_abs_diff_eq!(recompute_gain(&[0.0, 0.0], &[0.5, -1.5]), 0.0);
    }

    fn bin_err_at(weights: &[f32], mask: &[f32], alpha: f64, b: &[f32]) -> f64 {
        weights
            .iter()
            .zip(mask)
            .zip(b)
            .filter(|((_, m), _)| **m != 0.0)
            .map(|((w, _), s)| {
                let d = *w as f64 - alpha * *s as f64;
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }

    #[test]
    fn closed_form_gain_beats_random_probes() {
        let mut state = 99u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(7);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        let weights: Vec<f32> = (0..8).map(|_| (next() * 4.0 - 2.0) as f32).collect();
        let mask: Vec<f32> = (0..8).map(|i| (i % 3 != 0) as u32 as f32).collect();
        let alpha = recompute_gain(&mask, &weights) as f64;
        let signs: Vec<f32> = weights.iter().map(|&w| crate::tensor::sign_pm1(w)).collect();
        let best = bin_err_at(&weights, &mask, alpha, &signs);
        for _ in 0..200 {
            let a = next() * 3.0;
            let b: Vec<f32> = (0..8).map(|_| if next() < 0.5 { -1.0 } else { 1.0 }).collect();
            assert!(best <= bin_err_at(&weights, &mask, a, &b) + 1e-9);
        }
    }

    #[test]
    fn perturbed_gain_strictly_worse() {
        let weights = [0.5f32, -1.5, 0.25, 2.0];
        let mask = [1.0f32; 4];
        let signs: Vec<f32> = weights.iter().map(|&w| crate::tensor::sign_pm1(w)).collect();
        let star = recompute_gain(&mask, &weights) as f64;
        let at_star = bin_err_at(&weights, &mask, star, &signs);
        for delta in [-0.3, -0.05, 0.05, 0.3] {
            assert!(at_star < bin_err_at(&weights, &mask, star + delta, &signs));
        }
    }

    #[test]
    fn binarization_error_zero_for_signed_constant_and_empty_mask() {
        let w = vec![0.5, -0.5, 0.5, -0.5];
        let mut layer = MaskedBinaryLayer::new(w, vec![0.0; 4], 2, 2).unwrap();
        assert_abs_diff_eq!(binarization_error(&layer), 0.0);
        layer.apply_mask(vec![0.0; 4]).unwrap();
        assert_abs_diff_eq!(binarization_error(&layer), 0.0);
    }

    #[test]
    fn single_sgd_step_matches_hand_computation() {
        // 2-class net over one feature: logits = alpha * B * x with
        // B = [+1, -1], alpha = 1, x = 0.7, label 0.
        let spec = NetworkSpec::mlp(1, &[], 2);
        let params = MaskedParams::from_parts(vec![1.0, -1.0], vec![1.0, 1.0], 1.0, 2, 1).unwrap();
        let layer =
            MaskedBinaryLayer::with_params(vec![0.5, -1.5], vec![0.2, -0.3], params).unwrap();
        let mut net = NetworkState::from_parts(&spec, vec![layer], vec![]).unwrap();
        let config = plain_sgd(0.1);
        let mut opt = OptimizerState::new(&net, &config);
        let x = Tensor::new(vec![1, 1], vec![0.7]).unwrap();
        let stats = score_step(&mut net, &mut opt, x, &[0], &config, 0.1).unwrap();

        let z = [0.7f64, -0.7];
        let denom = z[0].exp() + z[1].exp();
        let p = [z[0].exp() / denom, z[1].exp() / denom];
        assert_abs_diff_eq!(stats.loss, -p[0].ln() as f32, epsilon = 1e-6);
        // dS_q = (p_q - y_q) * alpha * b_q * x.
        let ds = [(p[0] - 1.0) * 0.7, p[1] * -0.7];
        let expected = [0.2 - 0.1 * ds[0] as f32, -0.3 - 0.1 * ds[1] as f32];
        assert_abs_diff_eq!(net.layers()[0].scores()[0], expected[0], epsilon = 1e-6);
        assert_abs_diff_eq!(net.layers()[0].scores()[1], expected[1], epsilon = 1e-6);
    }

    #[test]
    fn adam_matches_scalar_recurrence() {
        let opt = Optimizer::adam_default();
        let mut state = SlotState::new(&opt, 1);
        let mut param = vec![0.5f32];
        let grads = [0.3f32, -0.2, 0.05, 0.4, -0.1];
        // Independent scalar oracle.
        let (b1, b2, eps, lr, wd) = (0.9f64, 0.999, 1e-8, 0.01, 0.1);
        let mut m = 0.0f64;
        let mut v = 0.0f64;
        let mut p = 0.5f64;
        for (t, &g0) in grads.iter().enumerate() {
            let t = t as u64 + 1;
            apply_update(&mut param, &[g0], &mut state, &opt, lr, wd, t);

            let g = g0 as f64 + wd * p;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mhat = m / (1.0 - b1.powi(t as i32));
            let vhat = v / (1.0 - b2.powi(t as i32));
            p -= lr * mhat / (vhat.sqrt() + eps);
            assert_abs_diff_eq!(param[0], p as f32, epsilon = 1e-5);
        }
    }

    #[test]
    fn flat_loss_changes_scores_only_by_weight_decay() {
        // One class: softmax probability is identically 1, so the
        // gradient vanishes.
        let spec = NetworkSpec::mlp(2, &[], 1);
        let mut net = build_network(&spec, 3).unwrap();
        let before = net.layers()[0].scores().to_vec();
        let x = Tensor::new(vec![2, 2], vec![0.3, -0.5, 1.0, 0.2]).unwrap();

        let config = plain_sgd(0.5);
        let mut opt = OptimizerState::new(&net, &config);
        score_step(&mut net, &mut opt, x.clone(), &[0, 0], &config, 0.5).unwrap();
        assert_eq!(net.layers()[0].scores(), &before[..]);

        let config = TrainConfig { weight_decay: 0.01, ..plain_sgd(0.5) };
        let mut opt = OptimizerState::new(&net, &config);
        score_step(&mut net, &mut opt, x, &[0, 0], &config, 0.5).unwrap();
        for (s, b) in net.layers()[0].scores().iter().zip(&before) {
            assert_abs_diff_eq!(*s, b - 0.5 * 0.01 * b, epsilon = 1e-6);
        }
    }

    #[test]
    fn huge_gradients_still_step() {
        let spec = NetworkSpec::mlp(1, &[], 2);
        let mut net = build_network(&spec, 1).unwrap();
        let before = net.layers()[0].scores().to_vec();
        let config = TrainConfig { grad_warn_norm: 1e-12, ..plain_sgd(0.01) };
        let mut opt = OptimizerState::new(&net, &config);
        let x = Tensor::new(vec![1, 1], vec![5.0]).unwrap();
        let stats = score_step(&mut net, &mut opt, x, &[0], &config, 0.01).unwrap();
        assert!(stats.grad_norm > config.grad_warn_norm);
        assert_ne!(net.layers()[0].scores(), &before[..]);
    }

    #[test]
    fn zero_epochs_returns_initialized_network() {
        let data = toy_two_moons(16, 0.1, 4);
        let spec = NetworkSpec::mlp(2, &[4], 2);
        let config = TrainConfig { epochs: 0, prune_percent: 0.0, ..TrainConfig::default() };
        let (net, reports) = run_biprop(&spec, &data, &config).unwrap();
        assert!(reports.is_empty());
        let fresh = build_network(&spec, config.seed).unwrap();
        assert_eq!(net.weight_hash(), fresh.weight_hash());
        assert_eq!(net.param_count(), net.dense_param_count());
        for (a, b) in net.layers().iter().zip(fresh.layers()) {
            assert_eq!(a.scores(), b.scores());
        }
    }

    #[test]
    fn identical_configs_find_identical_masks() {
        let data = toy_two_moons(60, 0.15, 8);
        let spec = NetworkSpec::mlp(2, &[8], 2);
        let config = TrainConfig { epochs: 3, batch_size: 16, ..TrainConfig::default() };
        let (a, ra) = run_biprop(&spec, &data, &config).unwrap();
        let (b, rb) = run_biprop(&spec, &data, &config).unwrap();
        assert_eq!(ra, rb);
        for (la, lb) in a.layers().iter().zip(b.layers()) {
            assert_eq!(la.params().mask(), lb.params().mask());
            assert_eq!(la.scores(), lb.scores());
        }
    }

    #[test]
    fn epoch_invariants_hold() {
        let data = toy_two_moons(50, 0.1, 2);
        let spec = NetworkSpec::mlp(2, &[6], 2);
        let config = TrainConfig { epochs: 2, batch_size: 10, ..TrainConfig::default() };
        let (net, reports) = run_biprop(&spec, &data, &config).unwrap();
        assert_eq!(reports.len(), 2);
        for layer in net.layers() {
            let count = layer.rows() * layer.cols();
            let expected_zeros = (count as f64 * 0.5).ceil() as usize;
            assert_eq!(count - layer.params().surviving(), expected_zeros);
            assert_abs_diff_eq!(
                layer.params().alpha(),
                recompute_gain(layer.params().mask(), layer.weights()),
                epsilon = 1e-7
            );
        }
        for r in &reports {
            for (l, s) in net.layers().iter().zip(&r.layer_sparsity) {
                let count = (l.rows() * l.cols()) as f32;
                assert_abs_diff_eq!(*s, (count * 0.5).ceil() / count, epsilon = 1e-6);
            }
        }
    }

    /// Two well-separated Gaussian blobs: linearly separable, so a dense
    /// logistic model reaches 100% and the ticket search has headroom.
    fn blob_dataset(n: usize) -> Dataset {
        let mut state = 777u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(11);
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let mut px = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let class = i % 2;
            let (cx, cy) = if class == 0 { (1.2, 0.9) } else { (-1.0, -1.1) };
            px.push((cx + 0.3 * next()) as f32);
            px.push((cy + 0.3 * next()) as f32);
            labels.push(class);
        }
        let train = Split::new(vec![2], px, labels).unwrap();
        Dataset {
            name: "blobs".into(),
            input: crate::layers::InputShape::Features(2),
            classes: 2,
            test: train.clone(),
            train,
            norm: crate::data::NormStats { mean: vec![0.0; 2], std: vec![1.0; 2] },
            augment: crate::data::Augment::None,
        }
    }

    /// Searching at half sparsity reaches a near-perfect ticket on the
    /// separable toy set within 50 epochs. Per-unit batch-norm affine is
    /// learned: bias-free masked-binary layers alone pin every ReLU
    /// hinge to the origin, which this 2-D set cannot tolerate.
    #[test]
    fn toy_set_trains_above_95_percent() {
        let data = blob_dataset(200);
        let spec = NetworkSpec::mlp(2, &[32], 2).with_batch_norms(true);
        let config = TrainConfig {
            epochs: 50,
            batch_size: 32,
            bn_policy: BnPolicy::Learned,
            schedule: LrSchedule::Cosine,
            seed: 1,
            ..TrainConfig::default()
        };
        let (net, _) = run_biprop(&spec, &data, &config).unwrap();
        let top1 = evaluate_top1(&net, &data.train).unwrap().unwrap();
        assert!(top1 >= 0.95, "train accuracy {top1}");
    }

    #[test]
    fn subnetwork_error_zero_without_pruning() {
        let spec = NetworkSpec::mlp(2, &[5], 2);
        let net = build_network(&spec, 11).unwrap();
        let x = Tensor::new(vec![3, 2], vec![0.3, -0.2, 1.0, 0.5, -0.8, 0.1]).unwrap();
        assert_abs_diff_eq!(subnetwork_error(&net, None, &x).unwrap(), 0.0);
    }

    #[test]
    fn lr_schedule_warms_up_then_decays() {
        let config = TrainConfig {
            lr: 0.4,
            epochs: 10,
            warmup_epochs: 2,
            schedule: LrSchedule::Cosine,
            ..TrainConfig::default()
        };
        assert_abs_diff_eq!(config.lr_at(0), 0.2);
        assert_abs_diff_eq!(config.lr_at(1), 0.4);
        assert_abs_diff_eq!(config.lr_at(2), 0.4);
        let mut prev = config.lr_at(2);
        for e in 3..10 {
            let lr = config.lr_at(e);
            assert!(lr < prev);
            prev = lr;
        }
        let constant = TrainConfig { schedule: LrSchedule::Constant, ..config };
        assert_abs_diff_eq!(constant.lr_at(7), 0.4);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let bad_p = TrainConfig { prune_percent: 100.0, ..TrainConfig::default() };
        assert!(bad_p.validate().is_err());
        let bad_lr = TrainConfig { lr: 0.0, ..TrainConfig::default() };
        assert!(bad_lr.validate().is_err());
        let bad_mom = TrainConfig {
            optimizer: Optimizer::Sgd { momentum: 1.0 },
            ..TrainConfig::default()
        };
        assert!(bad_mom.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn sign_mode_trains_without_numeric_failures() {
        let data = toy_two_moons(80, 0.1, 3);
        let spec = NetworkSpec::mlp(2, &[16], 2).with_mode(ActivationMode::Sign);
        let config = TrainConfig {
            epochs: 4,
            batch_size: 16,
            optimizer: Optimizer::adam_default(),
            lr: 0.01,
            bn_policy: BnPolicy::Learned,
            ..TrainConfig::default()
        };
        let (net, reports) = run_biprop(&spec, &data, &config).unwrap();
        assert_eq!(reports.len(), 4);
        assert!(reports.iter().all(|r| r.train_loss.is_finite()));
        // Learned policy marks every batch norm trainable.
        assert!(net.bns().iter().all(|b| b.trainable));
        assert!(net.bns().iter().any(|b| b.beta.iter().any(|&v| v != 0.0)));
    }
}
