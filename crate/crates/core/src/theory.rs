//! Constructive existence verifier for sparse binary subnetworks.
//!
//! Each construction builds, from explicitly sampled +-1 tensors, the
//! masks that approximate a target function inside a two-layer (or
//! composed 2l-layer) binary network, then measures the approximation
//! error and checks the advertised sparsity and width bounds. Failure
//! to find enough qualifying rows is the probabilistic event the bounds
//! control and is reported through the certificate, never as an error;
//! calling a construction below its hypothesis width is an error.
//!
//! All math here is f64 and self-contained; these networks are tiny.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::{Error, Result};

/// Sample count for the matrix-stage error measurement.
pub const L2_ERROR_SAMPLES: usize = 1000;
/// Sample count for the composed deep-network error measurement.
pub const DEEP_ERROR_SAMPLES: usize = 2000;

const EXACT_TOL: f64 = 1e-12;
const BOUND_TOL: f64 = 1e-9;

/// One target layer of a deep instance, row-major `rows x cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetLayer {
    pub w: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

/// What the construction is asked to approximate.
#[derive(Debug, Clone, PartialEq)]
pub enum ExistenceTarget {
    /// The map x -> alpha * x[coord] on R^dim.
    Scalar { alpha: f64, coord: usize, dim: usize },
    /// The map x -> <w, x>.
    Vector { w: Vec<f64> },
    /// The map x -> relu(W x), row-major `rows x cols`.
    Matrix { w: Vec<f64>, rows: usize, cols: usize },
    /// Composition of relu layers with a linear final layer.
    Deep { stages: Vec<TargetLayer> },
}

/// The +-1 draws consumed by one two-layer stage: `u` is `k x n_out`
/// (second layer), `b` is `k x d` (first layer), both row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct StageDraw {
    pub u: Vec<i8>,
    pub b: Vec<i8>,
}

/// A target plus everything random the construction may use. Sampling
/// happens once here, so constructions are pure functions of the
/// instance.
#[derive(Debug, Clone)]
pub struct ExistenceInstance {
    pub target: ExistenceTarget,
    pub eps: f64,
    pub delta: f64,
    pub s: usize,
    pub k: usize,
    pub seed: u64,
    pub draws: Vec<StageDraw>,
}

/// Stage shapes `(n_out, d)` implied by a target.
fn stage_dims(target: &ExistenceTarget) -> Vec<(usize, usize)> {
    match target {
        ExistenceTarget::Scalar { dim, .. } => vec![(1, *dim)],
        ExistenceTarget::Vector { w } => vec![(1, w.len())],
        ExistenceTarget::Matrix { rows, cols, .. } => vec![(*rows, *cols)],
        ExistenceTarget::Deep { stages } => {
            stages.iter().map(|l| (l.rows, l.cols)).collect()
        }
    }
}

/// Largest singular value by power iteration.
fn spectral_norm(w: &[f64], rows: usize, cols: usize) -> f64 {
    let mut v = vec![1.0 / (cols as f64).sqrt(); cols];
    let mut sigma = 0.0;
    for _ in 0..200 {
        // u = W v, then v = W^T u, normalized.
        let u: Vec<f64> = (0..rows)
            .map(|r| (0..cols).map(|c| w[r * cols + c] * v[c]).sum())
            .collect();
        let mut vt: Vec<f64> = (0..cols)
            .map(|c| (0..rows).map(|r| w[r * cols + c] * u[r]).sum())
            .collect();
        let norm = vt.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        vt.iter_mut().for_each(|x| *x /= norm);
        sigma = norm.sqrt();
        v = vt;
    }
    sigma
}

fn count_nonzero(w: &[f64]) -> usize {
    w.iter().filter(|&&x| x != 0.0).count()
}

impl ExistenceInstance {
    /// Validates the target against the stated hypotheses and samples
    /// the binary tensors for every stage.
    pub fn sample(
        target: ExistenceTarget,
        eps: f64,
        delta: f64,
        s: usize,
        k: usize,
        seed: u64,
    ) -> Result<Self> {
        if !(0.0 < eps && eps < 1.0) || !(0.0 < delta && delta < 1.0) {
            return Err(Error::invalid(
                "eps/delta",
                format!("must lie in (0,1), got eps={eps}, delta={delta}"),
            ));
        }
        if s == 0 {
            return Err(Error::invalid("s", "sparsity budget must be positive"));
        }
        if k < 2 {
            return Err(Error::invalid("k", "width must allow a half split"));
        }
        let limit = 1.0 / (s as f64).sqrt() + EXACT_TOL;
        match &target {
            ExistenceTarget::Scalar { alpha, coord, dim } => {
                if *dim == 0 || coord >= dim || s > *dim {
                    return Err(Error::invalid(
                        "target",
                        format!("need coord < dim and s <= dim, got coord={coord}, dim={dim}, s={s}"),
                    ));
                }
                if alpha.abs() > limit {
                    return Err(Error::invalid(
                        "target",
                        format!("|alpha|={} exceeds 1/sqrt(s)={limit}", alpha.abs()),
                    ));
                }
            }
            ExistenceTarget::Vector { w } => {
                if w.is_empty() || s > w.len() {
                    return Err(Error::invalid("target", "need 1 <= s <= dim"));
                }
                if count_nonzero(w) > s {
                    return Err(Error::invalid(
                        "target",
                        format!("support {} exceeds s={s}", count_nonzero(w)),
                    ));
                }
                if w.iter().any(|x| x.abs() > limit) {
                    return Err(Error::invalid("target", "entry exceeds 1/sqrt(s)"));
                }
            }
            ExistenceTarget::Matrix { w, rows, cols } => {
                if *rows == 0 || *cols == 0 || w.len() != rows * cols || s > *cols {
                    return Err(Error::invalid("target", "bad matrix shape or s > cols"));
                }
                for r in 0..*rows {
                    if count_nonzero(&w[r * cols..(r + 1) * cols]) > s {
                        return Err(Error::invalid(
                            "target",
                            format!("row {r} support exceeds s={s}"),
                        ));
                    }
                }
                if w.iter().any(|x| x.abs() > limit) {
                    return Err(Error::invalid("target", "entry exceeds 1/sqrt(s)"));
                }
            }
            ExistenceTarget::Deep { stages } => {
                if stages.is_empty() {
                    return Err(Error::invalid("target", "deep target needs >= 1 stage"));
                }
                for (i, layer) in stages.iter().enumerate() {
                    if layer.rows == 0
                        || layer.cols == 0
                        || layer.w.len() != layer.rows * layer.cols
                    {
                        return Err(Error::invalid("target", format!("bad shape at stage {i}")));
                    }
                    if i > 0 && stages[i - 1].rows != layer.cols {
                        return Err(Error::invalid(
                            "target",
                            format!("stage {i} input dim does not chain"),
                        ));
                    }
                    for r in 0..layer.rows {
                        let row = &layer.w[r * layer.cols..(r + 1) * layer.cols];
                        if count_nonzero(row) > s {
                            return Err(Error::invalid(
                                "target",
                                format!("stage {i} row {r} support exceeds s={s}"),
                            ));
                        }
                    }
                    if layer.w.iter().any(|x| x.abs() > limit) {
                        return Err(Error::invalid(
                            "target",
                            format!("stage {i} entry exceeds 1/sqrt(s)"),
                        ));
                    }
                    let sigma = spectral_norm(&layer.w, layer.rows, layer.cols);
                    if sigma > 1.0 + BOUND_TOL {
                        return Err(Error::invalid(
                            "target",
                            format!("stage {i} spectral norm {sigma} exceeds 1"),
                        ));
                    }
                }
            }
        }

        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut pm1 = |count: usize| -> Vec<i8> {
            (0..count).map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect()
        };
        let draws = stage_dims(&target)
            .iter()
            .map(|&(n_out, d)| StageDraw { u: pm1(k * n_out), b: pm1(k * d) })
            .collect();
        Ok(ExistenceInstance { target, eps, delta, s, k, seed, draws })
    }
}

/// Hypothesis width for the scalar construction: 16/(eps sqrt(s)) +
/// 16 ln(2/delta), rounded up. Logs are natural throughout.
pub fn lemma1_width_bound(eps: f64, delta: f64, s: usize) -> usize {
    (16.0 / (eps * (s as f64).sqrt()) + 16.0 * (2.0 / delta).ln()).ceil() as usize
}

/// Hypothesis width for the inner-product construction.
pub fn lemma2_width_bound(eps: f64, delta: f64, s: usize) -> usize {
    let s_f = s as f64;
    s * (16.0 * s_f.sqrt() / eps + 16.0 * (2.0 * s_f / delta).ln()).ceil() as usize
}

/// Hypothesis width for the matrix-stage construction.
pub fn lemma3_width_bound(eps: f64, delta: f64, n: usize, s: usize) -> usize {
    let ns = (n * s) as f64;
    n * s * (16.0 * ns.sqrt() / eps + 16.0 * (2.0 * ns / delta).ln()).ceil() as usize
}

/// Hypothesis width for the composed deep construction.
pub fn theorem_width_bound(eps: f64, delta: f64, n: usize, s: usize, ell: usize) -> usize {
    let ns = (n * s) as f64;
    let l = ell as f64;
    n * s * (32.0 * l * ns.sqrt() / eps + 16.0 * (2.0 * ns * l / delta).ln()).ceil() as usize
}

/// Masks for one two-layer stage. `m_tilde` is `k x n_out` over the
/// second-layer draw, `m` is `k x d` over the first-layer draw, and
/// `gain` is the scalar multiplying the masked first layer.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct StageMasks {
    pub k: usize,
    pub d: usize,
    pub n_out: usize,
    pub gain: f64,
    pub m_tilde: Vec<u8>,
    pub m: Vec<u8>,
}

impl StageMasks {
    fn zeros(k: usize, d: usize, n_out: usize, gain: f64) -> Self {
        StageMasks {
            k,
            d,
            n_out,
            gain,
            m_tilde: vec![0; k * n_out],
            m: vec![0; k * d],
        }
    }

    pub fn mask_count(&self) -> usize {
        self.m.iter().filter(|&&b| b != 0).count()
    }

    pub fn tilde_count(&self) -> usize {
        self.m_tilde.iter().filter(|&&b| b != 0).count()
    }

    pub fn max_row_support(&self) -> usize {
        (0..self.k)
            .map(|j| {
                self.m[j * self.d..(j + 1) * self.d]
                    .iter()
                    .filter(|&&b| b != 0)
                    .count()
            })
            .max()
            .unwrap_or(0)
    }
}

/// Outcome of a construction attempt.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ExistenceCert {
    pub success: bool,
    pub stages: Vec<StageMasks>,
    /// Every repetition count chosen by the scalar construction, in
    /// construction order.
    pub constructed_c: Vec<usize>,
    /// Exact per-component errors: one entry per scalar target, per
    /// nonzero coordinate, per output row, or per deep stage.
    pub component_errors: Vec<f64>,
    /// Analytic where the construction is affine, measured by sampling
    /// for matrix and deep targets; absent on failure.
    pub measured_error: Option<f64>,
    /// Total nonzero count over all first-layer masks.
    pub sparsity: usize,
    pub width_bound_used: usize,
    /// Error-measurement sample count; 0 when the error is analytic.
    pub samples: usize,
    pub notes: Vec<String>,
}

/// Evaluates one masked stage: y = (m_tilde . u)^T relu(gain (m . b) x),
/// with an optional outer relu.
pub fn stage_response(
    draw: &StageDraw,
    masks: &StageMasks,
    x: &[f64],
    outer_relu: bool,
) -> Vec<f64> {
    assert_eq!(x.len(), masks.d, "stage input length");
    let (k, d, n_out) = (masks.k, masks.d, masks.n_out);
    let mut hidden = vec![0.0f64; k];
    for j in 0..k {
        let mut acc = 0.0;
        for c in 0..d {
            if masks.m[j * d + c] != 0 {
                acc += draw.b[j * d + c] as f64 * x[c];
            }
        }
        hidden[j] = (masks.gain * acc).max(0.0);
    }
    let mut y = vec![0.0f64; n_out];
    for t in 0..n_out {
        let mut acc = 0.0;
        for j in 0..k {
            if masks.m_tilde[j * n_out + t] != 0 {
                acc += draw.u[j * n_out + t] as f64 * hidden[j];
            }
        }
        y[t] = if outer_relu { acc.max(0.0) } else { acc };
    }
    y
}

/// Row choices for one scalar target inside a row block.
struct ScalarPick {
    /// Block-local rows with (u, b) = (+1, sgn) in the lower half and
    /// (-1, -sgn) in the upper half.
    rows: Vec<usize>,
    c: usize,
    error: f64,
    success: bool,
    zero_case: bool,
}

/// Scalar selection: approximate alpha * x_i with c repetitions of
/// gain-scaled +-x_i pairs. `u` and `b_col` are block-local columns.
fn pick_scalar(u: &[i8], b_col: &[i8], alpha: f64, eps: f64) -> ScalarPick {
    if alpha.abs() <= eps {
        return ScalarPick {
            rows: Vec::new(),
            c: 0,
            error: alpha.abs(),
            success: true,
            zero_case: true,
        };
    }
    let c = (alpha.abs() / eps).floor() as usize;
    let half = u.len() / 2;
    let sgn: i8 = if alpha >= 0.0 { 1 } else { -1 };
    let pos: Vec<usize> = (0..half)
        .filter(|&j| u[j] == 1 && b_col[j] == sgn)
        .take(c)
        .collect();
    let neg: Vec<usize> = (half..u.len())
        .filter(|&j| u[j] == -1 && b_col[j] == -sgn)
        .take(c)
        .collect();
    let success = pos.len() == c && neg.len() == c;
    let mut rows = pos;
    rows.extend(neg);
    ScalarPick {
        rows,
        c,
        error: (c as f64 * eps - alpha.abs()).abs(),
        success,
        zero_case: false,
    }
}

/// Inner-product construction over one row block: coordinate i of the
/// target gets the i-th of `s` sub-blocks at budget eps/s.
struct BlockBuild {
    /// Block-local masks, n_out = 1.
    m_tilde: Vec<u8>,
    m: Vec<u8>,
    c_values: Vec<usize>,
    component_errors: Vec<f64>,
    error_sum: f64,
    success: bool,
    notes: Vec<String>,
}

fn build_inner_product(
    u: &[i8],
    b: &[i8],
    w: &[f64],
    s: usize,
    eps: f64,
) -> BlockBuild {
    let kb = u.len();
    let d = w.len();
    debug_assert_eq!(b.len(), kb * d);
    let sub = kb / s;
    let eps_scalar = eps / s as f64;
    let mut out = BlockBuild {
        m_tilde: vec![0; kb],
        m: vec![0; kb * d],
        c_values: Vec::new(),
        component_errors: Vec::new(),
        error_sum: 0.0,
        success: true,
        notes: Vec::new(),
    };
    if kb % s != 0 {
        out.notes.push(format!("excess rows masked: {} of {kb}", kb % s));
    }
    let nonzero: Vec<usize> = (0..d).filter(|&i| w[i] != 0.0).collect();
    for (bi, &coord) in nonzero.iter().enumerate() {
        let rows = bi * sub..(bi + 1) * sub;
        let u_sub: Vec<i8> = u[rows.clone()].to_vec();
        let b_sub: Vec<i8> = rows.clone().map(|j| b[j * d + coord]).collect();
        let pick = pick_scalar(&u_sub, &b_sub, w[coord], eps_scalar);
        if !pick.success {
            out.success = false;
            out.notes.push(format!("coordinate {coord}: row deficit"));
            continue;
        }
        if !pick.zero_case {
            out.c_values.push(pick.c);
            for &local in &pick.rows {
                let j = bi * sub + local;
                out.m_tilde[j] = 1;
                out.m[j * d + coord] = 1;
            }
        } else {
            out.notes.push(format!("coordinate {coord}: zero-mask base case"));
        }
        out.component_errors.push(pick.error);
        out.error_sum += pick.error;
    }
    out
}

fn finish_failure(mut cert: ExistenceCert) -> ExistenceCert {
    cert.success = false;
    cert.measured_error = None;
    for stage in &mut cert.stages {
        stage.m_tilde.iter_mut().for_each(|b| *b = 0);
        stage.m.iter_mut().for_each(|b| *b = 0);
    }
    cert.sparsity = 0;
    cert
}

/// Checks the mask-count equality and row-support invariants that every
/// statement asserts.
fn assert_stage_invariants(stage: &StageMasks) {
    assert_eq!(
        stage.tilde_count(),
        stage.mask_count(),
        "second-layer and first-layer mask counts must match"
    );
    assert!(
        stage.max_row_support() <= 1,
        "each first-layer row may select at most one input"
    );
}

/// Approximates alpha * x[coord] with a two-layer binary subnetwork at
/// gain eps. On success the response is exactly c * eps * sgn(alpha) *
/// x[coord] and the analytic error is |c eps - |alpha||.
pub fn lemma1_construct(inst: &ExistenceInstance) -> Result<ExistenceCert> {
    let ExistenceTarget::Scalar { alpha, coord, dim } = inst.target else {
        return Err(Error::invalid("target", "scalar construction needs a scalar target"));
    };
    let bound = lemma1_width_bound(inst.eps, inst.delta, inst.s);
    if inst.k < bound {
        return Err(Error::WidthHypothesis(format!(
            "k={} below required {bound}",
            inst.k
        )));
    }
    let draw = &inst.draws[0];
    let b_col: Vec<i8> = (0..inst.k).map(|j| draw.b[j * dim + coord]).collect();
    let pick = pick_scalar(&draw.u, &b_col, alpha, inst.eps);

    let mut cert = ExistenceCert {
        success: pick.success,
        stages: vec![StageMasks::zeros(inst.k, dim, 1, inst.eps)],
        constructed_c: Vec::new(),
        component_errors: vec![pick.error],
        measured_error: Some(pick.error),
        sparsity: 0,
        width_bound_used: bound,
        samples: 0,
        notes: Vec::new(),
    };
    if inst.k % 2 != 0 {
        cert.notes.push("odd k: halves floored".into());
    }
    if !pick.success {
        cert.notes.push("row deficit in S+ or S-".into());
        return Ok(finish_failure(cert));
    }
    if pick.zero_case {
        cert.notes.push("zero-mask base case".into());
        return Ok(cert);
    }

    cert.constructed_c.push(pick.c);
    let stage = &mut cert.stages[0];
    for &j in &pick.rows {
        stage.m_tilde[j] = 1;
        stage.m[j * dim + coord] = 1;
    }
    cert.sparsity = 2 * pick.c;
    assert_stage_invariants(&cert.stages[0]);
    assert!(
        cert.sparsity as f64 <= 2.0 / (inst.eps * (inst.s as f64).sqrt()) + BOUND_TOL,
        "sparsity bound violated"
    );

    // The response must equal c * eps * sgn(alpha) * x[coord] exactly,
    // via the identity relu(a) - relu(-a) = a.
    let expected_slope = pick.c as f64 * inst.eps * alpha.signum();
    let mut probe_rng = ChaCha20Rng::seed_from_u64(inst.seed ^ 0x50_52_4f_42);
    for probe in 0..3 {
        let x: Vec<f64> = match probe {
            0 => vec![1.0; dim],
            1 => (0..dim).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect(),
            _ => (0..dim).map(|_| probe_rng.gen_range(-1.0..1.0)).collect(),
        };
        let got = stage_response(draw, &cert.stages[0], &x, false)[0];
        let want = expected_slope * x[coord];
        assert!(
            (got - want).abs() <= EXACT_TOL * (1.0 + want.abs()),
            "construction must reproduce its slope exactly: got {got}, want {want}"
        );
    }
    Ok(cert)
}

/// Approximates <w, x> by giving each nonzero coordinate its own row
/// block at budget eps/s. The total analytic error is the sum of the
/// per-coordinate errors, each maximized by an independent coordinate
/// of a corner point.
pub fn lemma2_construct(inst: &ExistenceInstance) -> Result<ExistenceCert> {
    let ExistenceTarget::Vector { w } = &inst.target else {
        return Err(Error::invalid("target", "inner-product construction needs a vector target"));
    };
    let bound = lemma2_width_bound(inst.eps, inst.delta, inst.s);
    if inst.k < bound {
        return Err(Error::WidthHypothesis(format!(
            "k={} below required {bound}",
            inst.k
        )));
    }
    let d = w.len();
    let draw = &inst.draws[0];
    let build = build_inner_product(&draw.u, &draw.b, w, inst.s, inst.eps);
    let gain = inst.eps / inst.s as f64;

    let mut stage = StageMasks::zeros(inst.k, d, 1, gain);
    stage.m_tilde = build.m_tilde;
    stage.m = build.m;
    let sparsity = stage.mask_count();
    let mut cert = ExistenceCert {
        success: build.success,
        stages: vec![stage],
        constructed_c: build.c_values,
        component_errors: build.component_errors,
        measured_error: Some(build.error_sum),
        sparsity,
        width_bound_used: bound,
        samples: 0,
        notes: build.notes,
    };
    if !build.success {
        return Ok(finish_failure(cert));
    }
    assert_stage_invariants(&cert.stages[0]);
    let s_f = inst.s as f64;
    assert!(
        cert.sparsity as f64 <= 2.0 * s_f * s_f.sqrt() / inst.eps + BOUND_TOL,
        "sparsity bound violated"
    );
    cert.notes.push("analytic error (affine construction)".into());
    Ok(cert)
}

fn sample_linf(rng: &mut ChaCha20Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn sample_l2_ball(rng: &mut ChaCha20Rng, d: usize) -> Vec<f64> {
    let mut x: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let radius = rng.gen::<f64>().powf(1.0 / d as f64);
    x.iter_mut().for_each(|v| *v *= radius / norm);
    x
}

/// Builds the matrix-stage masks: output row i gets the i-th of n row
/// blocks, each an inner-product construction at budget eps/sqrt(n).
fn build_matrix_stage(
    draw: &StageDraw,
    w: &[f64],
    n: usize,
    d: usize,
    s: usize,
    k: usize,
    eps: f64,
) -> (StageMasks, BlockBuild) {
    let kb = k / n;
    let eps_row = eps / (n as f64).sqrt();
    let gain = eps_row / s as f64;
    let mut stage = StageMasks::zeros(k, d, n, gain);
    let mut combined = BlockBuild {
        m_tilde: Vec::new(),
        m: Vec::new(),
        c_values: Vec::new(),
        component_errors: Vec::new(),
        error_sum: 0.0,
        success: true,
        notes: Vec::new(),
    };
    if k % n != 0 {
        combined.notes.push(format!("excess rows masked: {} of {k}", k % n));
    }
    for i in 0..n {
        let rows = i * kb..(i + 1) * kb;
        let u_col: Vec<i8> = rows.clone().map(|j| draw.u[j * n + i]).collect();
        let b_block: Vec<i8> = draw.b[rows.start * d..rows.end * d].to_vec();
        let block = build_inner_product(&u_col, &b_block, &w[i * d..(i + 1) * d], s, eps_row);
        for (local, &bit) in block.m_tilde.iter().enumerate() {
            stage.m_tilde[(rows.start + local) * n + i] = bit;
        }
        stage.m[rows.start * d..rows.end * d].copy_from_slice(&block.m);
        combined.c_values.extend(block.c_values);
        // One exact component per output row: the sum over its
        // coordinates.
        combined.component_errors.push(block.error_sum);
        combined.success &= block.success;
        combined
            .notes
            .extend(block.notes.into_iter().map(|n_| format!("row {i}: {n_}")));
    }
    (stage, combined)
}

/// Approximates x -> relu(W x) and measures the l2 error over sampled
/// points with every coordinate in [-1, 1].
pub fn lemma3_construct(inst: &ExistenceInstance) -> Result<ExistenceCert> {
    let ExistenceTarget::Matrix { w, rows: n, cols: d } = &inst.target else {
        return Err(Error::invalid("target", "matrix construction needs a matrix target"));
    };
    let (n, d) = (*n, *d);
    let bound = lemma3_width_bound(inst.eps, inst.delta, n, inst.s);
    if inst.k < bound {
        return Err(Error::WidthHypothesis(format!(
            "k={} below required {bound}",
            inst.k
        )));
    }
    let draw = &inst.draws[0];
    let (stage, build) = build_matrix_stage(draw, w, n, d, inst.s, inst.k, inst.eps);
    let sparsity = stage.mask_count();
    let mut cert = ExistenceCert {
        success: build.success,
        stages: vec![stage],
        constructed_c: build.c_values,
        component_errors: build.component_errors,
        measured_error: None,
        sparsity,
        width_bound_used: bound,
        samples: L2_ERROR_SAMPLES,
        notes: build.notes,
    };
    if !build.success {
        return Ok(finish_failure(cert));
    }
    assert_stage_invariants(&cert.stages[0]);
    let ns = (n * inst.s) as f64;
    assert!(
        cert.sparsity as f64 <= 2.0 * ns * ns.sqrt() / inst.eps + BOUND_TOL,
        "sparsity bound violated"
    );

    let mut rng = ChaCha20Rng::seed_from_u64(inst.seed ^ 0x53_41_4d_50);
    let mut worst: f64 = 0.0;
    for _ in 0..L2_ERROR_SAMPLES {
        let x = sample_linf(&mut rng, d);
        let got = stage_response(draw, &cert.stages[0], &x, true);
        let err: f64 = (0..n)
            .map(|i| {
                let target: f64 =
                    (0..d).map(|c| w[i * d + c] * x[c]).sum::<f64>().max(0.0);
                (got[i] - target).powi(2)
            })
            .sum::<f64>()
            .sqrt();
        worst = worst.max(err);
    }
    cert.measured_error = Some(worst);
    Ok(cert)
}

/// Approximates a depth-l relu network with a depth-2l binary network:
/// stage i is a matrix-stage construction at budget eps/(2l), with the
/// final stage left linear. The error is measured over sampled points
/// with l2 norm at most 1.
pub fn theorem_construct(inst: &ExistenceInstance) -> Result<ExistenceCert> {
    let ExistenceTarget::Deep { stages: targets } = &inst.target else {
        return Err(Error::invalid("target", "deep construction needs a deep target"));
    };
    let ell = targets.len();
    let n = targets.iter().map(|t| t.rows).max().expect("nonempty");
    let bound = theorem_width_bound(inst.eps, inst.delta, n, inst.s, ell);
    if inst.k < bound {
        return Err(Error::WidthHypothesis(format!(
            "k={} below required {bound}",
            inst.k
        )));
    }
    let eps_stage = inst.eps / (2.0 * ell as f64);

    let mut cert = ExistenceCert {
        success: true,
        stages: Vec::with_capacity(ell),
        constructed_c: Vec::new(),
        component_errors: Vec::new(),
        measured_error: None,
        sparsity: 0,
        width_bound_used: bound,
        samples: DEEP_ERROR_SAMPLES,
        notes: Vec::new(),
    };
    for (i, target) in targets.iter().enumerate() {
        let (stage, build) = build_matrix_stage(
            &inst.draws[i],
            &target.w,
            target.rows,
            target.cols,
            inst.s,
            inst.k,
            eps_stage,
        );
        cert.success &= build.success;
        cert.constructed_c.extend(build.c_values);
        // Stage-level l2 bound from the exact per-row errors.
        let stage_bound = build
            .component_errors
            .iter()
            .map(|e| e * e)
            .sum::<f64>()
            .sqrt();
        cert.component_errors.push(stage_bound);
        cert.sparsity += stage.mask_count();
        cert.notes
            .extend(build.notes.into_iter().map(|n_| format!("stage {i}: {n_}")));
        cert.stages.push(stage);
    }
    if !cert.success {
        return Ok(finish_failure(cert));
    }
    for stage in &cert.stages {
        assert_stage_invariants(stage);
    }
    let ns = (n * inst.s) as f64;
    let l = ell as f64;
    assert!(
        cert.sparsity as f64 <= 4.0 * ns * l * l * ns.sqrt() / inst.eps + BOUND_TOL,
        "sparsity bound violated"
    );

    let d0 = targets[0].cols;
    let mut rng = ChaCha20Rng::seed_from_u64(inst.seed ^ 0x44_45_45_50);
    let mut worst: f64 = 0.0;
    for _ in 0..DEEP_ERROR_SAMPLES {
        let x = sample_l2_ball(&mut rng, d0);
        let mut g = x.clone();
        let mut f = x.clone();
        for (i, target) in targets.iter().enumerate() {
            let last = i + 1 == ell;
            g = stage_response(&inst.draws[i], &cert.stages[i], &g, !last);
            let mut next = vec![0.0f64; target.rows];
            for r in 0..target.rows {
                let acc: f64 = (0..target.cols)
                    .map(|c| target.w[r * target.cols + c] * f[c])
                    .sum();
                next[r] = if last { acc } else { acc.max(0.0) };
            }
            f = next;
        }
        let err: f64 = g
            .iter()
            .zip(&f)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        worst = worst.max(err);
    }
    cert.measured_error = Some(worst);
    Ok(cert)
}

/// Families of random targets for the failure-rate study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum TargetFamily {
    Scalar { s: usize, dim: usize },
    Vector { s: usize, dim: usize },
    Deep { depth: usize, n: usize, s: usize },
}

/// One row of the failure-rate table.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct FailureRateRow {
    pub multiplier: f64,
    pub k: usize,
    pub trials: usize,
    pub failures: usize,
    pub rate: f64,
    pub delta: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// 95% Wilson interval for a binomial proportion.
fn wilson_bounds(failures: usize, trials: usize) -> (f64, f64) {
    let z = 1.959964;
    let t = trials as f64;
    let p = failures as f64 / t;
    let z2 = z * z;
    let denom = 1.0 + z2 / t;
    let center = p + z2 / (2.0 * t);
    let spread = z * (p * (1.0 - p) / t + z2 / (4.0 * t * t)).sqrt();
    (
        ((center - spread) / denom).max(0.0),
        ((center + spread) / denom).min(1.0),
    )
}

fn random_target(family: TargetFamily, rng: &mut ChaCha20Rng) -> ExistenceTarget {
    match family {
        TargetFamily::Scalar { s, dim } => {
            let limit = 1.0 / (s as f64).sqrt();
            ExistenceTarget::Scalar {
                alpha: rng.gen_range(-limit..=limit),
                coord: rng.gen_range(0..dim),
                dim,
            }
        }
        TargetFamily::Vector { s, dim } => {
            let limit = 1.0 / (s as f64).sqrt();
            let mut w = vec![0.0f64; dim];
            let mut coords: Vec<usize> = (0..dim).collect();
            for i in 0..s {
                let pick = rng.gen_range(i..dim);
                coords.swap(i, pick);
                w[coords[i]] = rng.gen_range(-limit..=limit);
            }
            ExistenceTarget::Vector { w }
        }
        TargetFamily::Deep { depth, n, s } => {
            let limit = 1.0 / (s.max(n) as f64).sqrt();
            let stages = (0..depth)
                .map(|i| {
                    let rows = if i + 1 == depth { 1 } else { n };
                    let cols = n;
                    let mut w = vec![0.0f64; rows * cols];
                    for r in 0..rows {
                        let mut coords: Vec<usize> = (0..cols).collect();
                        for j in 0..s.min(cols) {
                            let pick = rng.gen_range(j..cols);
                            coords.swap(j, pick);
                            w[r * cols + coords[j]] = rng.gen_range(-limit..=limit);
                        }
                    }
                    let sigma = spectral_norm(&w, rows, cols);
                    if sigma > 1.0 {
                        w.iter_mut().for_each(|v| *v /= sigma + BOUND_TOL);
                    }
                    TargetLayer { w, rows, cols }
                })
                .collect();
            ExistenceTarget::Deep { stages }
        }
    }
}

fn study_eps_delta_construct(
    family: TargetFamily,
    eps: f64,
    delta: f64,
    k: usize,
    seed: u64,
) -> Result<bool> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let target = random_target(family, &mut rng);
    let (s, runner): (usize, fn(&ExistenceInstance) -> Result<ExistenceCert>) = match family {
        TargetFamily::Scalar { s, .. } => (s, lemma1_construct),
        TargetFamily::Vector { s, .. } => (s, lemma2_construct),
        TargetFamily::Deep { s, .. } => (s, theorem_construct),
    };
    let inst = ExistenceInstance::sample(target, eps, delta, s, k, seed)?;
    Ok(runner(&inst)?.success)
}

/// Runs `trials` random constructions per width multiplier and reports
/// empirical failure rates against delta. Multipliers below 1 violate
/// the hypothesis and are reported as certain failure.
pub fn failure_rate_study(
    family: TargetFamily,
    eps: f64,
    delta: f64,
    k_multipliers: &[f64],
    trials: usize,
    seed: u64,
) -> Result<Vec<FailureRateRow>> {
    if trials == 0 {
        return Ok(Vec::new());
    }
    let bound = match family {
        TargetFamily::Scalar { s, .. } => lemma1_width_bound(eps, delta, s),
        TargetFamily::Vector { s, .. } => lemma2_width_bound(eps, delta, s),
        TargetFamily::Deep { depth, n, s } => theorem_width_bound(eps, delta, n, s, depth),
    };
    k_multipliers
        .iter()
        .map(|&m| {
            let k = ((m * bound as f64).ceil() as usize).max(2);
            let failures = (0..trials)
                .into_par_iter()
                .map(|t| {
                    let trial_seed = seed
                        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                        .wrapping_add(t as u64);
                    match study_eps_delta_construct(family, eps, delta, k, trial_seed) {
                        Ok(success) => usize::from(!success),
                        Err(Error::WidthHypothesis(_)) => 1,
                        Err(e) => panic!("study trial failed: {e}"),
                    }
                })
                .sum::<usize>();
            let (ci_low, ci_high) = wilson_bounds(failures, trials);
            Ok(FailureRateRow {
                multiplier: m,
                k,
                trials,
                failures,
                rate: failures as f64 / trials as f64,
                delta,
                ci_low,
                ci_high,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn scalar_instance(alpha: f64, eps: f64, delta: f64, s: usize, seed: u64) -> ExistenceInstance {
        let k = lemma1_width_bound(eps, delta, s);
        let k = k + k % 2;
        ExistenceInstance::sample(
            ExistenceTarget::Scalar { alpha, coord: 2, dim: 5 },
            eps,
            delta,
            s,
            k,
            seed,
        )
        .unwrap()
    }

    #[test]
    fn scalar_example_picks_two_repetitions() {
        // A seed whose draw succeeds; failures are the delta event.
        let inst = scalar_instance(0.7, 0.25, 0.3, 1, 3);
        let cert = lemma1_construct(&inst).unwrap();
        assert!(cert.success);
        assert_eq!(cert.constructed_c, vec![2]);
        assert_abs_diff_eq!(cert.measured_error.unwrap(), 0.2, epsilon = 1e-12);
        assert_eq!(cert.sparsity, 4);
        assert_eq!(cert.stages[0].max_row_support(), 1);
        assert_eq!(cert.stages[0].tilde_count(), cert.stages[0].mask_count());
    }

    #[test]
    fn scalar_below_threshold_uses_zero_mask() {
        let inst = scalar_instance(0.1, 0.25, 0.3, 1, 5);
        let cert = lemma1_construct(&inst).unwrap();
        assert!(cert.success);
        assert!(cert.constructed_c.is_empty());
        assert_eq!(cert.sparsity, 0);
        assert_abs_diff_eq!(cert.measured_error.unwrap(), 0.1, epsilon = 1e-12);
        assert!(cert.stages[0].m.iter().all(|&b| b == 0));
    }

    #[test]
    fn scalar_is_exact_and_bounded_across_instances() {
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let mut successes = 0;
        for trial in 0..100 {
            let s = rng.gen_range(1..4usize);
            let eps = rng.gen_range(0.1..0.6);
            let alpha = rng.gen_range(-1.0..1.0) / (s as f64).sqrt();
            let inst = scalar_instance(alpha, eps, 0.2, s, 1000 + trial);
            let cert = lemma1_construct(&inst).unwrap();
            if !cert.success {
                continue;
            }
            successes += 1;
            let err = cert.measured_error.unwrap();
            assert!(err <= eps + 1e-12, "error {err} above budget {eps}");
            assert!(cert.sparsity as f64 <= 2.0 / (eps * (s as f64).sqrt()) + 1e-9);
            // Independent check of the exact slope on a fresh point.
            let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let got = stage_response(&inst.draws[0], &cert.stages[0], &x, false)[0];
            let c = cert.constructed_c.first().copied().unwrap_or(0) as f64;
            let want = c * eps * alpha.signum() * x[2];
            assert!((got - want).abs() <= 1e-12 * (1.0 + want.abs()));
        }
        assert!(successes >= 80, "only {successes}/100 draws succeeded");
    }

    #[test]
    fn width_below_hypothesis_is_an_error_not_a_failure() {
        let mut inst = scalar_instance(0.7, 0.25, 0.3, 1, 3);
        inst.k = inst.width_bound() - 1;
        let err = lemma1_construct(&inst).unwrap_err();
        assert!(matches!(err, Error::WidthHypothesis(_)), "got {err}");
    }

    impl ExistenceInstance {
        fn width_bound(&self) -> usize {
            lemma1_width_bound(self.eps, self.delta, self.s)
        }
    }

    #[test]
    fn row_deficit_reports_failure_without_error() {
        // All-(-1) second-layer draw: S+ must be empty.
        let mut inst = scalar_instance(0.7, 0.25, 0.3, 1, 3);
        inst.draws[0].u.iter_mut().for_each(|v| *v = -1);
        let cert = lemma1_construct(&inst).unwrap();
        assert!(!cert.success);
        assert!(cert.measured_error.is_none());
        assert_eq!(cert.sparsity, 0);
    }

    #[test]
    fn single_nonzero_vector_reduces_to_scalar_construction() {
        let (eps, delta, s, seed) = (0.25, 0.3, 1, 11);
        let k = lemma2_width_bound(eps, delta, s);
        let mut w = vec![0.0; 5];
        w[2] = 0.7;
        let vec_inst =
            ExistenceInstance::sample(ExistenceTarget::Vector { w }, eps, delta, s, k, seed)
                .unwrap();
        let scalar_inst = ExistenceInstance::sample(
            ExistenceTarget::Scalar { alpha: 0.7, coord: 2, dim: 5 },
            eps,
            delta,
            s,
            k,
            seed,
        )
        .unwrap();
        let a = lemma2_construct(&vec_inst).unwrap();
        let b = lemma1_construct(&scalar_inst).unwrap();
        assert_eq!(a.success, b.success);
        assert_eq!(a.stages[0].m, b.stages[0].m);
        assert_eq!(a.stages[0].m_tilde, b.stages[0].m_tilde);
        assert_eq!(a.constructed_c, b.constructed_c);
        assert_eq!(a.stages[0].gain, b.stages[0].gain);
    }

    #[test]
    fn zero_vector_gives_zero_masks_and_zero_error() {
        let (eps, delta, s) = (0.5, 0.3, 2);
        let k = lemma2_width_bound(eps, delta, s);
        let inst = ExistenceInstance::sample(
            ExistenceTarget::Vector { w: vec![0.0; 4] },
            eps,
            delta,
            s,
            k,
            7,
        )
        .unwrap();
        let cert = lemma2_construct(&inst).unwrap();
        assert!(cert.success);
        assert_eq!(cert.sparsity, 0);
        assert_abs_diff_eq!(cert.measured_error.unwrap(), 0.0);
    }

    #[test]
    fn vector_corner_sup_matches_analytic_error() {
        let (eps, delta, s, d) = (0.5, 0.3, 2usize, 6usize);
        let k = lemma2_width_bound(eps, delta, s);
        let limit = 1.0 / (s as f64).sqrt();
        let mut rng = ChaCha20Rng::seed_from_u64(23);
        let mut checked = 0;
        for seed in 0..20u64 {
            let mut w = vec![0.0f64; d];
            let (i, j) = (rng.gen_range(0..d), rng.gen_range(0..d - 1));
            let j = if j >= i { j + 1 } else { j };
            w[i] = rng.gen_range(-limit..limit);
            w[j] = rng.gen_range(-limit..limit);
            let inst = ExistenceInstance::sample(
                ExistenceTarget::Vector { w: w.clone() },
                eps,
                delta,
                s,
                k,
                800 + seed,
            )
            .unwrap();
            let cert = lemma2_construct(&inst).unwrap();
            if !cert.success {
                continue;
            }
            checked += 1;
            // Exhaustive corner sup as an independent oracle.
            let mut sup: f64 = 0.0;
            for bits in 0..1u32 << d {
                let x: Vec<f64> = (0..d)
                    .map(|c| if bits >> c & 1 == 1 { 1.0 } else { -1.0 })
                    .collect();
                let g = stage_response(&inst.draws[0], &cert.stages[0], &x, false)[0];
                let target: f64 = w.iter().zip(&x).map(|(a, b)| a * b).sum();
                sup = sup.max((g - target).abs());
            }
            let analytic = cert.measured_error.unwrap();
            assert_abs_diff_eq!(sup, analytic, epsilon = 1e-10);
            assert!(sup <= eps + 1e-12);
        }
        assert!(checked >= 10, "only {checked}/20 draws succeeded");
    }

    #[test]
    fn single_row_matrix_reduces_to_vector_construction() {
        let (eps, delta, s, d) = (0.5, 0.3, 2usize, 4usize);
        let k = lemma3_width_bound(eps, delta, 1, s);
        let w = vec![0.3, 0.0, -0.5, 0.0];
        let mat_inst = ExistenceInstance::sample(
            ExistenceTarget::Matrix { w: w.clone(), rows: 1, cols: d },
            eps,
            delta,
            s,
            k,
            31,
        )
        .unwrap();
        let vec_inst =
            ExistenceInstance::sample(ExistenceTarget::Vector { w }, eps, delta, s, k, 31)
                .unwrap();
        let a = lemma3_construct(&mat_inst).unwrap();
        let b = lemma2_construct(&vec_inst).unwrap();
        assert_eq!(a.success, b.success);
        assert_eq!(a.stages[0].m, b.stages[0].m);
        assert_eq!(a.stages[0].m_tilde, b.stages[0].m_tilde);
        assert_eq!(a.stages[0].gain, b.stages[0].gain);
    }

    #[test]
    fn zero_matrix_measures_zero_error() {
        let (eps, delta, s) = (0.5, 0.3, 1usize);
        let k = lemma3_width_bound(eps, delta, 2, s);
        let inst = ExistenceInstance::sample(
            ExistenceTarget::Matrix { w: vec![0.0; 6], rows: 2, cols: 3 },
            eps,
            delta,
            s,
            k,
            37,
        )
        .unwrap();
        let cert = lemma3_construct(&inst).unwrap();
        assert!(cert.success);
        assert_abs_diff_eq!(cert.measured_error.unwrap(), 0.0);
        assert_eq!(cert.samples, L2_ERROR_SAMPLES);
    }

    #[test]
    fn matrix_error_stays_under_row_budget() {
        let (eps, delta, s, n, d) = (0.5, 0.3, 2usize, 2usize, 5usize);
        let k = lemma3_width_bound(eps, delta, n, s);
        let limit = 1.0 / (s as f64).sqrt();
        let mut rng = ChaCha20Rng::seed_from_u64(41);
        let mut checked = 0;
        for seed in 0..10u64 {
            let mut w = vec![0.0f64; n * d];
            for r in 0..n {
                for _ in 0..s {
                    w[r * d + rng.gen_range(0..d)] = rng.gen_range(-limit..limit);
                }
            }
            let inst = ExistenceInstance::sample(
                ExistenceTarget::Matrix { w, rows: n, cols: d },
                eps,
                delta,
                s,
                k,
                900 + seed,
            )
            .unwrap();
            let cert = lemma3_construct(&inst).unwrap();
            if !cert.success {
                continue;
            }
            checked += 1;
            // Outer relu is 1-Lipschitz, so the sampled l2 error cannot
            // exceed the l2 combination of the exact row errors.
            let bound: f64 = cert
                .component_errors
                .iter()
                .map(|e| e * e)
                .sum::<f64>()
                .sqrt();
            let measured = cert.measured_error.unwrap();
            assert!(
                measured <= bound + 1e-10,
                "measured {measured} above row budget {bound}"
            );
            assert!(measured <= eps + 1e-12);
        }
        assert!(checked >= 5, "only {checked}/10 draws succeeded");
    }

    fn identity_like_deep(n: usize, scale: f64) -> ExistenceTarget {
        // Two stages at row support 1: scaled identity, then a single
        // coordinate readout.
        let mut w1 = vec![0.0f64; n * n];
        for i in 0..n {
            w1[i * n + i] = scale;
        }
        let mut w2 = vec![0.0f64; n];
        w2[0] = scale;
        ExistenceTarget::Deep {
            stages: vec![
                TargetLayer { w: w1, rows: n, cols: n },
                TargetLayer { w: w2, rows: 1, cols: n },
            ],
        }
    }

    #[test]
    fn single_stage_deep_equals_halved_budget_matrix_stage() {
        let (eps, delta, s, d) = (0.5, 0.3, 2usize, 2usize);
        let target = TargetLayer { w: vec![0.6, -0.4], rows: 1, cols: d };
        let k = theorem_width_bound(eps, delta, 1, s, 1);
        assert_eq!(k, lemma3_width_bound(eps / 2.0, delta, 1, s));
        let deep_inst = ExistenceInstance::sample(
            ExistenceTarget::Deep { stages: vec![target.clone()] },
            eps,
            delta,
            s,
            k,
            43,
        )
        .unwrap();
        let mat_inst = ExistenceInstance::sample(
            ExistenceTarget::Matrix { w: target.w, rows: 1, cols: d },
            eps / 2.0,
            delta,
            s,
            k,
            43,
        )
        .unwrap();
        let a = theorem_construct(&deep_inst).unwrap();
        let b = lemma3_construct(&mat_inst).unwrap();
        assert_eq!(a.stages.len(), 1);
        assert_eq!(a.stages[0].m, b.stages[0].m);
        assert_eq!(a.stages[0].m_tilde, b.stages[0].m_tilde);
        assert_eq!(a.stages[0].gain, b.stages[0].gain);
    }

    #[test]
    fn deep_construction_succeeds_and_stays_in_budget() {
        let (eps, delta, s, n, ell) = (0.5, 0.3, 1usize, 2usize, 2usize);
        let k = theorem_width_bound(eps, delta, n, s, ell);
        let mut successes = 0;
        for seed in 0..25u64 {
            let inst = ExistenceInstance::sample(
                identity_like_deep(n, 0.9),
                eps,
                delta,
                s,
                k,
                2000 + seed,
            )
            .unwrap();
            let cert = theorem_construct(&inst).unwrap();
            // Depth is two layers per stage, stages cover every target
            // layer.
            assert_eq!(cert.stages.len(), ell);
            if !cert.success {
                continue;
            }
            successes += 1;
            let measured = cert.measured_error.unwrap();
            assert!(measured <= eps + 1e-12, "error {measured} above {eps}");
            assert_eq!(cert.samples, DEEP_ERROR_SAMPLES);
            let ns = (n * s) as f64;
            assert!(
                cert.sparsity as f64
                    <= 4.0 * ns * (ell * ell) as f64 * ns.sqrt() / eps + 1e-9
            );
        }
        assert!(successes >= 18, "only {successes}/25 deep draws succeeded");
    }

    #[test]
    fn deep_target_validation_rejects_bad_hypotheses() {
        // Spectral norm 2 identity.
        let too_big = ExistenceTarget::Deep {
            stages: vec![TargetLayer { w: vec![2.0, 0.0, 0.0, 2.0], rows: 2, cols: 2 }],
        };
        assert!(ExistenceInstance::sample(too_big, 0.5, 0.3, 4, 100, 1).is_err());
        // Row support above the budget.
        let too_dense = ExistenceTarget::Deep {
            stages: vec![TargetLayer { w: vec![0.4, 0.4, 0.0, 0.4], rows: 2, cols: 2 }],
        };
        assert!(ExistenceInstance::sample(too_dense, 0.5, 0.3, 1, 100, 1).is_err());
    }

    #[test]
    fn failure_study_empty_when_no_trials() {
        let rows = failure_rate_study(
            TargetFamily::Scalar { s: 1, dim: 4 },
            0.25,
            0.3,
            &[1.0, 4.0],
            0,
            5,
        )
        .unwrap();
        assert!(rows.is_empty());
    }

    #[test]
    fn failure_study_rates_respect_delta() {
        let rows = failure_rate_study(
            TargetFamily::Scalar { s: 1, dim: 4 },
            0.25,
            0.3,
            &[1.0, 4.0],
            60,
            5,
        )
        .unwrap();
        assert_eq!(rows.len(), 2);
        // At the bound the guaranteed failure probability is delta; the
        // CI lower bound must not sit above it.
        assert!(rows[0].ci_low <= rows[0].delta, "{:?}", rows[0]);
        // Well above the bound failures all but vanish.
        assert!(rows[1].rate <= 0.05, "{:?}", rows[1]);
        assert!(rows[1].k >= 4 * rows[0].k - 4);
    }
}
