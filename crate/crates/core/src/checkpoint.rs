//! Checkpoint file format.
//!
//! A checkpoint stores everything needed to reproduce a found ticket:
//! the network spec, the seed (which regenerates the frozen weights),
//! per-layer gains, bit-packed sign and mask planes, scores, and
//! batch-norm state. A packed checkpoint drops the scores; the weights
//! are never stored in either form, because the seed regenerates them
//! bitwise.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic "MPTK" | version u32 | meta_len u32 | meta JSON
//! layer_count u32
//!   per layer: rows u32 | cols u32 | alpha f32 | has_scores u8
//!              [scores f32 x rows*cols]
//!              sign_words u64 x rows*ceil(cols/64)
//!              mask_words u64 x rows*ceil(cols/64)
//! bn_count u32
//!   per site: channels u32 | gamma, beta, mean, var (f32 x channels each)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::layers::{
    build_network, BatchNormState, BnPolicy, MaskedBinaryLayer, NetworkSpec, NetworkState,
};
use crate::packed::{pack, PackedLayer};
use crate::search::EpochReport;
use crate::tensor::MaskedParams;
use crate::{Error, Result};

pub const MAGIC: [u8; 4] = *b"MPTK";
pub const VERSION: u32 = 1;

/// JSON header of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    /// Hash of the run config that produced the ticket.
    pub config_hash: String,
    /// Seed that regenerates the frozen weights.
    pub seed: u64,
    /// Last completed search epoch; 0 for an untrained net.
    pub epoch: usize,
    /// True when scores were dropped at pack time.
    pub packed_only: bool,
    pub spec: NetworkSpec,
    /// Metrics of the final epoch, when the ticket came from a search.
    #[serde(default)]
    pub metrics: Option<EpochReport>,
}

impl CheckpointMeta {
    pub fn new(config_hash: String, seed: u64, spec: NetworkSpec) -> Self {
        CheckpointMeta {
            config_hash,
            seed,
            epoch: 0,
            packed_only: false,
            spec,
            metrics: None,
        }
    }
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_f32(out: &mut Vec<u8>, v: f32) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Serializes a checkpoint into a byte buffer.
pub fn encode_checkpoint(net: &NetworkState, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let meta_json = serde_json::to_vec(meta)?;
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    push_u32(&mut out, VERSION);
    push_u32(
        &mut out,
        u32::try_from(meta_json.len())
            .map_err(|_| Error::Config("checkpoint metadata exceeds u32 length".into()))?,
    );
    out.extend_from_slice(&meta_json);

    let layers = net.layers();
    push_u32(&mut out, layers.len() as u32);
    for layer in layers {
        let packed = pack(layer);
        push_u32(&mut out, packed.rows() as u32);
        push_u32(&mut out, packed.cols() as u32);
        push_f32(&mut out, packed.alpha());
        out.push(u8::from(!meta.packed_only));
        if !meta.packed_only {
            for &s in layer.scores() {
                push_f32(&mut out, s);
            }
        }
        for &w in packed.sign_words() {
            out.extend_from_slice(&w.to_le_bytes());
        }
        for &w in packed.mask_words() {
            out.extend_from_slice(&w.to_le_bytes());
        }
    }

    let bns = net.bns();
    push_u32(&mut out, bns.len() as u32);
    for bn in bns {
        push_u32(&mut out, bn.channels() as u32);
        for plane in [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var] {
            for &v in plane.iter() {
                push_f32(&mut out, v);
            }
        }
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, net: &NetworkState, meta: &CheckpointMeta) -> Result<()> {
    let bytes = encode_checkpoint(net, meta)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Format {
            path: PathBuf::from(self.path),
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail(format!(
                "need {n} bytes, file has {} left",
                self.buf.len() - self.pos
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n * 4)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn u64_vec(&mut self, n: usize) -> Result<Vec<u64>> {
        let bytes = self.take(n * 8)?;
        Ok(bytes.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

/// Parses a checkpoint from bytes. The seed in the metadata regenerates
/// the frozen weights, so the result evaluates bitwise-identically to
/// the network that was saved.
pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(NetworkState, CheckpointMeta)> {
    let mut r = Reader { buf: bytes, pos: 0, path };
    let magic = r.take(4)?;
    if magic != MAGIC {
        let r0 = Reader { buf: bytes, pos: 0, path };
        return Err(r0.fail(format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.fail(format!("unsupported version {version}, expected {VERSION}")));
    }
    let meta_len = r.u32()? as usize;
    let meta_start = r.pos;
    let meta_bytes = r.take(meta_len)?;
    let meta: CheckpointMeta = serde_json::from_slice(meta_bytes).map_err(|e| Error::Format {
        path: PathBuf::from(path),
        offset: meta_start as u64,
        message: format!("metadata: {e}"),
    })?;
    meta.spec.validate()?;

    let regen = build_network(&meta.spec, meta.seed)?;
    let layer_count = r.u32()? as usize;
    if layer_count != regen.layers().len() {
        return Err(r.fail(format!(
            "layer count {layer_count} does not match spec ({})",
            regen.layers().len()
        )));
    }

    let mut layers = Vec::with_capacity(layer_count);
    for (idx, regen_layer) in regen.layers().iter().enumerate() {
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        if rows != regen_layer.rows() || cols != regen_layer.cols() {
            return Err(r.fail(format!(
                "layer {idx} is {rows}x{cols}, spec wants {}x{}",
                regen_layer.rows(),
                regen_layer.cols()
            )));
        }
        let alpha = r.f32()?;
        let has_scores = r.u8()?;
        if has_scores > 1 {
            return Err(r.fail(format!("has_scores flag is {has_scores}, expected 0 or 1")));
        }
        if meta.packed_only && has_scores == 1 {
            return Err(r.fail("packed checkpoint carries scores".to_string()));
        }
        let scores = if has_scores == 1 {
            r.f32_vec(rows * cols)?
        } else {
            vec![0.0; rows * cols]
        };
        let plane_start = r.pos;
        let wpr = cols.div_ceil(64);
        let sign_words = r.u64_vec(rows * wpr)?;
        let mask_words = r.u64_vec(rows * wpr)?;
        let packed =
            PackedLayer::from_words(rows, cols, alpha, sign_words, mask_words).map_err(|e| {
                Error::Format {
                    path: PathBuf::from(path),
                    offset: plane_start as u64,
                    message: format!("layer {idx}: {e}"),
                }
            })?;
        let mut signs = Vec::with_capacity(rows * cols);
        let mut mask = Vec::with_capacity(rows * cols);
        for row in 0..rows {
            let sw = packed.sign_row(row);
            let mw = packed.mask_row(row);
            for c in 0..cols {
                signs.push(if sw[c / 64] >> (c % 64) & 1 == 1 { 1.0 } else { -1.0 });
                mask.push((mw[c / 64] >> (c % 64) & 1) as f32);
            }
        }
        let params = MaskedParams::from_parts(signs, mask, alpha, rows, cols)?;
        // with_params cross-checks sgn(weights) against the stored sign
        // plane, so a wrong seed or corrupt plane fails loudly here.
        let mut layer =
            MaskedBinaryLayer::with_params(regen_layer.weights().to_vec(), scores, params)
                .map_err(|e| Error::Format {
                    path: PathBuf::from(path),
                    offset: plane_start as u64,
                    message: format!("layer {idx}: {e}"),
                })?;
        layer.set_prunable(regen_layer.prunable());
        layers.push(layer);
    }

    let bn_count = r.u32()? as usize;
    if bn_count != regen.bns().len() {
        return Err(r.fail(format!(
            "bn count {bn_count} does not match spec ({})",
            regen.bns().len()
        )));
    }
    let trainable = meta.spec.bn_policy == BnPolicy::Learned;
    let mut bns = Vec::with_capacity(bn_count);
    for (idx, regen_bn) in regen.bns().iter().enumerate() {
        let channels = r.u32()? as usize;
        if channels != regen_bn.channels() {
            return Err(r.fail(format!(
                "bn {idx} has {channels} channels, spec wants {}",
                regen_bn.channels()
            )));
        }
        let gamma = r.f32_vec(channels)?;
        let beta = r.f32_vec(channels)?;
        let running_mean = r.f32_vec(channels)?;
        let running_var = r.f32_vec(channels)?;
        bns.push(BatchNormState { gamma, beta, running_mean, running_var, trainable });
    }

    if r.pos != r.buf.len() {
        return Err(r.fail(format!("{} trailing bytes", r.buf.len() - r.pos)));
    }
    let net = NetworkState::from_parts(&meta.spec, layers, bns)?;
    Ok((net, meta))
}

pub fn load_checkpoint(path: &Path) -> Result<(NetworkState, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
