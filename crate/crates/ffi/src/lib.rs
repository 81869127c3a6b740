//! C ABI over checkpoint loading and inference.
//!
//! Conventions:
//! - Every fallible function returns an [`MptStatus`]; `MPT_STATUS_OK`
//!   is zero. Out-parameters are written only on success.
//! - After a failure, [`mpt_last_error`] returns a thread-local,
//!   NUL-terminated message that stays valid until the next FFI call on
//!   the same thread.
//! - Handles are opaque. Free each exactly once with its `_free`
//!   function; passing NULL to a `_free` is a no-op.
//! - Inputs and outputs are row-major f32 batches: `x_len` must be a
//!   multiple of the input length, and the batch size is the quotient.
//!
//! The committed header `include/biprop.h` is generated from this file;
//! regenerate with `cbindgen --crate biprop-ffi --output include/biprop.h`
//! from `crates/ffi/`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use biprop::checkpoint::load_checkpoint;
use biprop::layers::{InputShape, NetworkState};
use biprop::packed::{compression_report, pack_network, PackedNet};
use biprop::tensor::Tensor;
use biprop::Error;

/// Bumped whenever the ABI changes incompatibly.
pub const MPT_ABI_VERSION: u32 = 1;

/// Result of every fallible call. Zero is success.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MptStatus {
    Ok = 0,
    /// A required pointer argument was NULL.
    NullArg = 1,
    /// A parameter failed validation.
    Invalid = 2,
    /// A buffer length does not match the network geometry.
    Shape = 3,
    /// The file could not be read or written.
    Io = 4,
    /// The file exists but does not parse as a checkpoint.
    Format = 5,
    /// The checkpoint names an architecture this build cannot run.
    Unsupported = 6,
    /// Activation mode and input representation disagree.
    Mode = 7,
    /// A numeric failure (overflow, non-finite value) during inference.
    Numeric = 8,
    /// The embedded configuration is invalid.
    Config = 9,
    /// A width-hypothesis violation from the construction API.
    Width = 10,
    /// A string argument was not valid UTF-8.
    Utf8 = 11,
    /// An internal invariant failed; file a bug.
    Internal = 12,
    /// A panic was caught at the boundary; the handle may be poisoned.
    Panic = 13,
}

fn status_of(e: &Error) -> MptStatus {
    match e {
        Error::ShapeMismatch { .. } => MptStatus::Shape,
        Error::InvalidParameter { .. } => MptStatus::Invalid,
        Error::NumericFailure { .. } => MptStatus::Numeric,
        Error::TapeContract(_) => MptStatus::Internal,
        Error::UnsupportedArchitecture(_) => MptStatus::Unsupported,
        Error::Format { .. } => MptStatus::Format,
        Error::ModeMismatch(_) => MptStatus::Mode,
        Error::WidthHypothesis(_) => MptStatus::Width,
        Error::Config(_) => MptStatus::Config,
        Error::Io { .. } => MptStatus::Io,
        Error::Json(_) => MptStatus::Format,
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(message: &str) {
    // Interior NULs cannot come from our error strings, but a message
    // that somehow contains one is truncated rather than dropped.
    let sanitized = message.split('\0').next().unwrap_or_default();
    let c = CString::new(sanitized).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = c);
}

fn fail(status: MptStatus, message: impl AsRef<str>) -> MptStatus {
    set_last_error(message.as_ref());
    status
}

fn fail_err(e: &Error) -> MptStatus {
    fail(status_of(e), e.to_string())
}

/// Runs `f` with panics converted to `MPT_STATUS_PANIC`.
fn guarded(f: impl FnOnce() -> MptStatus) -> MptStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| (*s).to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic with non-string payload".into());
            fail(MptStatus::Panic, format!("caught panic: {msg}"))
        }
    }
}

/// A loaded ticket: the regenerated network plus its input geometry.
pub struct MptNet {
    net: NetworkState,
    item_shape: Vec<usize>,
    input_len: usize,
    output_len: usize,
}

/// A bit-packed program compiled from a loaded ticket.
pub struct MptPackedNet {
    packed: PackedNet,
    item_shape: Vec<usize>,
    input_len: usize,
    output_len: usize,
}

fn item_shape_of(input: InputShape) -> Vec<usize> {
    match input {
        InputShape::Features(n) => vec![n],
        InputShape::Image { c, h, w } => vec![c, h, w],
    }
}

/// ABI version of this library; compare against `MPT_ABI_VERSION` from
/// the header you compiled with.
#[no_mangle]
pub extern "C" fn mpt_abi_version() -> u32 {
    MPT_ABI_VERSION
}

/// Message for the most recent failure on this thread. Never NULL;
/// empty when the last call succeeded. Valid until the next FFI call on
/// the same thread.
#[no_mangle]
pub extern "C" fn mpt_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Loads a checkpoint file into a network handle. The seed stored in
/// the checkpoint regenerates the frozen weights, so the handle
/// evaluates bitwise-identically to the network that was saved.
#[no_mangle]
pub extern "C" fn mpt_net_load(path: *const c_char, out: *mut *mut MptNet) -> MptStatus {
    guarded(|| {
        if path.is_null() || out.is_null() {
            return fail(MptStatus::NullArg, "path and out must be non-NULL");
        }
        let path = match unsafe { CStr::from_ptr(path) }.to_str() {
            Ok(s) => s,
            Err(_) => return fail(MptStatus::Utf8, "path is not valid UTF-8"),
        };
        match load_checkpoint(Path::new(path)) {
            Ok((net, _meta)) => {
                let item_shape = item_shape_of(net.spec().input);
                let handle = MptNet {
                    input_len: item_shape.iter().product(),
                    output_len: net.output_dim(),
                    item_shape,
                    net,
                };
                unsafe { *out = Box::into_raw(Box::new(handle)) };
                set_last_error("");
                MptStatus::Ok
            }
            Err(e) => fail_err(&e),
        }
    })
}

/// Frees a network handle. NULL is a no-op.
#[no_mangle]
pub extern "C" fn mpt_net_free(net: *mut MptNet) {
    let _ = guarded(|| {
        if !net.is_null() {
            drop(unsafe { Box::from_raw(net) });
        }
        MptStatus::Ok
    });
}

/// Floats per input item (channels * height * width for images).
#[no_mangle]
pub extern "C" fn mpt_net_input_len(net: *const MptNet, out: *mut usize) -> MptStatus {
    guarded(|| {
        if net.is_null() || out.is_null() {
            return fail(MptStatus::NullArg, "net and out must be non-NULL");
        }
        unsafe { *out = (*net).input_len };
        set_last_error("");
        MptStatus::Ok
    })
}

/// Floats per output item (the class count).
#[no_mangle]
pub extern "C" fn mpt_net_output_len(net: *const MptNet, out: *mut usize) -> MptStatus {
    guarded(|| {
        if net.is_null() || out.is_null() {
            return fail(MptStatus::NullArg, "net and out must be non-NULL");
        }
        unsafe { *out = (*net).output_len };
        set_last_error("");
        MptStatus::Ok
    })
}

fn batch_from(
    x: *const f32,
    x_len: usize,
    item_shape: &[usize],
    input_len: usize,
) -> Result<Tensor, MptStatus> {
    if x.is_null() && x_len > 0 {
        return Err(fail(MptStatus::NullArg, "x must be non-NULL"));
    }
    if input_len == 0 || x_len == 0 || x_len % input_len != 0 {
        return Err(fail(
            MptStatus::Shape,
            format!("x_len {x_len} is not a positive multiple of the input length {input_len}"),
        ));
    }
    let n = x_len / input_len;
    let mut shape = vec![n];
    shape.extend_from_slice(item_shape);
    let data = unsafe { std::slice::from_raw_parts(x, x_len) }.to_vec();
    Tensor::new(shape, data).map_err(|e| fail_err(&e))
}

fn emit(y: &Tensor, out: *mut f32, out_len: usize) -> MptStatus {
    if out.is_null() {
        return fail(MptStatus::NullArg, "out must be non-NULL");
    }
    let data = y.data();
    if out_len != data.len() {
        return fail(
            MptStatus::Shape,
            format!("out_len {out_len} does not match the {} output floats", data.len()),
        );
    }
    unsafe { std::slice::from_raw_parts_mut(out, out_len) }.copy_from_slice(data);
    set_last_error("");
    MptStatus::Ok
}

/// Runs the dense forward pass over a batch. `x_len` must be a multiple
/// of the input length; `out_len` must equal batch size times the
/// output length.
#[no_mangle]
pub extern "C" fn mpt_net_forward(
    net: *const MptNet,
    x: *const f32,
    x_len: usize,
    out: *mut f32,
    out_len: usize,
) -> MptStatus {
    guarded(|| {
        if net.is_null() {
            return fail(MptStatus::NullArg, "net must be non-NULL");
        }
        let handle = unsafe { &*net };
        let batch = match batch_from(x, x_len, &handle.item_shape, handle.input_len) {
            Ok(b) => b,
            Err(status) => return status,
        };
        match handle.net.forward_eval(&batch) {
            Ok(y) => emit(&y, out, out_len),
            Err(e) => fail_err(&e),
        }
    })
}

/// Runs the dense forward pass and writes the winning class per item.
/// `labels_len` must equal the batch size.
#[no_mangle]
pub extern "C" fn mpt_net_argmax(
    net: *const MptNet,
    x: *const f32,
    x_len: usize,
    labels: *mut u32,
    labels_len: usize,
) -> MptStatus {
    guarded(|| {
        if net.is_null() || labels.is_null() {
            return fail(MptStatus::NullArg, "net and labels must be non-NULL");
        }
        let handle = unsafe { &*net };
        let batch = match batch_from(x, x_len, &handle.item_shape, handle.input_len) {
            Ok(b) => b,
            Err(status) => return status,
        };
        let n = x_len / handle.input_len;
        if labels_len != n {
            return fail(
                MptStatus::Shape,
                format!("labels_len {labels_len} does not match the batch size {n}"),
            );
        }
        match handle.net.forward_eval(&batch) {
            Ok(y) => {
                let winners = y.argmax_rows();
                let out = unsafe { std::slice::from_raw_parts_mut(labels, labels_len) };
                for (slot, w) in out.iter_mut().zip(winners) {
                    *slot = w as u32;
                }
                set_last_error("");
                MptStatus::Ok
            }
            Err(e) => fail_err(&e),
        }
    })
}

/// Compiles the loaded ticket into a bit-packed program (sign and mask
/// planes, folded norms).
#[no_mangle]
pub extern "C" fn mpt_net_pack(net: *const MptNet, out: *mut *mut MptPackedNet) -> MptStatus {
    guarded(|| {
        if net.is_null() || out.is_null() {
            return fail(MptStatus::NullArg, "net and out must be non-NULL");
        }
        let handle = unsafe { &*net };
        match pack_network(&handle.net) {
            Ok(packed) => {
                let p = MptPackedNet {
                    output_len: packed.output_dim(),
                    item_shape: handle.item_shape.clone(),
                    input_len: handle.input_len,
                    packed,
                };
                unsafe { *out = Box::into_raw(Box::new(p)) };
                set_last_error("");
                MptStatus::Ok
            }
            Err(e) => fail_err(&e),
        }
    })
}

/// Frees a packed handle. NULL is a no-op.
#[no_mangle]
pub extern "C" fn mpt_packed_free(packed: *mut MptPackedNet) {
    let _ = guarded(|| {
        if !packed.is_null() {
            drop(unsafe { Box::from_raw(packed) });
        }
        MptStatus::Ok
    });
}

/// Runs the packed forward pass over a batch; same length contract as
/// `mpt_net_forward`.
#[no_mangle]
pub extern "C" fn mpt_packed_forward(
    packed: *const MptPackedNet,
    x: *const f32,
    x_len: usize,
    out: *mut f32,
    out_len: usize,
) -> MptStatus {
    guarded(|| {
        if packed.is_null() {
            return fail(MptStatus::NullArg, "packed must be non-NULL");
        }
        let handle = unsafe { &*packed };
        let batch = match batch_from(x, x_len, &handle.item_shape, handle.input_len) {
            Ok(b) => b,
            Err(status) => return status,
        };
        match handle.packed.forward(&batch) {
            Ok(y) => emit(&y, out, out_len),
            Err(e) => fail_err(&e),
        }
    })
}

/// Floats per output item of the packed program (the class count).
#[no_mangle]
pub extern "C" fn mpt_packed_output_len(
    packed: *const MptPackedNet,
    out: *mut usize,
) -> MptStatus {
    guarded(|| {
        if packed.is_null() || out.is_null() {
            return fail(MptStatus::NullArg, "packed and out must be non-NULL");
        }
        unsafe { *out = (*packed).output_len };
        set_last_error("");
        MptStatus::Ok
    })
}

/// Bytes of bit-plane payload in the packed program (signs plus masks,
/// excluding per-layer constants).
#[no_mangle]
pub extern "C" fn mpt_packed_payload_bytes(
    packed: *const MptPackedNet,
    out: *mut usize,
) -> MptStatus {
    guarded(|| {
        if packed.is_null() || out.is_null() {
            return fail(MptStatus::NullArg, "packed and out must be non-NULL");
        }
        let handle = unsafe { &*packed };
        unsafe { *out = compression_report(&handle.packed).payload_bytes };
        set_last_error("");
        MptStatus::Ok
    })
}
