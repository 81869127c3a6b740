//! Drives the C ABI from Rust: handle lifecycle, error codes, and
//! numeric agreement with the library's own forward pass.

use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use biprop::checkpoint::{save_checkpoint, CheckpointMeta};
use biprop::layers::{build_network, ActivationMode, NetworkSpec, NetworkState};
use biprop::tensor::Tensor;
use biprop_ffi::{
    mpt_abi_version, mpt_last_error, mpt_net_argmax, mpt_net_forward, mpt_net_free,
    mpt_net_input_len, mpt_net_load, mpt_net_output_len, mpt_net_pack, mpt_packed_forward,
    mpt_packed_free, mpt_packed_output_len, mpt_packed_payload_bytes, MptNet, MptPackedNet,
    MptStatus, MPT_ABI_VERSION,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn last_error() -> String {
    unsafe { CStr::from_ptr(mpt_last_error()) }.to_string_lossy().into_owned()
}

/// Saves a checkpoint with non-trivial masks and batch-norm state and
/// returns the library-side twin for comparison.
fn write_ticket(spec: &NetworkSpec, seed: u64, path: &Path) -> NetworkState {
    let mut net = build_network(spec, seed).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0xabcd);
    for layer in net.layers_mut() {
        let n = layer.rows() * layer.cols();
        let mask: Vec<f32> =
            (0..n).map(|_| if rng.gen::<f32>() > 0.45 { 1.0 } else { 0.0 }).collect();
        layer.apply_mask(mask).unwrap();
    }
    for bn in net.bns_mut() {
        for i in 0..bn.channels() {
            bn.gamma[i] = rng.gen_range(0.6..1.4);
            bn.beta[i] = rng.gen_range(-0.2..0.2);
            bn.running_mean[i] = rng.gen_range(-0.4..0.4);
            bn.running_var[i] = rng.gen_range(0.5..1.5);
        }
    }
    let meta = CheckpointMeta::new("cafe0123cafe0123".into(), seed, spec.clone());
    save_checkpoint(path, &net, &meta).unwrap();
    net
}

fn load(path: &Path) -> *mut MptNet {
    let c_path = CString::new(path.to_str().unwrap()).unwrap();
    let mut handle: *mut MptNet = ptr::null_mut();
    let status = mpt_net_load(c_path.as_ptr(), &mut handle);
    assert_eq!(status, MptStatus::Ok, "{}", last_error());
    assert!(!handle.is_null());
    handle
}

fn batch(input_len: usize, n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..n * input_len).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
}

#[test]
fn abi_version_and_status_values_are_pinned() {
    assert_eq!(mpt_abi_version(), 1);
    assert_eq!(MPT_ABI_VERSION, 1);
    assert_eq!(MptStatus::Ok as i32, 0);
    assert_eq!(MptStatus::NullArg as i32, 1);
    assert_eq!(MptStatus::Panic as i32, 13);
}

#[test]
fn null_arguments_are_rejected_not_dereferenced() {
    let mut handle: *mut MptNet = ptr::null_mut();
    assert_eq!(mpt_net_load(ptr::null(), &mut handle), MptStatus::NullArg);
    assert!(!last_error().is_empty());
    let c = CString::new("x").unwrap();
    assert_eq!(mpt_net_load(c.as_ptr(), ptr::null_mut()), MptStatus::NullArg);
    let mut n = 0usize;
    assert_eq!(mpt_net_input_len(ptr::null(), &mut n), MptStatus::NullArg);
    // Freeing NULL is a no-op, per the header contract.
    mpt_net_free(ptr::null_mut());
    mpt_packed_free(ptr::null_mut());
}

#[test]
fn missing_bad_and_non_utf8_paths_map_to_distinct_codes() {
    let mut handle: *mut MptNet = ptr::null_mut();

    let missing = CString::new("/no/such/ticket.mptk").unwrap();
    assert_eq!(mpt_net_load(missing.as_ptr(), &mut handle), MptStatus::Io);
    assert!(last_error().contains("/no/such/ticket.mptk"), "{}", last_error());

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.mptk");
    std::fs::write(&junk, b"not a checkpoint at all").unwrap();
    let junk_c = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(mpt_net_load(junk_c.as_ptr(), &mut handle), MptStatus::Format);
    assert!(last_error().contains("magic"), "{}", last_error());

    let non_utf8 = CString::new(vec![0xffu8, 0xfe, 0x2f]).unwrap();
    assert_eq!(mpt_net_load(non_utf8.as_ptr(), &mut handle), MptStatus::Utf8);
    assert!(handle.is_null(), "out must stay untouched on failure");
}

#[test]
fn forward_through_the_abi_is_bitwise_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mlp.mptk");
    let spec = NetworkSpec::mlp(18, &[25, 11], 6).with_batch_norms(true);
    let twin = write_ticket(&spec, 4, &path);
    let handle = load(&path);

    let mut input_len = 0usize;
    let mut output_len = 0usize;
    assert_eq!(mpt_net_input_len(handle, &mut input_len), MptStatus::Ok);
    assert_eq!(mpt_net_output_len(handle, &mut output_len), MptStatus::Ok);
    assert_eq!(input_len, 18);
    assert_eq!(output_len, 6);

    let n = 9;
    let x = batch(input_len, n, 77);
    let mut got = vec![0.0f32; n * output_len];
    let status = mpt_net_forward(handle, x.as_ptr(), x.len(), got.as_mut_ptr(), got.len());
    assert_eq!(status, MptStatus::Ok, "{}", last_error());
    assert_eq!(last_error(), "");

    let t = Tensor::new(vec![n, 18], x.clone()).unwrap();
    let want = twin.forward_eval(&t).unwrap();
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<u32>>();
    assert_eq!(bits(&got), bits(want.data()));

    let mut labels = vec![0u32; n];
    assert_eq!(
        mpt_net_argmax(handle, x.as_ptr(), x.len(), labels.as_mut_ptr(), labels.len()),
        MptStatus::Ok
    );
    let want_labels: Vec<u32> = want.argmax_rows().iter().map(|&w| w as u32).collect();
    assert_eq!(labels, want_labels);

    mpt_net_free(handle);
}

#[test]
fn length_contract_violations_are_shape_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mlp.mptk");
    let spec = NetworkSpec::mlp(10, &[7], 3);
    write_ticket(&spec, 2, &path);
    let handle = load(&path);

    let x = batch(10, 2, 5);
    let mut out = vec![0.0f32; 6];

    // x_len not a multiple of the input length.
    let status = mpt_net_forward(handle, x.as_ptr(), 15, out.as_mut_ptr(), out.len());
    assert_eq!(status, MptStatus::Shape);
    assert!(last_error().contains("15"), "{}", last_error());

    // out_len for the wrong batch size.
    let status = mpt_net_forward(handle, x.as_ptr(), x.len(), out.as_mut_ptr(), 5);
    assert_eq!(status, MptStatus::Shape);

    // Labels buffer must match the batch size.
    let mut labels = vec![0u32; 3];
    let status = mpt_net_argmax(handle, x.as_ptr(), x.len(), labels.as_mut_ptr(), labels.len());
    assert_eq!(status, MptStatus::Shape);

    // Empty batches are rejected rather than silently accepted.
    let status = mpt_net_forward(handle, x.as_ptr(), 0, out.as_mut_ptr(), 0);
    assert_eq!(status, MptStatus::Shape);

    mpt_net_free(handle);
}

#[test]
fn packed_program_agrees_with_the_dense_forward() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sign.mptk");
    let spec = NetworkSpec::mlp(24, &[40, 19], 5).with_mode(ActivationMode::Sign);
    write_ticket(&spec, 8, &path);
    let handle = load(&path);

    let mut packed: *mut MptPackedNet = ptr::null_mut();
    assert_eq!(mpt_net_pack(handle, &mut packed), MptStatus::Ok, "{}", last_error());
    assert!(!packed.is_null());

    let mut classes = 0usize;
    assert_eq!(mpt_packed_output_len(packed, &mut classes), MptStatus::Ok);
    assert_eq!(classes, 5);

    let mut payload = 0usize;
    assert_eq!(mpt_packed_payload_bytes(packed, &mut payload), MptStatus::Ok);
    // 24, 40, and 19 columns each pack into one 64-bit word per row,
    // two planes per layer.
    assert_eq!(payload, (40 + 19 + 5) * 2 * 8);

    let n = 12;
    let x = batch(24, n, 31);
    let mut dense = vec![0.0f32; n * 5];
    let mut fast = vec![0.0f32; n * 5];
    assert_eq!(
        mpt_net_forward(handle, x.as_ptr(), x.len(), dense.as_mut_ptr(), dense.len()),
        MptStatus::Ok
    );
    assert_eq!(
        mpt_packed_forward(packed, x.as_ptr(), x.len(), fast.as_mut_ptr(), fast.len()),
        MptStatus::Ok,
        "{}",
        last_error()
    );
    // Hidden activations are exact sign bits either way; only the
    // output accumulation order differs.
    for (a, b) in dense.iter().zip(&fast) {
        assert!((a - b).abs() <= 1e-4, "{a} vs {b}");
    }
    for row in 0..n {
        let arg = |v: &[f32]| -> usize {
            (0..5).max_by(|&i, &j| v[row * 5 + i].total_cmp(&v[row * 5 + j])).unwrap()
        };
        assert_eq!(arg(&dense), arg(&fast));
    }

    // Shape contract applies to the packed path too.
    let status = mpt_packed_forward(packed, x.as_ptr(), 7, fast.as_mut_ptr(), fast.len());
    assert_eq!(status, MptStatus::Shape);

    mpt_packed_free(packed);
    mpt_net_free(handle);
}
