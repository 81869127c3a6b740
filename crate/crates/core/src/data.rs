//! Dataset ingestion: IDX and CIFAR-10 binary readers, a synthetic toy
//! set, normalization, train-time augmentation, and deterministic batch
//! iteration.
//!
//! Normalization statistics always come from the train split. Batch order
//! is a pure function of (seed, epoch), so runs replay exactly.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::Distribution;

use crate::layers::InputShape;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Per-channel normalization applied to every item of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

/// Train-split augmentation policy; eval batches never augment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Augment {
    None,
    /// Zero-pad each side by `pad`, crop back to the original size at a
    /// random offset, and flip horizontally with probability 1/2.
    PadCropFlip { pad: usize },
}

/// One split: items stored contiguously in normalized form.
#[derive(Debug, Clone)]
pub struct Split {
    item_shape: Vec<usize>,
    data: Vec<f32>,
    labels: Vec<usize>,
}

impl Split {
    pub fn new(item_shape: Vec<usize>, data: Vec<f32>, labels: Vec<usize>) -> Result<Self> {
        let item: usize = item_shape.iter().product();
        if item == 0 && !labels.is_empty() {
            return Err(Error::invalid("item_shape", "zero-sized items"));
        }
        if data.len() != item * labels.len() {
            return Err(Error::ShapeMismatch {
                context: "split storage",
                expected: vec![labels.len(), item],
                actual: vec![data.len()],
            });
        }
        Ok(Split { item_shape, data, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn item_shape(&self) -> &[usize] {
        &self.item_shape
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    fn item_len(&self) -> usize {
        self.item_shape.iter().product()
    }

    fn item(&self, i: usize) -> &[f32] {
        let n = self.item_len();
        &self.data[i * n..(i + 1) * n]
    }

    /// Copies the given items into a batch tensor, in order.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let n = self.item_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.item(i));
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.item_shape);
        (Tensor::new(shape, data).expect("gather arithmetic"), labels)
    }

    /// Unshuffled, unaugmented batches for evaluation.
    pub fn eval_batches(&self, batch_size: usize) -> impl Iterator<Item = (Tensor, Vec<usize>)> + '_ {
        let bs = batch_size.max(1);
        (0..self.len()).step_by(bs).map(move |start| {
            let idx: Vec<usize> = (start..(start + bs).min(self.len())).collect();
            self.gather(&idx)
        })
    }
}

/// A loaded dataset: normalized train/test splits plus the metadata a
/// search run needs.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub input: InputShape,
    pub classes: usize,
    pub train: Split,
    pub test: Split,
    pub norm: NormStats,
    pub augment: Augment,
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    // splitmix64 of the pair keeps epochs statistically independent.
    let mut z = seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Dataset {
    /// Shuffled train batches for one epoch; the permutation and any
    /// augmentation draws depend only on (seed, epoch).
    pub fn train_batches(&self, seed: u64, epoch: usize, batch_size: usize) -> TrainBatches<'_> {
        let mut rng = ChaCha20Rng::seed_from_u64(epoch_seed(seed, epoch));
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut rng);
        TrainBatches {
            split: &self.train,
            augment: self.augment,
            order,
            batch_size: batch_size.max(1),
            cursor: 0,
            rng,
        }
    }
}

/// Iterator over one epoch of shuffled, augmented train batches.
pub struct TrainBatches<'a> {
    split: &'a Split,
    augment: Augment,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
    rng: ChaCha20Rng,
}

impl Iterator for TrainBatches<'_> {
    type Item = (Tensor, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let idx = &self.order[self.cursor..end];
        self.cursor = end;
        let (mut batch, labels) = self.split.gather(idx);
        if let Augment::PadCropFlip { pad } = self.augment {
            let shape = self.split.item_shape().to_vec();
            if let [c, h, w] = shape[..] {
                let n = c * h * w;
                let mut scratch = vec![0.0; n];
                for i in 0..labels.len() {
                    let dy = self.rng.gen_range(0..=2 * pad);
                    let dx = self.rng.gen_range(0..=2 * pad);
                    let flip = self.rng.gen::<bool>();
                    let item = &mut batch.data_mut()[i * n..(i + 1) * n];
                    augment_item(item, &mut scratch, c, h, w, pad, dy, dx, flip);
                }
            }
        }
        Some((batch, labels))
    }
}

/// Shifted crop out of the zero-padded item, then optional horizontal
/// flip, written back in place. `dy`/`dx` index the crop origin inside
/// the padded frame, so `dy = dx = pad` is the identity crop.
#[allow(clippy::too_many_arguments)]
pub(crate) fn augment_item(
    item: &mut [f32],
    scratch: &mut [f32],
    c: usize,
    h: usize,
    w: usize,
    pad: usize,
    dy: usize,
    dx: usize,
    flip: bool,
) {
    scratch.copy_from_slice(item);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                // Source coordinates in the unpadded item.
                let sy = (y + dy).checked_sub(pad);
                let sx = (x + dx).checked_sub(pad);
                let v = match (sy, sx) {
                    (Some(sy), Some(sx)) if sy < h && sx < w => scratch[(ch * h + sy) * w + sx],
                    _ => 0.0,
                };
                let ox = if flip { w - 1 - x } else { x };
                item[(ch * h + y) * w + ox] = v;
            }
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path.to_path_buf(), e))
}

fn format_err(path: &Path, offset: u64, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset,
        message: message.into(),
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    let end = at + 4;
    if bytes.len() < end {
        return Err(format_err(
            path,
            at as u64,
            format!("expected {} header bytes, file has {}", end, bytes.len()),
        ));
    }
    Ok(u32::from_be_bytes(bytes[at..end].try_into().expect("4 bytes")))
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Parses an IDX image file into (count, rows, cols, pixels in [0,1]).
fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<f32>)> {
    let bytes = read_file(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(format_err(
            path,
            0,
            format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let expected = 16 + n * rows * cols;
    if bytes.len() != expected {
        return Err(format_err(
            path,
            bytes.len().min(expected) as u64,
            format!("expected {} bytes for {n} {rows}x{cols} images, got {}", expected, bytes.len()),
        ));
    }
    let pixels = bytes[16..].iter().map(|&b| b as f32 / 255.0).collect();
    Ok((n, rows, cols, pixels))
}

/// Parses an IDX label file; every label must be a digit class.
fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = read_file(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(format_err(
            path,
            0,
            format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let expected = 8 + n;
    if bytes.len() != expected {
        return Err(format_err(
            path,
            bytes.len().min(expected) as u64,
            format!("expected {} bytes for {n} labels, got {}", expected, bytes.len()),
        ));
    }
    let mut labels = Vec::with_capacity(n);
    for (i, &b) in bytes[8..].iter().enumerate() {
        if b > 9 {
            return Err(format_err(path, (8 + i) as u64, format!("label {b} out of range 0..=9")));
        }
        labels.push(b as usize);
    }
    Ok(labels)
}

/// Mean/std over one plane set in f64, with a unit-std floor for
/// constant channels.
fn plane_stats(values: impl Iterator<Item = f32>, count: usize) -> (f32, f32) {
    let mut sum = 0.0f64;
    let mut sumsq = 0.0f64;
    for v in values {
        sum += v as f64;
        sumsq += (v as f64) * (v as f64);
    }
    let mean = sum / count as f64;
    let var = (sumsq / count as f64 - mean * mean).max(0.0);
    let std = var.sqrt();
    (mean as f32, if std > 0.0 { std as f32 } else { 1.0 })
}

/// Loads the four standard IDX files from `dir`: train/t10k images and
/// labels. Pixels are scaled to [0,1] and standardized with train-split
/// statistics. Item counts come from the headers, so any corpus in this
/// format loads, not just the canonical one.
pub fn load_mnist_idx(dir: &Path) -> Result<Dataset> {
    let p = |name: &str| -> PathBuf { dir.join(name) };
    let (ntr, rows, cols, mut train_px) = read_idx_images(&p("train-images-idx3-ubyte"))?;
    let train_labels = read_idx_labels(&p("train-labels-idx1-ubyte"))?;
    let (nte, te_rows, te_cols, mut test_px) = read_idx_images(&p("t10k-images-idx3-ubyte"))?;
    let test_labels = read_idx_labels(&p("t10k-labels-idx1-ubyte"))?;
    if train_labels.len() != ntr {
        return Err(format_err(
            &p("train-labels-idx1-ubyte"),
            4,
            format!("{} labels for {} images", train_labels.len(), ntr),
        ));
    }
    if test_labels.len() != nte {
        return Err(format_err(
            &p("t10k-labels-idx1-ubyte"),
            4,
            format!("{} labels for {} images", test_labels.len(), nte),
        ));
    }
    if (te_rows, te_cols) != (rows, cols) {
        return Err(format_err(
            &p("t10k-images-idx3-ubyte"),
            8,
            format!("test images {te_rows}x{te_cols}, train images {rows}x{cols}"),
        ));
    }
    let (mean, std) = plane_stats(train_px.iter().copied(), train_px.len().max(1));
    for v in train_px.iter_mut().chain(test_px.iter_mut()) {
        *v = (*v - mean) / std;
    }
    let item_shape = vec![1, rows, cols];
    Ok(Dataset {
        name: "mnist".into(),
        input: InputShape::Image { c: 1, h: rows, w: cols },
        classes: 10,
        train: Split::new(item_shape.clone(), train_px, train_labels)?,
        test: Split::new(item_shape, test_px, test_labels)?,
        norm: NormStats { mean: vec![mean], std: vec![std] },
        augment: Augment::None,
    })
}

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Reads one CIFAR-10 binary file: records of 1 label byte + 3072
/// channel-planar pixel bytes. The file must be a whole number of
/// records.
fn read_cifar_file(path: &Path, pixels: &mut Vec<f32>, labels: &mut Vec<usize>) -> Result<()> {
    let bytes = read_file(path)?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(format_err(
            path,
            bytes.len() as u64,
            format!("size {} is not a positive multiple of {CIFAR_RECORD}", bytes.len()),
        ));
    }
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0];
        if label > 9 {
            return Err(format_err(
                path,
                (r * CIFAR_RECORD) as u64,
                format!("label {label} out of range 0..=9"),
            ));
        }
        labels.push(label as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok(())
}

/// Loads the five CIFAR-10 train batches plus the test batch from `dir`.
/// Pixels are standardized per channel with train-split statistics; the
/// train split gets pad-4 crop plus horizontal-flip augmentation.
pub fn load_cifar10_bin(dir: &Path) -> Result<Dataset> {
    let mut train_px = Vec::new();
    let mut train_labels = Vec::new();
    for i in 1..=5 {
        read_cifar_file(&dir.join(format!("data_batch_{i}.bin")), &mut train_px, &mut train_labels)?;
    }
    let mut test_px = Vec::new();
    let mut test_labels = Vec::new();
    read_cifar_file(&dir.join("test_batch.bin"), &mut test_px, &mut test_labels)?;

    let plane = 32 * 32;
    let item = 3 * plane;
    let mut mean = vec![0.0f32; 3];
    let mut std = vec![1.0f32; 3];
    for ch in 0..3 {
        let values = train_px
            .chunks_exact(item)
            .flat_map(|it| it[ch * plane..(ch + 1) * plane].iter().copied());
        let count = (train_px.len() / item * plane).max(1);
        let (m, s) = plane_stats(values, count);
        mean[ch] = m;
        std[ch] = s;
    }
    for px in [&mut train_px, &mut test_px] {
        for it in px.chunks_exact_mut(item) {
            for ch in 0..3 {
                for v in &mut it[ch * plane..(ch + 1) * plane] {
                    *v = (*v - mean[ch]) / std[ch];
                }
            }
        }
    }
    let item_shape = vec![3, 32, 32];
    Ok(Dataset {
        name: "cifar10".into(),
        input: InputShape::Image { c: 3, h: 32, w: 32 },
        classes: 10,
        train: Split::new(item_shape.clone(), train_px, train_labels)?,
        test: Split::new(item_shape, test_px, test_labels)?,
        norm: NormStats { mean, std },
        augment: Augment::PadCropFlip { pad: 4 },
    })
}

/// Two interleaved half-circles with Gaussian jitter: a fast 2-class set
/// for training-loop tests. The first `n` draws form the train split and
/// a further ceil(n/5) draws form the test split; n = 0 gives empty
/// splits.
pub fn toy_two_moons(n: usize, noise: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut train_px = Vec::new();
    let mut train_labels = Vec::new();
    let mut test_px = Vec::new();
    let mut test_labels = Vec::new();
    let total = n + n.div_ceil(5);
    for i in 0..total {
        let class = i % 2;
        let t = rng.gen::<f64>() * std::f64::consts::PI;
        let (mut x, mut y) = if class == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        x += noise * normal_draw(&mut rng);
        y += noise * normal_draw(&mut rng);
        let (px, labels) = if i < n {
            (&mut train_px, &mut train_labels)
        } else {
            (&mut test_px, &mut test_labels)
        };
        px.push(x as f32);
        px.push(y as f32);
        labels.push(class);
    }
    Dataset {
        name: "two-moons".into(),
        input: InputShape::Features(2),
        classes: 2,
        train: Split::new(vec![2], train_px, train_labels).expect("toy arithmetic"),
        test: Split::new(vec![2], test_px, test_labels).expect("toy arithmetic"),
        norm: NormStats { mean: vec![0.0, 0.0], std: vec![1.0, 1.0] },
        augment: Augment::None,
    }
}

fn normal_draw(rng: &mut ChaCha20Rng) -> f64 {
    rand_distr::StandardNormal.sample(rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_idx_images(path: &Path, images: &[[u8; 4]]) {
        let mut f = fs::File::create(path).unwrap();
        f.write_all(&IDX_IMAGES_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&(images.len() as u32).to_be_bytes()).unwrap();
        f.write_all(&2u32.to_be_bytes()).unwrap();
        f.write_all(&2u32.to_be_bytes()).unwrap();
        for img in images {
            f.write_all(img).unwrap();
        }
    }

    fn write_idx_labels(path: &Path, labels: &[u8]) {
        let mut f = fs::File::create(path).unwrap();
        f.write_all(&IDX_LABELS_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&(labels.len() as u32).to_be_bytes()).unwrap();
        f.write_all(labels).unwrap();
    }

    fn tiny_mnist_dir() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        write_idx_images(
            &dir.path().join("train-images-idx3-ubyte"),
            &[[0, 255, 128, 64], [10, 20, 30, 40]],
        );
        write_idx_labels(&dir.path().join("train-labels-idx1-ubyte"), &[3, 7]);
        write_idx_images(&dir.path().join("t10k-images-idx3-ubyte"), &[[255, 0, 0, 255]]);
        write_idx_labels(&dir.path().join("t10k-labels-idx1-ubyte"), &[1]);
        dir
    }

    #[test]
    fn idx_roundtrip_normalizes_with_train_stats() {
        let dir = tiny_mnist_dir();
        let ds = load_mnist_idx(dir.path()).unwrap();
        assert_eq!(ds.train.len(), 2);
        assert_eq!(ds.test.len(), 1);
        assert_eq!(ds.train.labels(), &[3, 7]);
        assert_eq!(ds.train.item_shape(), &[1, 2, 2]);

        // Oracle: stats over the 8 train pixels in [0,1].
        let raw: Vec<f32> = [0u8, 255, 128, 64, 10, 20, 30, 40]
            .iter()
            .map(|&b| b as f32 / 255.0)
            .collect();
        let mean = raw.iter().sum::<f32>() / 8.0;
        let var = raw.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / 8.0;
        let std = var.sqrt();
        assert!((ds.norm.mean[0] - mean).abs() < 1e-6);
        assert!((ds.norm.std[0] - std).abs() < 1e-5);
        let (batch, labels) = ds.train.gather(&[0]);
        assert_eq!(labels, vec![3]);
        assert!((batch.data()[1] - (1.0 - mean) / std).abs() < 1e-5);
    }

    #[test]
    fn truncated_image_file_reports_lengths() {
        let dir = tiny_mnist_dir();
        let path = dir.path().join("train-images-idx3-ubyte");
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, &bytes).unwrap();
        let err = load_mnist_idx(dir.path()).unwrap_err();
        match err {
            Error::Format { message, .. } => {
                assert!(message.contains("expected 24"), "{message}");
                assert!(message.contains("21"), "{message}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_bad_label_are_rejected() {
        let dir = tiny_mnist_dir();
        let img = dir.path().join("train-images-idx3-ubyte");
        let mut bytes = fs::read(&img).unwrap();
        bytes[3] = 0x05;
        fs::write(&img, &bytes).unwrap();
        assert!(matches!(
            load_mnist_idx(dir.path()).unwrap_err(),
            Error::Format { offset: 0, .. }
        ));

        let dir = tiny_mnist_dir();
        write_idx_labels(&dir.path().join("train-labels-idx1-ubyte"), &[3, 11]);
        let err = load_mnist_idx(dir.path()).unwrap_err();
        match err {
            Error::Format { offset, message, .. } => {
                assert_eq!(offset, 9);
                assert!(message.contains("11"), "{message}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    fn write_cifar_record(path: &Path, label: u8, fill: impl Fn(usize) -> u8) {
        let mut bytes = vec![label];
        bytes.extend((0..3072).map(fill));
        fs::write(path, bytes).unwrap();
    }

    #[test]
    fn cifar_single_record_recovers_pixels() {
        let dir = tempfile::tempdir().unwrap();
        for i in 1..=5 {
            write_cifar_record(&dir.path().join(format!("data_batch_{i}.bin")), i - 1, |p| {
                ((p + i as usize * 7) % 256) as u8
            });
        }
        write_cifar_record(&dir.path().join("test_batch.bin"), 9, |p| (p % 256) as u8);
        let ds = load_cifar10_bin(dir.path()).unwrap();
        assert_eq!(ds.train.len(), 5);
        assert_eq!(ds.test.len(), 1);
        assert_eq!(ds.test.labels(), &[9]);

        // Undo the standardization and compare against the raw bytes.
        let (batch, _) = ds.test.gather(&[0]);
        let plane = 32 * 32;
        for (p, &v) in batch.data().iter().enumerate() {
            let ch = p / plane;
            let raw = v * ds.norm.std[ch] + ds.norm.mean[ch];
            let expected = (p % 256) as f32 / 255.0;
            assert!((raw - expected).abs() < 1e-4, "pixel {p}: {raw} vs {expected}");
        }
        assert!(matches!(ds.augment, Augment::PadCropFlip { pad: 4 }));
    }

    #[test]
    fn cifar_wrong_size_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        for i in 1..=5 {
            write_cifar_record(&dir.path().join(format!("data_batch_{i}.bin")), 0, |_| 0);
        }
        fs::write(dir.path().join("test_batch.bin"), vec![0u8; 3072]).unwrap();
        assert!(matches!(
            load_cifar10_bin(dir.path()).unwrap_err(),
            Error::Format { .. }
        ));
    }

    #[test]
    fn two_moons_is_deterministic_and_empty_at_zero() {
        let a = toy_two_moons(40, 0.1, 5);
        let b = toy_two_moons(40, 0.1, 5);
        let c = toy_two_moons(40, 0.1, 6);
        assert_eq!(a.train.len(), 40);
        assert_eq!(a.test.len(), 8);
        let (ba, _) = a.train.gather(&(0..40).collect::<Vec<_>>());
        let (bb, _) = b.train.gather(&(0..40).collect::<Vec<_>>());
        let (bc, _) = c.train.gather(&(0..40).collect::<Vec<_>>());
        assert_eq!(ba.data(), bb.data());
        assert_ne!(ba.data(), bc.data());

        let empty = toy_two_moons(0, 0.1, 5);
        assert!(empty.train.is_empty());
        assert!(empty.test.is_empty());
    }

    #[test]
    fn batch_order_is_a_pure_function_of_seed_and_epoch() {
        let ds = toy_two_moons(33, 0.05, 9);
        let collect = |seed, epoch| -> Vec<Vec<usize>> {
            ds.train_batches(seed, epoch, 8).map(|(_, l)| l).collect()
        };
        assert_eq!(collect(1, 0), collect(1, 0));
        assert_ne!(collect(1, 0), collect(1, 1));
        assert_ne!(collect(1, 0), collect(2, 0));

        // Every item appears exactly once per epoch; the tail batch is
        // partial.
        let batches = collect(1, 3);
        assert_eq!(batches.len(), 5);
        assert_eq!(batches.last().unwrap().len(), 1);
        let mut seen: Vec<usize> = batches.into_iter().flatten().collect();
        let mut all = ds.train.labels().to_vec();
        seen.sort_unstable();
        all.sort_unstable();
        assert_eq!(seen, all);
    }

    #[test]
    fn augment_identity_flip_and_shift() {
        let c = 1;
        let (h, w) = (2, 3);
        let base = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut scratch = vec![0.0; 6];

        let mut item = base.clone();
        augment_item(&mut item, &mut scratch, c, h, w, 1, 1, 1, false);
        assert_eq!(item, base);

        let mut item = base.clone();
        augment_item(&mut item, &mut scratch, c, h, w, 0, 0, 0, true);
        assert_eq!(item, vec![3.0, 2.0, 1.0, 6.0, 5.0, 4.0]);

        // Crop origin at the padded top-left corner shifts content down
        // and right by one, filling with zeros.
        let mut item = base.clone();
        augment_item(&mut item, &mut scratch, c, h, w, 1, 0, 0, false);
        assert_eq!(item, vec![0.0, 0.0, 0.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn eval_batches_do_not_augment() {
        let dir = tempfile::tempdir().unwrap();
        for i in 1..=5 {
            write_cifar_record(&dir.path().join(format!("data_batch_{i}.bin")), 0, |p| {
                (p % 251) as u8
            });
        }
        write_cifar_record(&dir.path().join("test_batch.bin"), 1, |p| (p % 13) as u8);
        let ds = load_cifar10_bin(dir.path()).unwrap();
        let (direct, _) = ds.test.gather(&[0]);
        let (via_iter, _) = ds.test.eval_batches(4).next().unwrap();
        assert_eq!(direct.data(), via_iter.data());
    }
}
