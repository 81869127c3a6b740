#!/usr/bin/env python3
"""Builds the bundled data/digits corpus.

Source: the classic 8x8 handwritten-digits set that ships with
scikit-learn (1797 items, 10 classes, pixel values 0..16). Each image is
upsampled to 28x28 by nearest neighbor and rescaled to 0..255 so the
corpus is a drop-in stand-in for MNIST-format loaders. Every fifth item
(index % 5 == 0) goes to the test split; the split is deterministic, so
rebuilding the corpus reproduces it byte for byte.

Usage: python3 tools/make_digits.py [out_dir]   (default: data/digits)
"""

import struct
import sys
from pathlib import Path

import numpy as np
from sklearn.datasets import load_digits

SIZE = 28


def upsample(img8: np.ndarray) -> np.ndarray:
    """8x8 -> 28x28 nearest neighbor."""
    idx = (np.arange(SIZE) * 8) // SIZE
    return img8[np.ix_(idx, idx)]


def write_idx_images(path: Path, images: np.ndarray) -> None:
    n = images.shape[0]
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, SIZE, SIZE))
        f.write(images.astype(np.uint8).tobytes())


def write_idx_labels(path: Path, labels: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, labels.shape[0]))
        f.write(labels.astype(np.uint8).tobytes())


def main() -> None:
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("data/digits")
    out.mkdir(parents=True, exist_ok=True)

    raw = load_digits()
    images8 = raw.images  # (1797, 8, 8), float 0..16
    labels = raw.target.astype(np.uint8)

    scaled = np.stack([upsample(img) for img in images8])
    pixels = np.clip(np.round(scaled * (255.0 / 16.0)), 0, 255).astype(np.uint8)

    test_mask = np.arange(len(labels)) % 5 == 0
    write_idx_images(out / "train-images-idx3-ubyte", pixels[~test_mask])
    write_idx_labels(out / "train-labels-idx1-ubyte", labels[~test_mask])
    write_idx_images(out / "t10k-images-idx3-ubyte", pixels[test_mask])
    write_idx_labels(out / "t10k-labels-idx1-ubyte", labels[test_mask])

    print(f"{(~test_mask).sum()} train / {test_mask.sum()} test items -> {out}")


if __name__ == "__main__":
    main()
