"""Dataset ingestion: IDX images/labels, dynamic binarization, and a
bars-and-stripes generator for fast synthetic runs.

No downloading happens here; loaders take file paths so runs stay
deterministic and offline.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


@dataclass
class Dataset:
    x_train: np.ndarray
    x_val: np.ndarray
    x_test: np.ndarray
    y_train: np.ndarray | None = None
    y_val: np.ndarray | None = None
    y_test: np.ndarray | None = None

    @property
    def num_pixels(self) -> int:
        return self.x_train.shape[1]


def load_idx_images(path) -> np.ndarray:
    """Pixels scaled to [0, 1], flattened to (count, rows*cols)."""
    with open(path, "rb") as f:
        head = f.read(16)
        if len(head) < 16:
            raise IdxFormatError(f"{path}: truncated header")
        magic, count, rows, cols = struct.unpack(">IIII", head)
        if magic != IDX_IMAGES_MAGIC:
            raise IdxFormatError(f"{path}: bad magic 0x{magic:08x}, expected image file")
        raw = f.read()
    expected = count * rows * cols
    if len(raw) != expected:
        raise IdxFormatError(f"{path}: expected {expected} pixel bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows * cols)
    return data.astype(np.float64) / 255.0


def load_idx_labels(path) -> np.ndarray:
    with open(path, "rb") as f:
        head = f.read(8)
        if len(head) < 8:
            raise IdxFormatError(f"{path}: truncated header")
        magic, count = struct.unpack(">II", head)
        if magic != IDX_LABELS_MAGIC:
            raise IdxFormatError(f"{path}: bad magic 0x{magic:08x}, expected label file")
        raw = f.read()
    if len(raw) != count:
        raise IdxFormatError(f"{path}: expected {count} label bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def load_idx(images_path, labels_path=None, expect_side: int | None = None):
    """Load an image file (and optionally labels), validating counts."""
    images = load_idx_images(images_path)
    if expect_side is not None and images.shape[1] != expect_side * expect_side:
        raise IdxFormatError(
            f"{images_path}: expected {expect_side}x{expect_side} images, "
            f"got {images.shape[1]} pixels"
        )
    labels = None
    if labels_path is not None:
        labels = load_idx_labels(labels_path)
        if len(labels) != len(images):
            raise IdxFormatError(
                f"count mismatch: {len(images)} images vs {len(labels)} labels"
            )
    return images, labels


def write_idx_images(path, images: np.ndarray) -> None:
    """Inverse of load_idx_images for fixtures; expects (count, rows, cols) uint8."""
    images = np.asarray(images, dtype=np.uint8)
    count, rows, cols = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, count, rows, cols))
        f.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        f.write(labels.tobytes())


def dynamic_binarize(batch, rng) -> np.ndarray:
    """Independent Bernoulli(pixel) draw; resampled every time it is called."""
    batch = np.asarray(batch, dtype=np.float64)
    if np.any((batch < 0) | (batch > 1)):
        raise ValueError("pixel values must lie in [0, 1]")
    return (rng.random(batch.shape) < batch).astype(np.float64)


def synth_bars_stripes(side: int, n: int, rng):
    """Standard bars-and-stripes family: every row constant or every column.

    Each draw picks an orientation (label 0 = horizontal bars, 1 = vertical
    stripes) and independent on/off lines, so the all-on and all-off grids
    occur under both labels; the family has 2 * 2^side patterns counted
    with those duplicates.
    """
    if side < 2:
        raise ValueError("side must be >= 2")
    labels = rng.integers(0, 2, size=n)
    lines = rng.integers(0, 2, size=(n, side)).astype(np.float64)
    x = np.empty((n, side, side))
    x[labels == 0] = lines[labels == 0][:, :, None] * np.ones(side)
    x[labels == 1] = lines[labels == 1][:, None, :] * np.ones(side)[:, None]
    return x.reshape(n, side * side), labels


def _split_indices(n: int, fractions, seed: int):
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must sum to 1")
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(fractions[0] * n)
    n_val = int(fractions[1] * n)
    return order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :]


def split_manifest(n: int, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> dict:
    """JSON-able record of exactly which examples land in which split."""
    tr, va, te = _split_indices(n, fractions, seed)
    return {
        "n": n,
        "fractions": list(fractions),
        "seed": seed,
        "train": tr.tolist(),
        "val": va.tolist(),
        "test": te.tolist(),
    }


def split_dataset(x, y=None, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> Dataset:
    """Disjoint, seed-reproducible train/val/test split."""
    x = np.asarray(x)
    tr, va, te = _split_indices(len(x), fractions, seed)
    pick = (lambda idx: y[idx]) if y is not None else (lambda idx: None)
    return Dataset(x[tr], x[va], x[te], pick(tr), pick(va), pick(te))


def bars_stripes_dataset(side: int, n: int, seed: int = 0) -> Dataset:
    x, y = synth_bars_stripes(side, n, np.random.default_rng(seed))
    return split_dataset(x, y, seed=seed + 1)
