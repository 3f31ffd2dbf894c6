"""
tasks_data.py
Task providers: n-bit parity, a 7x7 N/I/S/T letter generator, and loaders for
IDX (MNIST-family) and CIFAR-10 binary files.
"""

from __future__ import annotations

import gzip
import logging
import os
import struct
from dataclasses import dataclass
from math import prod

import numpy as np

from file_store import atomic_write_bytes
from network_core import predict_labels

logger = logging.getLogger(__name__)

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 1 + 3 * 32 * 32
NIST_SAMPLES_PER_CLASS = 11034   # 44136 examples in total

GRID = 7
GLYPHS = {
    "N": (
        "X.....X",
        "XX....X",
        "X.X...X",
        "X..X..X",
        "X...X.X",
        "X....XX",
        "X.....X",
    ),
    "I": (
        ".XXXXX.",
        "...X...",
        "...X...",
        "...X...",
        "...X...",
        "...X...",
        ".XXXXX.",
    ),
    "S": (
        ".XXXXX.",
        "X......",
        "X......",
        ".XXXXX.",
        "......X",
        "......X",
        ".XXXXX.",
    ),
    "T": (
        "XXXXXXX",
        "...X...",
        "...X...",
        "...X...",
        "...X...",
        "...X...",
        "...X...",
    ),
}
LETTERS = tuple(GLYPHS)


class DataFormatError(ValueError):
    """A dataset file does not parse."""


class IdxFormatError(DataFormatError):
    """An IDX file does not parse; the message names the byte offset."""


@dataclass(frozen=True, eq=False)
class Dataset:
    inputs: np.ndarray    # (N, *input_shape), values in [0, 1]
    targets: np.ndarray   # (N, output_size)
    name: str = "dataset"

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=float)
        targets = np.asarray(self.targets, dtype=float)
        if targets.ndim == 1:
            targets = targets[:, None]
        if inputs.ndim < 2 or inputs.shape[0] < 1:
            raise ValueError(f"dataset needs at least one sample, got inputs of shape {inputs.shape}")
        if targets.ndim != 2 or targets.shape[0] != inputs.shape[0]:
            raise ValueError(f"{inputs.shape[0]} inputs but targets have shape {targets.shape}")
        if targets.shape[1] > 1 and not np.allclose(targets.sum(axis=1), 1.0):
            raise ValueError("one-hot target rows must sum to 1")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "targets", targets)

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.inputs.shape[1:]

    @property
    def output_size(self) -> int:
        return self.targets.shape[1]

    @property
    def labels(self) -> np.ndarray:
        return predict_labels(self.targets)

    def subset(self, indices) -> Dataset:
        return Dataset(self.inputs[indices], self.targets[indices], self.name)


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


# ── Parity ───────────────────────────────────────────────────────────────────

def parity_dataset(n_bits: int) -> Dataset:
    """All 2**n bit patterns (most significant bit first) with target = XOR of the bits."""
    if not 1 <= n_bits <= 16:
        raise ValueError(f"n_bits must be between 1 and 16, got {n_bits}")
    codes = np.arange(2 ** n_bits)
    bits = (codes[:, None] >> np.arange(n_bits - 1, -1, -1)) & 1
    targets = bits.sum(axis=1) % 2
    return Dataset(bits.astype(float), targets.astype(float)[:, None], f"parity{n_bits}")


# ── 7x7 letters ──────────────────────────────────────────────────────────────

def glyph(letter: str) -> np.ndarray:
    return np.array([[ch == "X" for ch in row] for row in GLYPHS[letter]], dtype=float)


def max_shift() -> int:
    """Largest shift range for which every (dy, dx) leaves at least one pixel of every glyph on the grid."""
    for limit in range(GRID - 1, 0, -1):
        offsets = range(-limit, limit + 1)
        if all(_shift(glyph(letter), dy, dx).any()
               for letter in LETTERS for dy in offsets for dx in offsets):
            return limit
    return 0


def _shift(image: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Translate with zero fill (no wrap-around)."""
    out = np.zeros_like(image)
    h, w = image.shape
    src_y = slice(max(0, -dy), min(h, h - dy))
    dst_y = slice(max(0, dy), min(h, h + dy))
    src_x = slice(max(0, -dx), min(w, w - dx))
    dst_x = slice(max(0, dx), min(w, w + dx))
    out[dst_y, dst_x] = image[src_y, src_x]
    return out


def nist7x7_dataset(samples_per_class: int, pixel_flip_prob: float = 0.0, shift_range: int = 0,
                    seed: int = 0) -> Dataset:
    """Distorted N, I, S, T glyphs, classes interleaved (N, I, S, T, N, I, ...)."""
    if samples_per_class < 1:
        raise ValueError(f"samples_per_class must be >= 1, got {samples_per_class}")
    if not 0.0 <= pixel_flip_prob <= 1.0:
        raise ValueError(f"pixel_flip_prob must be in [0, 1], got {pixel_flip_prob}")
    if not 0 <= shift_range <= max_shift():
        raise ValueError(f"shift_range must be in [0, {max_shift()}] to keep glyphs on the grid, got {shift_range}")

    rng = np.random.default_rng(seed)
    bases = [glyph(letter) for letter in LETTERS]
    n_total = samples_per_class * len(LETTERS)
    labels = np.tile(np.arange(len(LETTERS)), samples_per_class)
    shifts = rng.integers(-shift_range, shift_range + 1, size=(n_total, 2))
    flips = rng.random((n_total, GRID, GRID)) < pixel_flip_prob

    images = np.empty((n_total, GRID, GRID))
    for i, (label, (dy, dx)) in enumerate(zip(labels, shifts)):
        image = _shift(bases[label], int(dy), int(dx)) if shift_range else bases[label]
        images[i] = np.where(flips[i], 1.0 - image, image)
    logger.debug("Generated %d 7x7 letter samples (flip=%.3f, shift=%d)", n_total, pixel_flip_prob, shift_range)
    return Dataset(images.reshape(n_total, GRID * GRID), one_hot(labels, len(LETTERS)), "nist7x7")


# ── IDX ──────────────────────────────────────────────────────────────────────

def _read_raw(path) -> bytes:
    path = os.fspath(path)
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as f:
        return f.read()


def _parse_idx(raw: bytes, expected_magic: int, path) -> np.ndarray:
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated magic number at offset 0")
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic != expected_magic:
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x} at offset 0, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{path}: truncated dimension table at offset 4 ({len(raw)} bytes)")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    count = prod(dims)
    if len(raw) < header + count:
        raise IdxFormatError(f"{path}: data truncated at offset {len(raw)}, expected {header + count} bytes")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path, n_classes: int = 10) -> Dataset:
    """Unsigned-byte IDX images scaled to [0, 1] with one-hot labels. `.gz` files are decompressed."""
    images = _parse_idx(_read_raw(images_path), IDX_IMAGE_MAGIC, images_path)
    labels = _parse_idx(_read_raw(labels_path), IDX_LABEL_MAGIC, labels_path)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"{labels_path}: count {labels.shape[0]} at offset 4 "
                             f"does not match {images.shape[0]} images")
    if labels.size and labels.max() >= n_classes:
        bad = int(np.argmax(labels >= n_classes))
        raise IdxFormatError(f"{labels_path}: label {labels[bad]} at offset {8 + bad} exceeds {n_classes} classes")
    name = os.path.basename(os.fspath(images_path)).split(".")[0]
    logger.info("Loaded %d IDX samples of shape %s from %s", images.shape[0], images.shape[1:], images_path)
    return Dataset(images / 255.0, one_hot(labels.astype(int), n_classes), name)


def _idx_bytes(magic: int, array: np.ndarray) -> bytes:
    header = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape)
    return header + array.astype(np.uint8).tobytes()


def write_idx(dataset: Dataset, images_path, labels_path) -> None:
    """Inverse of load_idx for datasets whose inputs are byte/255 values."""
    if dataset.inputs.ndim != 3:
        raise ValueError(f"IDX image files hold (N, H, W) arrays, got inputs of shape {dataset.inputs.shape}")
    pixels = np.rint(dataset.inputs * 255.0)
    if pixels.min() < 0 or pixels.max() > 255:
        raise ValueError("inputs must lie in [0, 1] to be stored as bytes")
    for path, magic, array in ((images_path, IDX_IMAGE_MAGIC, pixels),
                               (labels_path, IDX_LABEL_MAGIC, dataset.labels)):
        data = _idx_bytes(magic, array)
        if os.fspath(path).endswith(".gz"):
            data = gzip.compress(data)
        atomic_write_bytes(path, data)


# ── CIFAR-10 ─────────────────────────────────────────────────────────────────

def load_cifar_batch(paths, n_classes: int = 10) -> Dataset:
    """CIFAR-10 binary batches: one label byte then 3072 channel-first pixel bytes per record."""
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    images, labels = [], []
    for path in paths:
        raw = _read_raw(path)
        if len(raw) == 0 or len(raw) % CIFAR_RECORD_BYTES:
            raise DataFormatError(f"{path}: {len(raw)} bytes is not a whole number of "
                                  f"{CIFAR_RECORD_BYTES}-byte records")
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
        labels.append(records[:, 0])
        images.append(records[:, 1:].reshape(-1, 3, 32, 32))
    labels = np.concatenate(labels).astype(int)
    if labels.max() >= n_classes:
        raise DataFormatError(f"label {labels.max()} exceeds {n_classes} classes")
    return Dataset(np.concatenate(images) / 255.0, one_hot(labels, n_classes), "cifar10")


# ── Utilities ────────────────────────────────────────────────────────────────

def split_dataset(dataset: Dataset, test_fraction: float = 0.2, seed: int = 0) -> tuple[Dataset, Dataset]:
    if not 0 < test_fraction < 1:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    n_test = int(round(dataset.n * test_fraction))
    if n_test < 1 or n_test >= dataset.n:
        raise ValueError(f"cannot split {dataset.n} samples with test_fraction={test_fraction}")
    order = np.random.default_rng(seed).permutation(dataset.n)
    return dataset.subset(order[n_test:]), dataset.subset(order[:n_test])


def with_input_shape(dataset: Dataset, shape: tuple[int, ...]) -> Dataset:
    """Same samples with inputs reshaped, e.g. (N, 28, 28) -> (N, 1, 28, 28)."""
    shape = tuple(shape)
    if prod(shape) != prod(dataset.input_shape):
        raise ValueError(f"cannot reshape inputs {dataset.input_shape} to {shape}")
    return Dataset(dataset.inputs.reshape((dataset.n,) + shape), dataset.targets, dataset.name)


def linear_probe_accuracy(dataset: Dataset) -> float:
    """Training accuracy of a least-squares linear map from inputs (plus bias) to targets."""
    features = np.hstack([dataset.inputs.reshape(dataset.n, -1), np.ones((dataset.n, 1))])
    weights, *_ = np.linalg.lstsq(features, dataset.targets, rcond=None)
    predicted = predict_labels(features @ weights)
    return float(np.mean(predicted == dataset.labels))
