"""Benchmark dataset generators, MNIST IDX ingestion, and task losses.

Three task families share one container:

* copy: one-dimensional standard-normal sequences; the target is the very
  first input, scored by squared error at the last step.
* denoise: two channels — a standard-normal stream plus a 0/1 marker that
  flags five timesteps sampled without replacement from {1..T-N}; the five
  marked stream values must be emitted, in order, over the last five
  steps, scored by the summed squared error there. N (>= 5) sets how long
  the network must hold the information.
* classify: flattened 28x28 images under one shared pixel permutation,
  fed either pixel by pixel (length 784) or line by line (28 wide, with N
  all-black lines appended so the sequence has 28 + N steps); scored by
  the negative log likelihood of the softmax output at the last step.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class MnistFormatError(ValueError):
    """An IDX file does not match the canonical MNIST layout."""


@dataclass
class Dataset:
    task: str  # "copy" | "denoise" | "classify"
    inputs: np.ndarray  # (count, length, dim) float64
    targets: np.ndarray  # (count, k) float64 or (count,) int labels
    output_dim: int

    @property
    def count(self):
        return self.inputs.shape[0]

    @property
    def length(self):
        return self.inputs.shape[1]

    @property
    def input_dim(self):
        return self.inputs.shape[2]

    @property
    def loss_steps(self):
        """How many trailing timesteps carry the loss."""
        return 5 if self.task == "denoise" else 1

    def subset(self, idx):
        return Dataset(self.task, self.inputs[idx], self.targets[idx], self.output_dim)


@dataclass(frozen=True)
class CopyFirstInputSpec:
    length: int
    count: int
    seed: int

    def __post_init__(self):
        if self.length < 1:
            raise ValueError("sequence length must be >= 1")


@dataclass(frozen=True)
class DenoisingSpec:
    length: int
    forgetting: int  # minimum gap between last marked input and restitution
    count: int
    seed: int

    def __post_init__(self):
        if self.forgetting < 5:
            raise ValueError("forgetting period must be >= 5")
        if self.length - self.forgetting < 5:
            raise ValueError("need length - forgetting >= 5 to place five markers")


@dataclass(frozen=True)
class PermutedMnistSpec:
    mode: str  # "pixel" | "line"
    permutation_seed: int
    black_lines: int = 0

    def __post_init__(self):
        if self.mode not in ("pixel", "line"):
            raise ValueError("mode must be 'pixel' or 'line'")
        if self.black_lines < 0:
            raise ValueError("black_lines must be >= 0")
        if self.mode == "pixel" and self.black_lines:
            raise ValueError("black_lines applies to line mode only")


def gen_copy_first_input(spec):
    rng = np.random.default_rng(spec.seed)
    inputs = rng.standard_normal((spec.count, spec.length, 1))
    targets = inputs[:, 0, :].copy()
    return Dataset("copy", inputs, targets, output_dim=1)


def gen_denoising(spec):
    rng = np.random.default_rng(spec.seed)
    inputs = np.zeros((spec.count, spec.length, 2))
    inputs[:, :, 0] = rng.standard_normal((spec.count, spec.length))
    targets = np.empty((spec.count, 5))
    window = spec.length - spec.forgetting
    for i in range(spec.count):
        marks = np.sort(rng.choice(window, size=5, replace=False))
        inputs[i, marks, 1] = 1.0
        targets[i] = inputs[i, marks, 0]
    return Dataset("denoise", inputs, targets, output_dim=1)


# ---------------------------------------------------------------------------
# MNIST IDX files (big-endian; plain or gzip)


def _open_idx(path):
    fh = open(path, "rb")
    magic = fh.read(2)
    fh.seek(0)
    if magic == b"\x1f\x8b":
        fh.close()
        return gzip.open(path, "rb")
    return fh


def _read_exact(fh, count, path, what):
    data = fh.read(count)
    if len(data) != count:
        raise MnistFormatError(f"{path}: truncated while reading {what}")
    return data


def load_mnist_idx(images_path, labels_path):
    """Parse canonical IDX image/label files into ([0,1] floats, int labels)."""
    with _open_idx(images_path) as fh:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(fh, 16, images_path, "header"))
        if magic != IMAGES_MAGIC:
            raise MnistFormatError(
                f"{images_path}: bad image magic 0x{magic:08x}, expected 0x{IMAGES_MAGIC:08x}"
            )
        if (rows, cols) != (28, 28):
            raise MnistFormatError(f"{images_path}: expected 28x28 images, got {rows}x{cols}")
        raw = _read_exact(fh, count * rows * cols, images_path, "pixel data")
        images = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows, cols)
    with _open_idx(labels_path) as fh:
        magic, label_count = struct.unpack(">II", _read_exact(fh, 8, labels_path, "header"))
        if magic != LABELS_MAGIC:
            raise MnistFormatError(
                f"{labels_path}: bad label magic 0x{magic:08x}, expected 0x{LABELS_MAGIC:08x}"
            )
        raw = _read_exact(fh, label_count, labels_path, "label data")
        labels = np.frombuffer(raw, dtype=np.uint8)
    if count != label_count:
        raise MnistFormatError(
            f"image count {count} != label count {label_count} "
            f"({images_path} vs {labels_path})"
        )
    return images.astype(np.float64) / 255.0, labels.astype(np.int64)


def write_idx(images_path, labels_path, images, labels, compress=False):
    """Write uint8 images (N, 28, 28) and labels in the canonical IDX layout."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if images.ndim != 3 or images.shape[1:] != (28, 28):
        raise ValueError("images must be (count, 28, 28)")
    if labels.shape != (images.shape[0],):
        raise ValueError("labels must match image count")
    op = gzip.open if compress else open
    with op(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGES_MAGIC, images.shape[0], 28, 28))
        fh.write(images.tobytes())
    with op(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


def synthetic_mnist_arrays(count, seed):
    """Procedural stand-in images when the real corpus is unavailable.

    Each label places a bright 8x8 block at a label-specific grid cell over
    background noise, so a smoke-test classifier has signal to find.
    """
    rng = np.random.default_rng(seed)
    images = rng.integers(0, 40, size=(count, 28, 28), dtype=np.uint8)
    labels = rng.integers(0, 10, size=count).astype(np.uint8)
    for i, lab in enumerate(labels):
        r, c = divmod(int(lab), 5)
        top, left = 3 + r * 12, 2 + c * 5
        images[i, top : top + 8, left : left + 8] = 220
    return images, labels


def make_permuted_sequences(images, labels, spec):
    """Apply one shared pixel permutation and serialise per the chosen mode."""
    images = np.asarray(images, dtype=np.float64)
    count = images.shape[0]
    flat = images.reshape(count, 784)
    perm = np.random.default_rng(spec.permutation_seed).permutation(784)
    shuffled = flat[:, perm]
    if spec.mode == "pixel":
        inputs = shuffled.reshape(count, 784, 1)
    else:
        lines = shuffled.reshape(count, 28, 28)
        pad = np.zeros((count, spec.black_lines, 28))
        inputs = np.concatenate([lines, pad], axis=1)
    return Dataset("classify", inputs, np.asarray(labels, dtype=np.int64), output_dim=10)


# ---------------------------------------------------------------------------
# losses


# ---------------------------------------------------------------------------
# dataset cache: a small length-prefixed binary record format
#
#   magic "RNWD" | version u32 | task length u32 | task utf-8 bytes
#   | output_dim u32 | targets dtype code u8 (0 float64, 1 int64)
#   | ndim u32 | dims u64... | raw inputs | ndim u32 | dims u64... | raw targets
#
# all integers little-endian, array payloads row-major float64/int64.

_CACHE_MAGIC = b"RNWD"
_CACHE_VERSION = 1


def _write_array(fh, arr):
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.tobytes())


def _read_array(fh, dtype, path):
    (ndim,) = struct.unpack("<I", _read_exact(fh, 4, path, "array header"))
    shape = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim, path, "array dims"))
    count = int(np.prod(shape)) if shape else 1
    raw = _read_exact(fh, count * 8, path, "array payload")
    return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


def save_dataset(path, dataset):
    """Cache a generated dataset in the length-prefixed binary format."""
    with open(path, "wb") as fh:
        fh.write(_CACHE_MAGIC)
        fh.write(struct.pack("<I", _CACHE_VERSION))
        task = dataset.task.encode("utf-8")
        fh.write(struct.pack("<I", len(task)))
        fh.write(task)
        fh.write(struct.pack("<I", dataset.output_dim))
        is_labels = dataset.targets.dtype.kind == "i"
        fh.write(struct.pack("<B", 1 if is_labels else 0))
        _write_array(fh, np.ascontiguousarray(dataset.inputs, dtype=np.float64))
        dtype = np.int64 if is_labels else np.float64
        _write_array(fh, np.ascontiguousarray(dataset.targets, dtype=dtype))


def load_dataset(path):
    """Load a dataset written by :func:`save_dataset` (bit-exact)."""
    with open(path, "rb") as fh:
        if fh.read(4) != _CACHE_MAGIC:
            raise ValueError(f"{path} is not a dataset cache file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, path, "version"))
        if version != _CACHE_VERSION:
            raise ValueError(f"{path}: unsupported cache version {version}")
        (task_len,) = struct.unpack("<I", _read_exact(fh, 4, path, "task length"))
        task = _read_exact(fh, task_len, path, "task id").decode("utf-8")
        (output_dim,) = struct.unpack("<I", _read_exact(fh, 4, path, "output dim"))
        (is_labels,) = struct.unpack("<B", _read_exact(fh, 1, path, "target kind"))
        inputs = _read_array(fh, np.float64, path)
        targets = _read_array(fh, np.int64 if is_labels else np.float64, path)
    return Dataset(task, inputs, targets, output_dim)


def task_loss(predictions, targets, task):
    """Batch-mean task loss on the loss-bearing outputs.

    ``predictions`` is (batch, 1) for copy, (batch, 5) for denoise (the
    five restitution steps in order), or (batch, 10) class logits.
    """
    predictions = ad.constant(predictions)
    if task == "classify":
        labels = np.asarray(targets)
        if predictions.data.ndim != 2 or predictions.data.shape[1] != 10:
            raise ad.ShapeMismatch(
                f"classification expects (batch, 10) logits, got {predictions.data.shape}"
            )
        picked = ad.log_softmax(predictions)[np.arange(labels.shape[0]), labels]
        return ad.mul(ad.mean(picked), -1.0)
    expected = np.asarray(targets, dtype=np.float64)
    if predictions.data.shape != expected.shape:
        raise ad.ShapeMismatch(
            f"prediction shape {predictions.data.shape} != target shape {expected.shape}"
        )
    per_sample = ad.tsum(ad.square(ad.sub(predictions, ad.constant(expected))), axis=1)
    return ad.mean(per_sample)


def accuracy(logits, labels):
    """Fraction of argmax predictions equal to the labels (ties -> lowest)."""
    logits = logits.data if isinstance(logits, ad.Tensor) else np.asarray(logits)
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))
