"""Synthetic sequence tasks, MNIST IDX ingestion, and task metrics.

The adding problem emits (value, marker) pairs per step and asks for the
sum of the two marked values; a sum counts as correct when it lands within
0.05 of the truth.  The copy-memory problem shows 10 symbols, T blanks and
a trigger marker, then scores recall of the 10 symbols at the final 10
steps.  Generators are pure functions of their dimensions and seed.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ValidationError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

# canonical source files, e.g. under https://ossci-datasets.s3.amazonaws.com/mnist/
# (fetch manually; this module performs no network I/O)
MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


@dataclass
class TaskBatch:
    inputs: np.ndarray           # [batch, T, n_in]
    targets: np.ndarray          # [batch, 1] floats or [batch, T] int labels
    mask: np.ndarray | None = None  # positions that count toward accuracy


def gen_adding(T: int, batch: int, seed=None) -> TaskBatch:
    """Adding problem: values in U(0,1), one marker per sequence half."""
    if T < 2:
        raise ValidationError(f"adding task needs T >= 2, got {T}")
    rng = np.random.default_rng(seed)
    values = rng.random((batch, T))
    first = rng.integers(0, T // 2, size=batch)
    second = rng.integers(T // 2, T, size=batch)
    inputs = np.zeros((batch, T, 2))
    inputs[:, :, 0] = values
    rows = np.arange(batch)
    inputs[rows, first, 1] = 1.0
    inputs[rows, second, 1] = 1.0
    targets = (values[rows, first] + values[rows, second])[:, None]
    return TaskBatch(inputs=inputs, targets=targets)


def gen_copy(T: int, n: int, batch: int, seed=None) -> TaskBatch:
    """Copy-memory problem: 10 symbols, T blanks, marker, 10 blanks.

    Inputs are one-hot over n+2 symbols (blank 0, data 1..n, marker n+1);
    targets are blank everywhere except the last 10 steps, which repeat
    the leading symbols.  The mask flags those recall positions.
    """
    if n < 2:
        raise ValidationError(f"copy task needs n >= 2, got {n}")
    rng = np.random.default_rng(seed)
    length = T + 21
    symbols = rng.integers(1, n + 1, size=(batch, 10))
    stream = np.zeros((batch, length), dtype=np.int64)
    stream[:, :10] = symbols
    stream[:, 10 + T] = n + 1
    inputs = np.zeros((batch, length, n + 2))
    inputs[np.arange(batch)[:, None], np.arange(length)[None, :], stream] = 1.0
    targets = np.zeros((batch, length), dtype=np.int64)
    targets[:, -10:] = symbols
    mask = np.zeros((batch, length), dtype=bool)
    mask[:, -10:] = True
    return TaskBatch(inputs=inputs, targets=targets, mask=mask)


# -- Monte-Carlo baseline oracles ------------------------------------------------


def adding_constant_baseline(samples: int = 100_000, seed: int = 0,
                             prediction: float = 1.0, T: int = 10) -> float:
    """MSE of a constant predictor, estimated through the generator."""
    total = 0.0
    done = 0
    step = 0
    while done < samples:
        b = min(10_000, samples - done)
        batch = gen_adding(T, b, seed=[seed, step])
        total += np.sum((prediction - batch.targets) ** 2)
        done += b
        step += 1
    return total / samples


def copy_random_guess_ce(T: int = 150, n: int = 8, samples: int = 100_000,
                         seed: int = 0) -> float:
    """Cross entropy of blank-aware uniform guessing, averaged over
    the whole sequence (the n+1 output classes carry the guess)."""
    from .autodiff import Tensor, softmax_cross_entropy

    classes = n + 1
    length = T + 21
    total = 0.0
    done = 0
    step = 0
    while done < samples:
        b = max(1, min(2_000, samples - done) // length)
        batch = gen_copy(T, n, b, seed=[seed, step])
        logits = np.zeros((b * length, classes))
        confident_blank = np.full(classes, -60.0)
        confident_blank[0] = 0.0
        flat_mask = batch.mask.T.reshape(-1)
        logits[~flat_mask] = confident_blank
        labels = batch.targets.T.reshape(-1)
        total += softmax_cross_entropy(Tensor(logits), labels).item() * b
        done += b
        step += 1
    return total / done


# -- MNIST IDX ---------------------------------------------------------------------


def _open_maybe_gzip(path):
    f = open(path, "rb")
    head = f.read(2)
    f.seek(0)
    if head == b"\x1f\x8b":
        return gzip.open(f)
    return f


def _read_exact(f, count: int, path, offset: int) -> bytes:
    data = f.read(count)
    if len(data) != count:
        raise FormatError(
            f"{path}: truncated at offset {offset + len(data)} "
            f"(wanted {count} bytes, got {len(data)})"
        )
    return data


def load_mnist_idx(images_path, labels_path):
    """Parse the big-endian IDX pair into ([N,28,28] floats in [0,1], [N] ints)."""
    with _open_maybe_gzip(images_path) as f:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, images_path, 0))
        if magic != IMAGES_MAGIC:
            raise FormatError(
                f"{images_path}: bad magic 0x{magic:08x} at offset 0 "
                f"(expected 0x{IMAGES_MAGIC:08x})"
            )
        raw = _read_exact(f, count * rows * cols, images_path, 16)
    images = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows, cols) / 255.0
    with _open_maybe_gzip(labels_path) as f:
        magic, n_labels = struct.unpack(">II", _read_exact(f, 8, labels_path, 0))
        if magic != LABELS_MAGIC:
            raise FormatError(
                f"{labels_path}: bad magic 0x{magic:08x} at offset 0 "
                f"(expected 0x{LABELS_MAGIC:08x})"
            )
        raw = _read_exact(f, n_labels, labels_path, 8)
    labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    if n_labels != count:
        raise FormatError(
            f"{labels_path}: {n_labels} labels for {count} images in {images_path}"
        )
    return images, labels


def find_mnist(data_dir) -> dict | None:
    """Locate the four IDX files (optionally .gz) under data_dir, else None."""
    import os

    if data_dir is None:
        return None
    found = {}
    for key, name in MNIST_FILES.items():
        for candidate in (name, name + ".gz"):
            path = os.path.join(data_dir, candidate)
            if os.path.exists(path):
                found[key] = path
                break
        else:
            return None
    return found


def downscale(images: np.ndarray, factor: int = 2) -> np.ndarray:
    """Non-overlapping average pooling over the trailing two axes."""
    h, w = images.shape[-2:]
    if h % factor or w % factor:
        raise ValidationError(f"image size {h}x{w} not divisible by {factor}")
    shape = images.shape[:-2] + (h // factor, factor, w // factor, factor)
    return images.reshape(shape).mean(axis=(-3, -1))


# -- metrics -----------------------------------------------------------------------


def adding_accuracy(pred: np.ndarray, target: np.ndarray) -> float:
    """Fraction of sums within 0.05 of the truth."""
    pred = np.asarray(pred).reshape(-1)
    target = np.asarray(target).reshape(-1)
    return float(np.mean(np.abs(pred - target) < 0.05))


def copy_predictions(logits: np.ndarray, batch: int, length: int) -> np.ndarray:
    """Reshape step-major [(T*batch), classes] logits into [batch, T] classes."""
    return logits.argmax(axis=1).reshape(length, batch).T


def copy_accuracy(pred_classes: np.ndarray, target: np.ndarray,
                  mask: np.ndarray) -> float:
    """Match rate of predicted symbols over the masked recall positions."""
    return float(np.mean(pred_classes[mask] == target[mask]))


# -- inspection export ---------------------------------------------------------------


def batch_to_csv(batch: TaskBatch, path):
    """One row per sample: flattened inputs, then the sample's targets."""
    n = batch.inputs.shape[0]
    flat_in = batch.inputs.reshape(n, -1)
    flat_tgt = np.asarray(batch.targets).reshape(n, -1)
    header = [f"x{i}" for i in range(flat_in.shape[1])]
    header += [f"y{i}" for i in range(flat_tgt.shape[1])]
    with open(path, "w") as f:
        f.write(",".join(header) + "\n")
        for row_in, row_tgt in zip(flat_in, flat_tgt):
            f.write(",".join(format(v, "g") for v in row_in))
            f.write(",")
            f.write(",".join(format(v, "g") for v in row_tgt))
            f.write("\n")
