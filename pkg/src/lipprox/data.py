"""Datasets: MNIST in IDX format and seeded Gaussian blobs."""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .numerics import make_rng

__all__ = [
    "IdxError",
    "IdxBadMagicError",
    "IdxTruncatedError",
    "IdxCountMismatchError",
    "read_idx",
    "write_idx",
    "load_mnist_idx",
    "synth_blobs",
    "train_test_split",
]

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxError(ValueError):
    pass


class IdxBadMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxCountMismatchError(IdxError):
    pass


def _read_bytes(path) -> bytes:
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as f:
            return f.read()
    return path.read_bytes()


def read_idx(path, magic: int) -> np.ndarray:
    """Unsigned-byte IDX array; the header is big-endian."""
    data = _read_bytes(path)
    if len(data) < 4:
        raise IdxTruncatedError(f"{path}: truncated header")
    (got,) = struct.unpack(">I", data[:4])
    if got != magic:
        raise IdxBadMagicError(f"{path}: bad magic {got:#010x}, expected {magic:#010x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(data) < head:
        raise IdxTruncatedError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", data[4:head])
    size = int(np.prod(dims, dtype=np.int64))
    if len(data) - head < size:
        raise IdxTruncatedError(f"{path}: truncated payload ({len(data) - head} of {size} bytes)")
    if len(data) - head > size:
        raise IdxTruncatedError(f"{path}: {len(data) - head - size} trailing bytes")
    return np.frombuffer(data, dtype=np.uint8, count=size, offset=head).reshape(dims)


def write_idx(path, array) -> None:
    a = np.asarray(array)
    if a.dtype != np.uint8:
        raise ValueError("IDX writer only supports unsigned bytes")
    magic = 0x00000800 | a.ndim
    Path(path).write_bytes(struct.pack(f">I{a.ndim}I", magic, *a.shape) + a.tobytes())


def load_mnist_idx(images_path, labels_path):
    """``(x, y)`` with ``x`` of shape ``(n, 28, 28)`` scaled to [0, 1]."""
    images = read_idx(images_path, IMAGES_MAGIC)
    labels = read_idx(labels_path, LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(
            f"count mismatch: {images.shape[0]} images, {labels.shape[0]} labels")
    return images.astype(np.float64) / 255.0, labels.astype(np.int64)


def synth_blobs(seed: int, n: int, classes: int, dim: int, spread: float, scale: float = 3.0):
    """Seeded Gaussian clusters around fixed centers.

    Centers are ``scale * e_k`` when ``classes <= dim`` and a fixed draw
    (independent of ``seed``) otherwise. Noise is isotropic with standard
    deviation ``spread``, radially clipped at ``3 * spread`` so any two classes
    stay separated by at least the center distance minus ``6 * spread``.
    Labels are balanced and the sample order is shuffled.
    """
    if classes < 2 or n < classes or dim < 1:
        raise ValueError(f"invalid counts: n={n}, classes={classes}, dim={dim}")
    if spread < 0:
        raise ValueError("spread must be nonnegative")
    if classes <= dim:
        centers = scale * np.eye(classes, dim)
    else:
        centers = scale * make_rng(0).standard_normal((classes, dim))
    rng = make_rng(seed)
    y = rng.permutation(np.arange(n) % classes)
    noise = rng.standard_normal((n, dim)) * spread
    norms = np.linalg.norm(noise, axis=1, keepdims=True)
    cap = 3.0 * spread
    noise = np.where(norms > cap, noise * cap / np.where(norms > 0, norms, 1.0), noise)
    return centers[y] + noise, y.astype(np.int64)


def train_test_split(x, y, n_test: int, seed: int = 0):
    idx = make_rng(seed).permutation(len(x))
    test, train = idx[:n_test], idx[n_test:]
    return (x[train], y[train]), (x[test], y[test])
