"""Datasets (ring of Gaussians, MNIST IDX files) and file emitters (PGM, CSV)."""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass

import numpy as np

from .tensor import make_rng

__all__ = [
    "RingSpec",
    "FormatError",
    "ring_centers",
    "sample_ring",
    "mode_coverage",
    "load_mnist_idx",
    "write_idx",
    "write_pgm_grid",
    "read_pgm",
    "write_csv",
]

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class RingSpec:
    num_modes: int = 8
    radius: float = 1.0
    mode_std: float = 0.05

    def __post_init__(self):
        if self.num_modes < 1:
            raise ValueError("num_modes must be >= 1")
        if not self.radius > 0 or self.mode_std < 0:
            raise ValueError("radius must be > 0 and mode_std >= 0")


def ring_centers(spec: RingSpec) -> np.ndarray:
    angles = 2.0 * math.pi * np.arange(spec.num_modes) / spec.num_modes
    return spec.radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def sample_ring(spec: RingSpec, n, rng=None) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = make_rng(rng)
    centers = ring_centers(spec)
    idx = rng.integers(0, spec.num_modes, size=n)
    return centers[idx] + spec.mode_std * rng.standard_normal((n, 2))


def mode_coverage(samples, spec: RingSpec, threshold=None) -> float:
    """Fraction of modes with at least one sample within ``threshold`` (default 3 std)."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[1] != 2:
        raise ValueError("mode coverage needs (n, 2) samples")
    if threshold is None:
        threshold = 3.0 * spec.mode_std
    if not len(samples):
        return 0.0
    d = np.linalg.norm(samples[:, None, :] - ring_centers(spec)[None], axis=2)
    hit = np.any(d <= threshold, axis=0)
    return float(np.mean(hit))


# --------------------------------------------------------------------------
# IDX
# --------------------------------------------------------------------------

def _read_idx(path, magic, ndims):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 + 4 * ndims:
        raise FormatError(f"{path}: truncated header")
    got = struct.unpack(">I", blob[:4])[0]
    if got != magic:
        raise FormatError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(">" + "I" * ndims, blob[4:4 + 4 * ndims])
    payload = blob[4 + 4 * ndims:]
    need = int(np.prod(dims))
    if len(payload) != need:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, header says {need}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_mnist_idx(images_path, labels_path=None):
    """Read IDX image (and optionally label) files.

    Returns ``(images, labels)`` with images as ``(n, 1, rows, cols)`` float64
    in ``[0, 1]``; ``labels`` is None when no label file is given.
    """
    raw = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    images = (raw.astype(np.float64) / 255.0)[:, None, :, :]
    labels = None
    if labels_path is not None:
        labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1).astype(np.int64)
        if len(labels) != len(images):
            raise FormatError(f"{len(images)} images but {len(labels)} labels")
    return images, labels


def write_idx(path, array):
    """Write a uint8 array as an IDX file (images if 3-D, labels if 1-D)."""
    arr = np.asarray(array, dtype=np.uint8)
    magic = {3: IDX_IMAGES_MAGIC, 1: IDX_LABELS_MAGIC}.get(arr.ndim)
    if magic is None:
        raise ValueError("IDX writer supports 1-D labels or 3-D images")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(">" + "I" * arr.ndim, *arr.shape))
        fh.write(arr.tobytes())


# --------------------------------------------------------------------------
# PGM / CSV
# --------------------------------------------------------------------------

def write_pgm_grid(images, cols, path, value_range=(0.0, 1.0)):
    """Tile grayscale images row-major into one binary (P5) 8-bit PGM."""
    imgs = np.asarray(images, dtype=np.float64)
    if imgs.ndim == 4:
        if imgs.shape[1] != 1:
            raise ValueError("PGM grids are grayscale; expected one channel")
        imgs = imgs[:, 0]
    if imgs.ndim != 3:
        raise ValueError("images must be (n, h, w) or (n, 1, h, w)")
    if cols < 1:
        raise ValueError("cols must be >= 1")
    n, h, w = imgs.shape
    rows = max(1, math.ceil(n / cols))
    lo, hi = value_range
    q = np.rint((np.clip(imgs, lo, hi) - lo) / (hi - lo) * 255.0).astype(np.uint8)
    grid = np.zeros((rows * h, cols * w), dtype=np.uint8)
    for k in range(n):
        r, c = divmod(k, cols)
        grid[r * h:(r + 1) * h, c * w:(c + 1) * w] = q[k]
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols * w} {rows * h}\n255\n".encode("ascii"))
        fh.write(grid.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    parts = blob.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise FormatError("only 8-bit PGM is supported")
    data = blob[len(blob) - w * h:]
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v
