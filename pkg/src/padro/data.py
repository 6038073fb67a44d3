"""Synthetic training pairs, measurement noise and MNIST IDX input/output."""

from __future__ import annotations

import gzip
import os
import struct
import urllib.request
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import EmpiricalJoint
from .inverse_models import apply_forward
from .perturbation import _generator

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

MNIST_FILES = {
    "train-images-idx3-ubyte.gz": 9912422,
    "train-labels-idx1-ubyte.gz": 28881,
    "t10k-images-idx3-ubyte.gz": 1648877,
    "t10k-labels-idx1-ubyte.gz": 4542,
}
MNIST_MIRROR = "https://ossci-datasets.s3.amazonaws.com/mnist/"


class IdxFormatError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


# ---------------------------------------------------------------------------
# Synthetic data and noise
# ---------------------------------------------------------------------------

def sample_uniform_square(count: int, dim: int, rng) -> np.ndarray:
    """``count`` i.i.d. points uniform on ``[0, 1]^dim``."""
    if count < 1:
        raise ValueError("count must be at least 1")
    return _generator(rng).uniform(0.0, 1.0, size=(count, dim))


def poisson_noise(clean, sigma: float, rng) -> np.ndarray:
    """``sigma * Pois(clean / sigma)`` entrywise, so the mean equals ``clean``."""
    clean = np.asarray(clean, dtype=float)
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    if np.any(clean < 0):
        raise ValueError("Poisson intensities must be nonnegative")
    return sigma * _generator(rng).poisson(clean / sigma).astype(float)


@dataclass(frozen=True)
class NoiseModel:
    kind: str = "none"
    sigma: float | None = None

    def __post_init__(self):
        if self.kind not in ("none", "gaussian", "poisson"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.kind != "none" and not (self.sigma is not None and self.sigma > 0):
            raise ValueError(f"{self.kind} noise needs sigma > 0")

    def __str__(self):
        return self.kind if self.kind == "none" else f"{self.kind}({self.sigma:g})"

    def apply(self, clean, rng) -> np.ndarray:
        clean = np.asarray(clean, dtype=float)
        if self.kind == "none":
            return clean.copy()
        if self.kind == "gaussian":
            return clean + self.sigma * _generator(rng).standard_normal(clean.shape)
        # blurred nonnegative images can pick up -0.0 style rounding; clip it
        return poisson_noise(np.maximum(clean, 0.0), self.sigma, rng)


def make_dataset(xs, H, noise: NoiseModel = NoiseModel(), rng=None) -> EmpiricalJoint:
    """Pairs ``(x_i, H x_i + noise)``."""
    xs = np.asarray(xs, dtype=float)
    clean = apply_forward(H, xs)
    if noise.kind != "none" and rng is None:
        raise ValueError("noisy datasets need a random stream")
    return EmpiricalJoint(xs, noise.apply(clean, rng))


# ---------------------------------------------------------------------------
# IDX files
# ---------------------------------------------------------------------------

def _open(path):
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(2)
    return gzip.open(path, "rb") if head == b"\x1f\x8b" else open(path, "rb")


def _read_idx(path, magic, ndims):
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated magic number", len(raw))
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise IdxFormatError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}", 0)
    header = 4 + 4 * ndims
    if len(raw) < header:
        raise IdxFormatError(f"{path}: truncated header", len(raw))
    dims = struct.unpack(f">{ndims}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header < size:
        raise IdxFormatError(
            f"{path}: payload has {len(raw) - header} bytes, dims {dims} need {size}", len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_mnist_idx(images_path, labels_path=None, limit: int | None = None):
    """Read an IDX image file (optionally labels) and scale pixels to ``[0, 1]``.

    Returns
    -------
    images : ndarray, shape (count, 28, 28)
    labels : ndarray or None
    """
    raw = _read_idx(images_path, IMAGE_MAGIC, 3)
    if raw.shape[1:] != (28, 28):
        raise IdxFormatError(f"{images_path}: image dims {raw.shape[1:]}, expected (28, 28)", 8)
    labels = None
    if labels_path is not None:
        labels = _read_idx(labels_path, LABEL_MAGIC, 1)
        if len(labels) != len(raw):
            raise IdxFormatError(
                f"{labels_path}: {len(labels)} labels for {len(raw)} images", 4)
    if limit is not None:
        raw = raw[:limit]
        labels = None if labels is None else labels[:limit]
    images = raw.astype(float) / 255.0
    return images, (None if labels is None else labels.astype(int))


def write_idx(path, array, compress: bool | None = None):
    """Write a uint8 array as IDX (images if 3-D, labels if 1-D)."""
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        raise ValueError("IDX payload must be uint8")
    magic = {3: IMAGE_MAGIC, 1: LABEL_MAGIC}.get(arr.ndim)
    if magic is None:
        raise ValueError("only 1-D label or 3-D image arrays are supported")
    blob = struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.tobytes()
    path = Path(path)
    if compress is None:
        compress = path.suffix == ".gz"
    # fixed mtime keeps the gzip bytes reproducible
    data = gzip.compress(blob, mtime=0) if compress else blob
    path.write_bytes(data)


def mnist_paths(directory, split: str = "t10k"):
    directory = Path(directory)
    out = []
    for kind in ("images-idx3-ubyte", "labels-idx1-ubyte"):
        base = directory / f"{split}-{kind}"
        for cand in (base.with_name(base.name + ".gz"), base):
            if cand.exists():
                out.append(cand)
                break
        else:
            out.append(None)
    return tuple(out)


def fetch_mnist(directory, base_url: str = MNIST_MIRROR, opener=urllib.request.urlopen):
    """Download the four MNIST archives and check their published sizes.

    Files already present with the right size are kept.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    fetched = []
    for name, size in MNIST_FILES.items():
        target = directory / name
        if target.exists() and target.stat().st_size == size:
            continue
        with opener(base_url + name) as resp:
            blob = resp.read()
        if len(blob) != size:
            raise IOError(f"{name}: got {len(blob)} bytes, published size is {size}")
        tmp = target.with_suffix(".part")
        tmp.write_bytes(blob)
        os.replace(tmp, target)
        fetched.append(name)
    return fetched
