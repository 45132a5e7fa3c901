"""Synthetic stripe datasets, the three resampling transforms, and the
DYNP binary file format."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple, Union

import numpy as np

MAGIC = b"DYNP"
VERSION = 1
_HEADER = struct.Struct("<4s6I")


class DatasetFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] float32 in [0, 1]
    labels: np.ndarray  # [N] int64 in [0, num_classes)
    num_classes: int

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be [N,C,H,W], got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)


def split(data: Dataset, seed: int, eval_fraction: float = 0.1) -> Tuple[Dataset, Dataset]:
    order = np.random.default_rng([seed, 0x5EED]).permutation(len(data))
    n_eval = max(1, int(round(len(data) * eval_fraction)))
    return data.subset(np.sort(order[n_eval:])), data.subset(np.sort(order[:n_eval]))


# ----------------------------------------------------------------- generation
def class_periods(k: int, shortest: float = 2.4, longest: float = 4.0) -> np.ndarray:
    """Horizontal stripe period (pixels) of each class, geometrically spaced."""
    return shortest * (longest / shortest) ** (np.arange(k) / max(k - 1, 1))


def make_base(seed: int, n: int, k: int, size: int, channels: int = 1) -> Dataset:
    """Noisy stripe patches whose class is the horizontal stripe period.

    Class ``c`` is a near-vertical grating (intensity varies along x) with
    period ``class_periods(k)[c]``. A horizontal grating of random period
    and strength is added as a distractor, so vertical structure carries no
    label information. Contrast, phase, tilt, window and noise are drawn
    per image.
    """
    if size < 8:
        raise ValueError(f"size must be >= 8, got {size}")
    if k < 2:
        raise ValueError(f"need at least 2 classes, got {k}")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % k).astype(np.int64)

    period = class_periods(k)[labels] * rng.uniform(0.95, 1.05, n)
    tilt = rng.uniform(-0.12, 0.12, n)
    phase = rng.uniform(0.0, 2 * np.pi, (n, 2))
    contrast = rng.uniform(0.25, 0.35, n)
    distract_period = rng.uniform(2.4, 8.0, n)
    distract = rng.uniform(0.0, 0.3, n)
    center = rng.uniform(0.3 * size, 0.7 * size, (n, 2))
    sigma = rng.uniform(0.3 * size, 0.5 * size, n)

    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    along = xx[None] + yy[None] * tilt[:, None, None]
    signal = np.cos(2 * np.pi * along / period[:, None, None] + phase[:, 0, None, None])
    clutter = np.cos(2 * np.pi * yy[None] / distract_period[:, None, None] + phase[:, 1, None, None])
    dist2 = (yy[None] - center[:, 0, None, None]) ** 2 + (xx[None] - center[:, 1, None, None]) ** 2
    window = np.exp(-dist2 / (2 * sigma[:, None, None] ** 2))

    img = 0.5 + window * (contrast[:, None, None] * signal + distract[:, None, None] * clutter)
    img = img[:, None] + rng.normal(0.0, 0.25, (n, channels, size, size))
    return Dataset(np.clip(img, 0.0, 1.0).astype(np.float32), labels, k)


def resample_axis(images: np.ndarray, axis: int, out_n: int) -> np.ndarray:
    """Bilinear resampling of one axis with pixel-center alignment.

    Output pixel ``i`` reads source position ``(i + 0.5) * n / out_n - 0.5``,
    clamped to the border.
    """
    n = images.shape[axis]
    pos = np.clip((np.arange(out_n) + 0.5) * n / out_n - 0.5, 0, n - 1)
    lo = np.minimum(np.floor(pos).astype(np.intp), max(n - 2, 0))
    hi = np.minimum(lo + 1, n - 1)
    frac = (pos - lo).astype(images.dtype)
    shape = [1] * images.ndim
    shape[axis] = out_n
    frac = frac.reshape(shape)
    return np.take(images, lo, axis=axis) * (1 - frac) + np.take(images, hi, axis=axis) * frac


def _require_even(data: Dataset) -> None:
    h, w = data.shape[1:]
    if h % 2 or w % 2:
        raise ValueError(f"halving needs even image sizes, got {h}x{w}")


def halve(data: Dataset) -> np.ndarray:
    _require_even(data)
    h, w = data.shape[1:]
    return resample_axis(resample_axis(data.images, 2, h // 2), 3, w // 2)


def transform_stretch_v(data: Dataset, seed: int = 0) -> Dataset:
    """Stretch x2 vertically, then crop a random full-height window."""
    h = data.shape[1]
    tall = resample_axis(data.images, 2, 2 * h)
    offsets = np.random.default_rng([seed, 1]).integers(0, h + 1, len(data))
    rows = offsets[:, None] + np.arange(h)[None]
    out = np.take_along_axis(tall, rows[:, None, :, None], axis=2)
    return Dataset(out.astype(np.float32), data.labels.copy(), data.num_classes)


def transform_stretch_h(data: Dataset, seed: int = 0) -> Dataset:
    """Horizontal counterpart of :func:`transform_stretch_v`."""
    flipped = Dataset(data.images.transpose(0, 1, 3, 2), data.labels, data.num_classes)
    out = transform_stretch_v(flipped, seed)
    return Dataset(np.ascontiguousarray(out.images.transpose(0, 1, 3, 2)), out.labels, out.num_classes)


def transform_tile(data: Dataset, grid: int = 4) -> Dataset:
    """Tile the half-size image on a ``grid`` x ``grid`` lattice."""
    small = halve(data)
    out = np.tile(small, (1, 1, grid, grid))
    return Dataset(out.astype(np.float32), data.labels.copy(), data.num_classes)


def transform_large(data: Dataset, factor: int = 4) -> Dataset:
    """Upsample the half-size image by ``factor`` (x2 the original size)."""
    small = halve(data)
    h, w = small.shape[2:]
    out = resample_axis(resample_axis(small, 2, factor * h), 3, factor * w)
    return Dataset(out.astype(np.float32), data.labels.copy(), data.num_classes)


TRANSFORMS = ("base", "stretch_v", "stretch_h", "tile", "large")


def generate(transform: str, seed: int, n: int, k: int, size: int) -> Dataset:
    if transform not in TRANSFORMS:
        raise ValueError(f"unknown transform {transform!r}; choose from {TRANSFORMS}")
    if transform in ("tile", "large") and size % 2:
        raise ValueError(f"odd size {size}: the tile and large transforms halve the image exactly")
    base = make_base(seed, n, k, size)
    if transform == "stretch_v":
        return transform_stretch_v(base, seed)
    if transform == "stretch_h":
        return transform_stretch_h(base, seed)
    if transform == "tile":
        return transform_tile(base)
    if transform == "large":
        return transform_large(base)
    return base


# ---------------------------------------------------------------------- files
def save(data: Dataset, path: Union[str, Path]) -> None:
    n, c, h, w = data.images.shape
    pixels = np.round(np.clip(data.images, 0, 1) * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n, c, h, w, data.num_classes))
        fh.write(pixels.tobytes(order="C"))
        fh.write(data.labels.astype("<u2").tobytes())


def load(path: Union[str, Path]) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DatasetFormatError("file too short for a DYNP header")
    magic, version, n, c, h, w, k = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise DatasetFormatError(f"unsupported version {version}")
    npix = n * c * h * w
    if len(raw) != _HEADER.size + npix + 2 * n:
        raise DatasetFormatError("file size does not match header")
    pixels = np.frombuffer(raw, np.uint8, npix, _HEADER.size).reshape(n, c, h, w)
    labels = np.frombuffer(raw, "<u2", n, _HEADER.size + npix).astype(np.int64)
    if n and labels.max() >= k:
        raise DatasetFormatError(f"label {labels.max()} out of range for {k} classes")
    return Dataset(pixels.astype(np.float32) / 255.0, labels, k)
