"""Datasets: seeded synthetic blobs, IDX image files, CSV tables, splits."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class FormatError(ValueError):
    """File bytes do not match the declared format."""


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray
    y: np.ndarray
    classes: int
    source: str = ""

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=np.float64))
        object.__setattr__(self, "y", np.asarray(self.y, dtype=np.int64))
        if self.x.ndim != 2 or self.y.ndim != 1 or self.x.shape[0] != self.y.shape[0]:
            raise ValueError(f"bad dataset shapes x {self.x.shape}, y {self.y.shape}")
        if not np.all(np.isfinite(self.x)):
            raise ValueError("features contain non-finite values")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.classes):
            raise ValueError(f"labels outside [0, {self.classes})")

    @property
    def m(self) -> int:
        return self.y.size

    def __len__(self) -> int:
        return self.m

    def take(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.classes, self.source)


def gen_blobs(seed, m: int = 1000, classes: int = 2, spread: float = 0.35,
              label_noise: float = 0.1) -> Dataset:
    """Gaussian class clusters centered on the unit circle.

    label_noise is the fraction of points (an exact count, seeded choice)
    whose label is replaced by a uniform draw over the other classes, so the
    flip rate matches the requested fraction.
    """
    if m < classes:
        raise ValueError(f"m={m} smaller than class count {classes}")
    if not 0.0 <= label_noise < 1.0:
        raise ValueError(f"label_noise {label_noise} outside [0, 1)")
    if spread <= 0.0:
        raise ValueError(f"spread must be positive, got {spread}")
    rng = seed if isinstance(seed, np.random.Generator) else \
        np.random.Generator(np.random.PCG64(seed))
    angles = 2.0 * np.pi * np.arange(classes) / classes
    centers = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    y = np.arange(m) % classes
    x = centers[y] + spread * rng.standard_normal((m, 2))
    n_flip = int(round(label_noise * m))
    if n_flip:
        picked = rng.choice(m, size=n_flip, replace=False)
        shift = rng.integers(1, classes, size=n_flip)
        y = y.copy()
        y[picked] = (y[picked] + shift) % classes
    perm = rng.permutation(m)
    return Dataset(x[perm], y[perm], classes, source=f"blobs(m={m},c={classes})")


def _read_be32(buf: bytes, off: int) -> int:
    return struct.unpack(">i", buf[off:off + 4])[0]


def load_idx(images_path: str, labels_path: str) -> Dataset:
    """MNIST-style IDX pair: big-endian headers, unsigned byte payloads.

    Pixels are scaled to [0, 1] and flattened row-major.
    """
    with open(images_path, "rb") as f:
        img = f.read()
    with open(labels_path, "rb") as f:
        lab = f.read()
    if len(img) < 16:
        raise FormatError(f"{images_path}: truncated header")
    magic = _read_be32(img, 0)
    if magic != IDX_IMAGE_MAGIC:
        raise FormatError(f"{images_path}: magic {magic:#010x}, expected {IDX_IMAGE_MAGIC:#010x}")
    n, rows, cols = _read_be32(img, 4), _read_be32(img, 8), _read_be32(img, 12)
    need = 16 + n * rows * cols
    if len(img) != need:
        raise FormatError(f"{images_path}: payload {len(img) - 16} bytes, expected {need - 16}")
    if len(lab) < 8:
        raise FormatError(f"{labels_path}: truncated header")
    lmagic = _read_be32(lab, 0)
    if lmagic != IDX_LABEL_MAGIC:
        raise FormatError(f"{labels_path}: magic {lmagic:#010x}, expected {IDX_LABEL_MAGIC:#010x}")
    ln = _read_be32(lab, 4)
    if len(lab) != 8 + ln:
        raise FormatError(f"{labels_path}: payload {len(lab) - 8} bytes, expected {ln}")
    if ln != n:
        raise FormatError(f"image count {n} != label count {ln}")
    pixels = np.frombuffer(img, dtype=np.uint8, offset=16).reshape(n, rows * cols)
    labels = np.frombuffer(lab, dtype=np.uint8, offset=8).astype(np.int64)
    classes = int(labels.max()) + 1 if ln else 1
    return Dataset(pixels / 255.0, labels, classes, source=f"idx({images_path})")


def load_csv(path: str) -> Dataset:
    """Header row, float feature columns, last column an integer class label."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        rows = [r for r in reader if r]
    if not rows:
        raise FormatError(f"{path}: no data rows")
    try:
        x = np.array([[float(v) for v in r[:-1]] for r in rows])
        y = np.array([int(r[-1]) for r in rows])
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    return Dataset(x, y, int(y.max()) + 1, source=f"csv({path})")


def save_csv(ds: Dataset, path: str) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([f"x{i}" for i in range(ds.x.shape[1])] + ["label"])
        for xi, yi in zip(ds.x, ds.y):
            w.writerow([repr(float(v)) for v in xi] + [int(yi)])


def _counts(m: int, fractions) -> list:
    """Largest-remainder apportionment of m items over the fractions."""
    raw = [f * m for f in fractions]
    base = [int(np.floor(r)) for r in raw]
    short = m - sum(base)
    order = np.argsort([b - r for b, r in zip(base, raw)], kind="stable")
    for i in order[:short]:
        base[i] += 1
    return base


def split(dataset: Dataset, fractions, seed, stratify: bool = False) -> tuple:
    """Seeded permutation, then contiguous slices: (train, heldout, test)."""
    fractions = [float(f) for f in fractions]
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ValueError(f"need three nonnegative fractions, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions sum to {sum(fractions)}, not 1")
    rng = seed if isinstance(seed, np.random.Generator) else \
        np.random.Generator(np.random.PCG64(seed))
    if stratify:
        parts = [[], [], []]
        for c in range(dataset.classes):
            idx = np.flatnonzero(dataset.y == c)
            idx = idx[rng.permutation(idx.size)]
            edges = np.cumsum([0] + _counts(idx.size, fractions))
            for j in range(3):
                parts[j].append(idx[edges[j]:edges[j + 1]])
        picks = [rng.permutation(np.concatenate(p)) if p else np.array([], dtype=int)
                 for p in parts]
    else:
        perm = rng.permutation(dataset.m)
        edges = np.cumsum([0] + _counts(dataset.m, fractions))
        picks = [perm[edges[j]:edges[j + 1]] for j in range(3)]
    return tuple(dataset.take(p) for p in picks)
