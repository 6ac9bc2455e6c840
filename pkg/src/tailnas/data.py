"""Synthetic long-tailed datasets with exact imbalance-ratio control.

Classes are distinct oriented gratings: class c gets a fixed orientation
and spatial frequency, every sample draws a fresh phase, a small
orientation jitter, and Gaussian pixel noise. Phase randomization means no
single pixel separates classes; local spatial structure does, so
convolutional capacity matters.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from tailnas.errors import ShapeError, SplitWarning

_MAGIC = b"LTDB"
_VERSION = 1


@dataclass(frozen=True)
class LongTailSpec:
    n_classes: int = 10
    n_max: int = 100
    rho: float = 100.0
    image_size: tuple = (3, 16, 16)
    seed: int = 0
    test_per_class: int = 20
    noise: float = 0.35

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.n_classes}")
        if self.rho < 1:
            raise ValueError(f"imbalance ratio must be >= 1, got {self.rho}")
        if self.n_max < 1:
            raise ValueError(f"n_max must be positive, got {self.n_max}")


@dataclass
class LabeledDataset:
    images: np.ndarray  # (N, channels, H, W) float64
    labels: np.ndarray  # (N,) int64
    n_classes: int
    per_class_counts: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ShapeError(f"images {self.images.shape} vs labels {self.labels.shape}")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("label out of range")
        self.per_class_counts = np.bincount(self.labels, minlength=self.n_classes).astype(np.int64)

    def __len__(self):
        return int(self.labels.shape[0])

    def subset(self, idx):
        return LabeledDataset(self.images[idx], self.labels[idx], self.n_classes)

    def iter_batches(self, batch_size, rng=None):
        """Yield (images, labels) batches; shuffled when rng is given."""
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for lo in range(0, len(self), batch_size):
            sel = order[lo : lo + batch_size]
            yield self.images[sel], self.labels[sel]

    def save(self, path):
        """Flat binary dump: LTDB header + int32 labels + float64 pixels, little-endian."""
        n, c, h, w = self.images.shape
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<IIQIII", _VERSION, self.n_classes, n, c, h, w))
            fh.write(self.labels.astype("<i4").tobytes())
            fh.write(self.images.astype("<f8").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            if fh.read(4) != _MAGIC:
                raise ValueError(f"{path} is not a dataset dump (bad magic)")
            version, n_classes, n, c, h, w = struct.unpack("<IIQIII", fh.read(28))
            if version != _VERSION:
                raise ValueError(f"unsupported dataset version {version}")
            labels = np.frombuffer(fh.read(4 * n), dtype="<i4").astype(np.int64)
            images = np.frombuffer(fh.read(8 * n * c * h * w), dtype="<f8").reshape(n, c, h, w).copy()
        return cls(images, labels, n_classes)


def class_counts(spec):
    """Exponential long-tail profile: n_i = round(n_max * rho^(-i/(C-1))), min 1."""
    c = spec.n_classes
    i = np.arange(c)
    counts = np.round(spec.n_max * spec.rho ** (-i / (c - 1))).astype(np.int64)
    return np.maximum(counts, 1)


def _class_pattern_bank(spec):
    """Per-class (orientation, frequency) assignments, seeded by the spec."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xC1A55]))
    c = spec.n_classes
    base_angles = np.pi * (np.arange(c) % ((c + 1) // 2)) / ((c + 1) // 2)
    angles = base_angles + rng.uniform(-0.05, 0.05, size=c)
    # alternate between a low and a high spatial frequency band
    freqs = np.where(np.arange(c) < (c + 1) // 2, 0.18, 0.32)
    freqs = freqs * (1.0 + rng.uniform(-0.03, 0.03, size=c))
    return angles, freqs


def _render(spec, label, rng, angles, freqs):
    ch, h, w = spec.image_size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    theta = angles[label] + rng.normal(0.0, 0.04)
    freq = freqs[label] * (1.0 + rng.normal(0.0, 0.02))
    phase = rng.uniform(0.0, 2 * np.pi)
    wave = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    img = np.repeat(wave[None, :, :], ch, axis=0)
    img += rng.normal(0.0, spec.noise, size=img.shape)
    return img


def _make_set(spec, counts, stream_key):
    angles, freqs = _class_pattern_bank(spec)
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, stream_key]))
    images, labels = [], []
    for label, n in enumerate(counts):
        for _ in range(int(n)):
            images.append(_render(spec, label, rng, angles, freqs))
            labels.append(label)
    ch, h, w = spec.image_size
    images = np.asarray(images).reshape(len(labels), ch, h, w)
    return LabeledDataset(images, np.asarray(labels, dtype=np.int64), spec.n_classes)


def synthesize(spec):
    """Build (long-tailed train set, balanced test set); bit-deterministic per seed."""
    train = _make_set(spec, class_counts(spec), stream_key=1)
    test = _make_set(spec, [spec.test_per_class] * spec.n_classes, stream_key=2)
    return train, test


def bilevel_split(train, fraction=0.5, seed=0):
    """Stratified disjoint split into (weight-fitting half, alpha-fitting half).

    Preserves the long-tailed profile on both sides. A single-sample class
    goes entirely to the weight half and raises a SplitWarning.
    """
    if not 0 < fraction < 1:
        raise ValueError(f"fraction must be in (0,1), got {fraction}")
    rng = np.random.default_rng(seed)
    w_idx, a_idx = [], []
    for c in range(train.n_classes):
        idx = np.flatnonzero(train.labels == c)
        if len(idx) == 0:
            continue
        idx = rng.permutation(idx)
        n_w = max(1, int(np.floor(fraction * len(idx) + 0.5)))
        if n_w >= len(idx):
            n_w = len(idx)
            warnings.warn(
                f"class {c} has {len(idx)} sample(s); alpha half receives none",
                SplitWarning,
            )
        w_idx.append(idx[:n_w])
        a_idx.append(idx[n_w:])
    w_idx = np.sort(np.concatenate(w_idx))
    a_idx = np.sort(np.concatenate(a_idx)) if any(len(a) for a in a_idx) else np.array([], dtype=np.int64)
    return train.subset(w_idx), train.subset(a_idx)


def load_records(path, image_size, n_classes, scale=1.0 / 255.0):
    """Read a record-per-row binary file (1 label byte + pixel bytes per record).

    The layout used by the common small-image archives; pixels are scaled
    to [0, scale*255].
    """
    ch, h, w = image_size
    rec = 1 + ch * h * w
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % rec:
        raise ValueError(f"{path}: size {raw.size} is not a multiple of record length {rec}")
    raw = raw.reshape(-1, rec)
    labels = raw[:, 0].astype(np.int64)
    images = raw[:, 1:].reshape(-1, ch, h, w).astype(np.float64) * scale
    return LabeledDataset(images, labels, n_classes)


def subsample_to_profile(dataset, counts, seed=0):
    """Trim a dataset to the given per-class counts (for real-data substitutes)."""
    rng = np.random.default_rng(seed)
    keep = []
    for c, n in enumerate(counts):
        idx = np.flatnonzero(dataset.labels == c)
        if len(idx) < n:
            raise ValueError(f"class {c} has {len(idx)} samples, need {n}")
        keep.append(rng.permutation(idx)[:n])
    keep = np.sort(np.concatenate(keep))
    return dataset.subset(keep)
