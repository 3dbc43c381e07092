"""Token-feature storage and synthetic needle datasets.

The on-disk format is a flat little-endian binary: magic ``SSMP``, a u32
version, five u32 header fields (grid_h, grid_w, d, num_classes,
sample_count), then per sample the CLS vector (d f32), the patch matrix
(N*d f32, row-major), and a u32 label.  Values live on disk as f32; all
in-memory math runs in f64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .seeding import derive_rng

MAGIC = b"SSMP"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIII")
_LABEL = struct.Struct("<I")


@dataclass
class FeatureSample:
    """One sample: N patch tokens, a CLS token, and a class label."""

    patch_tokens: np.ndarray  # (N, d) f64
    cls_token: np.ndarray  # (d,) f64
    label: int

    def validate(self, n_tokens: int, d: int, num_classes: int) -> None:
        if self.patch_tokens.shape != (n_tokens, d):
            raise ValueError(
                f"patch shape {self.patch_tokens.shape} != ({n_tokens}, {d})"
            )
        if self.cls_token.shape != (d,):
            raise ValueError(f"cls shape {self.cls_token.shape} != ({d},)")
        if not (np.isfinite(self.patch_tokens).all() and np.isfinite(self.cls_token).all()):
            raise ValueError("non-finite value in sample")
        if not 0 <= self.label < num_classes:
            raise ValueError(f"label {self.label} outside [0, {num_classes})")


@dataclass
class FeatureSet:
    """An immutable-by-convention collection of samples over one patch grid."""

    samples: list[FeatureSample]
    grid_h: int
    grid_w: int
    d: int
    num_classes: int
    split_tag: str = ""

    @property
    def n_tokens(self) -> int:
        return self.grid_h * self.grid_w

    def __len__(self) -> int:
        return len(self.samples)

    def validate(self) -> None:
        if self.grid_h < 1 or self.grid_w < 1 or self.d < 1 or self.num_classes < 1:
            raise ValueError("grid dims, d and num_classes must be positive")
        for s in self.samples:
            s.validate(self.n_tokens, self.d, self.num_classes)

    def stacked(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Tokens (n, N, d), CLS (n, d), labels (n,) as contiguous f64 arrays."""
        n = len(self.samples)
        tokens = np.zeros((n, self.n_tokens, self.d))
        cls = np.zeros((n, self.d))
        labels = np.zeros(n, dtype=np.int64)
        for i, s in enumerate(self.samples):
            tokens[i] = s.patch_tokens
            cls[i] = s.cls_token
            labels[i] = s.label
        return tokens, cls, labels


def write_features(fset: FeatureSet, path: str | Path) -> None:
    """Serialize a validated FeatureSet; refuses sets violating invariants."""
    fset.validate()
    with open(path, "wb") as fh:
        fh.write(
            _HEADER.pack(
                MAGIC, VERSION, fset.grid_h, fset.grid_w, fset.d,
                fset.num_classes, len(fset.samples),
            )
        )
        for s in fset.samples:
            fh.write(s.cls_token.astype("<f4").tobytes())
            fh.write(np.ascontiguousarray(s.patch_tokens, dtype="<f4").tobytes())
            fh.write(_LABEL.pack(s.label))


def read_features(path: str | Path, split_tag: str = "") -> FeatureSet:
    """Parse and validate a feature file written by :func:`write_features`."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError("truncated payload: missing header")
    magic, version, grid_h, grid_w, d, num_classes, count = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ValueError(f"version mismatch: file has {version}, expected {VERSION}")
    n_tok = grid_h * grid_w
    sample_bytes = 4 * d + 4 * n_tok * d + _LABEL.size
    expected = _HEADER.size + count * sample_bytes
    if len(raw) != expected:
        raise ValueError(
            f"truncated payload: expected {expected} bytes, file has {len(raw)}"
        )
    samples = []
    off = _HEADER.size
    for _ in range(count):
        cls = np.frombuffer(raw, dtype="<f4", count=d, offset=off).astype(np.float64)
        off += 4 * d
        patches = (
            np.frombuffer(raw, dtype="<f4", count=n_tok * d, offset=off)
            .astype(np.float64)
            .reshape(n_tok, d)
        )
        off += 4 * n_tok * d
        (label,) = _LABEL.unpack_from(raw, off)
        off += _LABEL.size
        if not (np.isfinite(patches).all() and np.isfinite(cls).all()):
            raise ValueError("non-finite value in payload")
        samples.append(FeatureSample(patches, cls, int(label)))
    fset = FeatureSet(samples, grid_h, grid_w, d, num_classes, split_tag)
    fset.validate()
    return fset


@dataclass
class SynthSpec:
    """Recipe for a synthetic needle dataset.

    Class-c samples carry ``needle_count`` tokens set to the class mean
    direction (times ``signal_scale``) plus noise, placed at random grid
    positions; all other tokens are pure noise, except that each background
    token is independently replaced by a wrong-class signal with probability
    ``distractor_rate``.

    ``position_bias`` skews needle placement toward the final quarter of the
    raster order (0 keeps placement uniform); ``distractor_scale`` sets the
    distractor signal amplitude (defaults to ``signal_scale``);
    ``mean_overlap`` mixes a shared carrier direction into every class mean
    (0 keeps the means independent), so signal-bearing tokens share a
    scorer-detectable statistic.  The knobs model the spatially- and
    content-correlated token informativeness seen in real frozen-backbone
    features.
    """

    n_samples: int
    grid_h: int
    grid_w: int
    d: int
    num_classes: int
    needle_count: int = 1
    signal_scale: float = 1.0
    noise_scale: float = 1.0
    distractor_rate: float = 0.0
    seed: int = 0
    split_tag: str = "train"
    position_bias: float = 0.0
    distractor_scale: float | None = None
    mean_overlap: float = 0.0

    def validate(self) -> None:
        n = self.grid_h * self.grid_w
        if self.n_samples < 0 or self.grid_h < 1 or self.grid_w < 1:
            raise ValueError("n_samples must be >= 0 and grid dims positive")
        if self.d < 1 or self.num_classes < 1:
            raise ValueError("d and num_classes must be positive")
        if not 1 <= self.needle_count <= n:
            raise ValueError(f"needle_count must be in [1, {n}]")
        if not 0.0 <= self.distractor_rate <= 1.0:
            raise ValueError("distractor_rate must be in [0, 1]")
        if not 0.0 <= self.position_bias <= 1.0:
            raise ValueError("position_bias must be in [0, 1]")
        if not 0.0 <= self.mean_overlap <= 1.0:
            raise ValueError("mean_overlap must be in [0, 1]")
        if self.signal_scale < 0 or self.noise_scale < 0:
            raise ValueError("scales must be nonnegative")


def synthetic_class_means(spec: SynthSpec) -> np.ndarray:
    """The (num_classes, d) unit class-mean directions a spec generates from.

    Pure function of (seed, num_classes, d, mean_overlap); exposed so tests
    and oracles can score tokens against the ground-truth directions.  With
    mean_overlap > 0 every mean shares a common carrier direction.
    """
    rng = derive_rng(spec.seed, "class-means")
    means = rng.normal(size=(spec.num_classes, spec.d))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    if spec.mean_overlap > 0:
        carrier = rng.normal(size=spec.d)
        carrier /= np.linalg.norm(carrier)
        means = spec.mean_overlap * carrier + (1.0 - spec.mean_overlap) * means
        means /= np.linalg.norm(means, axis=1, keepdims=True)
    return means


def _f32_round(x: np.ndarray) -> np.ndarray:
    # Storage dtype is f32; rounding here keeps write->read an exact identity.
    return x.astype(np.float32).astype(np.float64)


def generate_synthetic(spec: SynthSpec) -> FeatureSet:
    """Deterministically generate a synthetic needle FeatureSet."""
    spec.validate()
    n_tok = spec.grid_h * spec.grid_w
    means = synthetic_class_means(spec)
    rng = derive_rng(spec.seed, "split", spec.split_tag)
    dscale = spec.signal_scale if spec.distractor_scale is None else spec.distractor_scale

    # Balanced labels in a shuffled order keeps small-run class frequencies even.
    labels = rng.permutation(np.arange(spec.n_samples) % spec.num_classes)

    late_start = n_tok - max(1, n_tok // 4)
    samples = []
    for i in range(spec.n_samples):
        label = int(labels[i])
        tokens = spec.noise_scale * rng.normal(size=(n_tok, spec.d))

        needle_pos: list[int] = []
        for _ in range(spec.needle_count):
            while True:
                if rng.random() < spec.position_bias:
                    pos = int(rng.integers(late_start, n_tok))
                else:
                    pos = int(rng.integers(n_tok))
                if pos not in needle_pos:
                    needle_pos.append(pos)
                    break
        for pos in needle_pos:
            tokens[pos] += spec.signal_scale * means[label]

        if spec.distractor_rate > 0 and spec.num_classes > 1:
            for pos in range(n_tok):
                if pos in needle_pos:
                    continue
                if rng.random() < spec.distractor_rate:
                    wrong = int(rng.integers(spec.num_classes - 1))
                    if wrong >= label:
                        wrong += 1
                    tokens[pos] += dscale * means[wrong]

        tokens = _f32_round(tokens)
        cls = _f32_round(tokens.mean(axis=0))
        samples.append(FeatureSample(tokens, cls, label))

    return FeatureSet(samples, spec.grid_h, spec.grid_w, spec.d,
                      spec.num_classes, spec.split_tag)


@dataclass
class Batch:
    """One minibatch of stacked samples."""

    indices: np.ndarray  # (B,) original sample indices
    tokens: np.ndarray  # (B, N, d)
    cls: np.ndarray  # (B, d)
    labels: np.ndarray  # (B,)


def iterate_batches(
    fset: FeatureSet, batch_size: int, shuffle_seed: int, epoch: int = 0,
    shuffle: bool = True,
) -> Iterator[Batch]:
    """Yield batches covering every sample exactly once.

    The visiting order is a pure function of (shuffle_seed, epoch); the last
    batch may be short.  ``shuffle=False`` gives the natural order (used for
    evaluation).
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(fset)
    if n == 0:
        return
    if shuffle:
        order = derive_rng(shuffle_seed, "batch-order", epoch).permutation(n)
    else:
        order = np.arange(n)
    tokens, cls, labels = fset.stacked()
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        yield Batch(idx, tokens[idx], cls[idx], labels[idx])
