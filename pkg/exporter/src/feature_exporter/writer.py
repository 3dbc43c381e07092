"""Standalone writer for the SSMP binary feature format.

Wire layout (little-endian): magic "SSMP", u32 version=1, u32 grid_h,
grid_w, d, num_classes, sample_count, then per sample d f32 CLS values,
grid_h*grid_w*d f32 patch values row-major, and a u32 label.

The writer appends samples as they stream out of the backbone and patches
the sample count into the header on close, so export never needs to buffer
a whole dataset.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"SSMP"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIII")
_COUNT_OFFSET = 24  # byte offset of sample_count within the header
_LABEL = struct.Struct("<I")


class FeatureWriter:
    """Single-writer append with a final header patch."""

    def __init__(self, path: str | Path, grid_h: int, grid_w: int, d: int,
                 num_classes: int):
        if min(grid_h, grid_w, d, num_classes) < 1:
            raise ValueError("grid dims, d and num_classes must be positive")
        self.grid_h, self.grid_w, self.d = grid_h, grid_w, d
        self.num_classes = num_classes
        self.count = 0
        self._fh = open(path, "wb")
        self._fh.write(_HEADER.pack(MAGIC, VERSION, grid_h, grid_w, d,
                                    num_classes, 0))

    def add(self, cls_token: np.ndarray, patch_tokens: np.ndarray, label: int) -> None:
        n_tok = self.grid_h * self.grid_w
        cls_token = np.asarray(cls_token, dtype=np.float64)
        patch_tokens = np.asarray(patch_tokens, dtype=np.float64)
        if cls_token.shape != (self.d,):
            raise ValueError(f"cls shape {cls_token.shape} != ({self.d},)")
        if patch_tokens.shape != (n_tok, self.d):
            raise ValueError(
                f"patch shape {patch_tokens.shape} != ({n_tok}, {self.d})")
        if not (np.isfinite(cls_token).all() and np.isfinite(patch_tokens).all()):
            raise ValueError("non-finite value in sample")
        if not 0 <= label < self.num_classes:
            raise ValueError(f"label {label} outside [0, {self.num_classes})")
        self._fh.write(cls_token.astype("<f4").tobytes())
        self._fh.write(np.ascontiguousarray(patch_tokens, dtype="<f4").tobytes())
        self._fh.write(_LABEL.pack(label))
        self.count += 1

    def close(self) -> None:
        self._fh.seek(_COUNT_OFFSET)
        self._fh.write(struct.pack("<I", self.count))
        self._fh.close()

    def __enter__(self) -> "FeatureWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
