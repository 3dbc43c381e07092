"""Flat-array parameter checkpoints: <base>.bin (f64) + <base>.json manifest."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

CHECKPOINT_VERSION = 1


def save_params(base: str | Path, params: dict[str, np.ndarray],
                extra: dict | None = None) -> tuple[Path, Path]:
    """Write parameters as concatenated little-endian f64 in sorted key order,
    with a JSON manifest carrying shapes and head metadata."""
    base = Path(base)
    names = sorted(params)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "arrays": [{"name": n, "shape": list(np.asarray(params[n]).shape)}
                   for n in names],
        "extra": extra or {},
    }
    json_path = base.with_suffix(".json")
    bin_path = base.with_suffix(".bin")
    json_path.write_text(json.dumps(manifest, indent=2))
    with open(bin_path, "wb") as fh:
        for n in names:
            fh.write(np.ascontiguousarray(params[n], dtype="<f8").tobytes())
    return json_path, bin_path


def load_params(base: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    base = Path(base)
    manifest = json.loads(base.with_suffix(".json").read_text())
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('version')}")
    raw = base.with_suffix(".bin").read_bytes()
    counts = [int(np.prod(e["shape"])) if e["shape"] else 1
              for e in manifest["arrays"]]
    expected = 8 * sum(counts)
    if len(raw) != expected:
        raise ValueError(
            f"checkpoint payload size mismatch: {len(raw)} != {expected}")
    params: dict[str, np.ndarray] = {}
    offset = 0
    for entry, count in zip(manifest["arrays"], counts):
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        offset += 8 * count
        params[entry["name"]] = arr.astype(np.float64).reshape(tuple(entry["shape"]))
    return params, manifest["extra"]
