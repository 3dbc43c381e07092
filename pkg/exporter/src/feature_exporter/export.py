"""Frozen-inference export of CLS + patch tokens over an image folder.

Images are discovered in sorted order; a folder with class subdirectories
gets labels from the sorted subdirectory index, a flat folder exports a
single class.  Inference runs on one thread in eval mode with gradients
off, so identical invocations produce byte-identical files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .backbones import Backbone, build_backbone
from .writer import FeatureWriter

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}


@dataclass
class ExportSpec:
    backbone: str
    images: str  # folder of images, optionally one subfolder per class
    out: str
    batch_size: int = 16
    device: str = "cpu"
    seed: int = 0  # weight seed for random-* backbones


def discover_images(root: str | Path) -> tuple[list[tuple[Path, int]], int]:
    """(image, label) pairs in deterministic order plus the class count."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"image folder not found: {root}")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if class_dirs:
        pairs = []
        for label, sub in enumerate(class_dirs):
            pairs.extend(
                (path, label)
                for path in sorted(sub.iterdir())
                if path.suffix.lower() in IMAGE_SUFFIXES)
        return pairs, len(class_dirs)
    pairs = [(path, 0) for path in sorted(root.iterdir())
             if path.suffix.lower() in IMAGE_SUFFIXES]
    return pairs, 1


def preprocess(image: Image.Image, backbone: Backbone) -> torch.Tensor:
    """Short-side resize, center crop, [0,1] scale, channel normalize."""
    target = backbone.image_size
    image = image.convert("RGB")
    w, h = image.size
    short = min(w, h)
    scale = (target * 256 // 224) / short
    image = image.resize((max(target, round(w * scale)),
                          max(target, round(h * scale))), Image.BICUBIC)
    w, h = image.size
    left, top = (w - target) // 2, (h - target) // 2
    image = image.crop((left, top, left + target, top + target))
    arr = np.asarray(image, dtype=np.float32) / 255.0
    arr = (arr - np.asarray(backbone.mean, dtype=np.float32)) / np.asarray(
        backbone.std, dtype=np.float32)
    return torch.from_numpy(arr.transpose(2, 0, 1))


def export(spec: ExportSpec) -> Path:
    """Run frozen inference and write the feature file plus a sidecar JSON."""
    torch.set_num_threads(1)  # fixed reduction order: byte-identical reruns
    backbone = build_backbone(spec.backbone, seed=spec.seed)
    device = torch.device(spec.device)
    backbone.model.to(device)
    pairs, num_classes = discover_images(spec.images)

    n_tok = backbone.grid_h * backbone.grid_w
    out = Path(spec.out)
    with FeatureWriter(out, backbone.grid_h, backbone.grid_w, backbone.d,
                       num_classes) as writer:
        for start in range(0, len(pairs), spec.batch_size):
            chunk = pairs[start : start + spec.batch_size]
            pixels = torch.stack([
                preprocess(Image.open(path), backbone) for path, _ in chunk
            ]).to(device)
            with torch.no_grad():
                hidden = backbone.forward(pixels)
            if hidden.shape[1] != 1 + n_tok or hidden.shape[2] != backbone.d:
                raise ValueError(
                    f"geometry mismatch: backbone produced {tuple(hidden.shape[1:])}, "
                    f"declared grid {backbone.grid_h}x{backbone.grid_w}, d={backbone.d}")
            hidden = hidden.cpu().numpy().astype(np.float64)
            for row, (_, label) in enumerate(chunk):
                writer.add(hidden[row, 0], hidden[row, 1:], label)

    sidecar = {
        "backbone": spec.backbone,
        "grid_h": backbone.grid_h,
        "grid_w": backbone.grid_w,
        "d": backbone.d,
        "num_classes": num_classes,
        "samples": len(pairs),
        "transform": backbone.transform_desc,
        "normalization": {"mean": list(backbone.mean), "std": list(backbone.std)},
        "hidden_state": "final encoder layer, CLS first, patches raster-order",
        "versions": _library_versions(),
    }
    Path(str(out) + ".meta.json").write_text(json.dumps(sidecar, indent=2))
    return out


def _library_versions() -> dict:
    import PIL
    import transformers

    return {
        "torch": torch.__version__,
        "transformers": transformers.__version__,
        "numpy": np.__version__,
        "pillow": PIL.__version__,
    }
