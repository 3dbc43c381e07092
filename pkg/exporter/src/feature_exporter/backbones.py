"""Backbone registry: hub checkpoints plus seeded-random offline variants.

Every entry resolves to a frozen torch module whose forward returns the
final-layer hidden states as (batch, 1 + N, d) with the CLS row first and
patch rows in the backbone's native raster order.  ``random-*`` variants
build the same architectures with deterministic random weights so the full
export path stays testable without network access.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
HALF_MEAN = (0.5, 0.5, 0.5)


@dataclass
class Backbone:
    name: str
    model: torch.nn.Module
    forward: Callable[[torch.Tensor], torch.Tensor]  # pixels -> (B, 1+N, d)
    grid_h: int
    grid_w: int
    d: int
    image_size: int
    mean: tuple[float, float, float]
    std: tuple[float, float, float]
    transform_desc: str


def _plain_forward(model):
    def run(pixels: torch.Tensor) -> torch.Tensor:
        return model(pixel_values=pixels).last_hidden_state
    return run


def _mae_forward(model):
    # mask-reconstruction encoders shuffle kept tokens; ordered noise with
    # mask_ratio 0 preserves the native raster order of the patches
    def run(pixels: torch.Tensor) -> torch.Tensor:
        n = model.config.image_size // model.config.patch_size
        noise = torch.arange(n * n, dtype=torch.float32,
                             device=pixels.device).expand(pixels.shape[0], -1)
        return model(pixel_values=pixels, noise=noise).last_hidden_state
    return run


def _freeze(model: torch.nn.Module) -> torch.nn.Module:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def _random_vit(hidden: int, layers: int, heads: int, image: int,
                patch: int, seed: int) -> torch.nn.Module:
    from transformers import ViTConfig, ViTModel

    cfg = ViTConfig(hidden_size=hidden, num_hidden_layers=layers,
                    num_attention_heads=heads, intermediate_size=4 * hidden,
                    image_size=image, patch_size=patch)
    torch.manual_seed(seed)
    return _freeze(ViTModel(cfg))


def _hub_model(checkpoint: str, cls, **config_overrides) -> torch.nn.Module:
    try:
        model = cls.from_pretrained(checkpoint, **config_overrides)
    except OSError as exc:
        raise RuntimeError(
            f"could not load {checkpoint!r}; pretrained checkpoints need "
            f"network access or a populated local cache ({exc})") from exc
    return _freeze(model)


def build_backbone(name: str, seed: int = 0) -> Backbone:
    if name == "random-vit-base":
        model = _random_vit(768, 12, 12, 224, 16, seed)
        return Backbone(name, model, _plain_forward(model), 14, 14, 768, 224,
                        IMAGENET_MEAN, IMAGENET_STD, _TRANSFORM_DESC.format(224))
    if name == "random-vit-tiny":
        model = _random_vit(32, 2, 2, 64, 16, seed)
        return Backbone(name, model, _plain_forward(model), 4, 4, 32, 64,
                        IMAGENET_MEAN, IMAGENET_STD, _TRANSFORM_DESC.format(64))
    if name == "vit-mae-base":
        from transformers import ViTMAEModel

        model = _hub_model("facebook/vit-mae-base", ViTMAEModel, mask_ratio=0.0)
        return Backbone(name, model, _mae_forward(model), 14, 14, 768, 224,
                        IMAGENET_MEAN, IMAGENET_STD, _TRANSFORM_DESC.format(224))
    if name == "beit-base":
        from transformers import BeitModel

        model = _hub_model("microsoft/beit-base-patch16-224", BeitModel)
        return Backbone(name, model, _plain_forward(model), 14, 14, 768, 224,
                        HALF_MEAN, HALF_MEAN, _TRANSFORM_DESC.format(224))
    if name == "dinov2-base":
        from transformers import Dinov2Model

        model = _hub_model("facebook/dinov2-base", Dinov2Model)
        return Backbone(name, model, _plain_forward(model), 16, 16, 768, 224,
                        IMAGENET_MEAN, IMAGENET_STD, _TRANSFORM_DESC.format(224))
    if name == "vit-base":
        from transformers import ViTModel

        model = _hub_model("google/vit-base-patch16-224", ViTModel)
        return Backbone(name, model, _plain_forward(model), 14, 14, 768, 224,
                        HALF_MEAN, HALF_MEAN, _TRANSFORM_DESC.format(224))
    raise ValueError(f"unknown backbone {name!r}; choices: {', '.join(BACKBONES)}")


_TRANSFORM_DESC = ("bicubic resize of the short side to 256/224 of target, "
                   "center crop to {0}, scale to [0,1], channel normalize")

BACKBONES = ("random-vit-tiny", "random-vit-base", "vit-mae-base",
             "beit-base", "dinov2-base", "vit-base")
