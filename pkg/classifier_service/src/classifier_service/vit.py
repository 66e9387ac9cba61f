"""Vision transformer built from torch primitives, sized by a registry.

The registry carries the standard large configuration used as the default
backbone identifier plus progressively smaller ones; the small entries train
from scratch on a CPU in seconds, which is what the tests and the synthetic
demo corpus use. All configurations share the same code path.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn


@dataclass(frozen=True, slots=True)
class ViTSpec:
    image_size: int
    patch_size: int
    dim: int
    depth: int
    heads: int
    mlp_dim: int
    dropout: float = 0.0


BACKBONES: dict[str, ViTSpec] = {
    "vit-large-patch16-224": ViTSpec(224, 16, 1024, 24, 16, 4096),
    "vit-base-patch16-224": ViTSpec(224, 16, 768, 12, 12, 3072),
    "vit-small-patch16-64": ViTSpec(64, 16, 192, 6, 6, 384),
    "vit-tiny-patch8-32": ViTSpec(32, 8, 96, 3, 3, 192),
}

DEFAULT_BACKBONE = "vit-large-patch16-224"


def backbone_spec(name: str) -> ViTSpec:
    try:
        return BACKBONES[name]
    except KeyError:
        raise ValueError(
            f"unknown backbone {name!r}; known: {sorted(BACKBONES)}"
        ) from None


class VisionTransformer(nn.Module):
    """Patch embedding, CLS token, pre-norm encoder stack, linear head."""

    def __init__(self, spec: ViTSpec, n_classes: int, image_size: int | None = None):
        super().__init__()
        if n_classes < 2:
            raise ValueError("n_classes must be at least 2")
        size = image_size if image_size is not None else spec.image_size
        if size % spec.patch_size != 0:
            raise ValueError(
                f"image size {size} is not a multiple of patch size {spec.patch_size}"
            )
        self.spec = spec
        self.image_size = size
        n_patches = (size // spec.patch_size) ** 2

        self.patch_embed = nn.Conv2d(
            3, spec.dim, kernel_size=spec.patch_size, stride=spec.patch_size
        )
        self.cls_token = nn.Parameter(torch.zeros(1, 1, spec.dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, n_patches + 1, spec.dim))
        layer = nn.TransformerEncoderLayer(
            d_model=spec.dim,
            nhead=spec.heads,
            dim_feedforward=spec.mlp_dim,
            dropout=spec.dropout,
            activation="gelu",
            batch_first=True,
            norm_first=True,
        )
        self.encoder = nn.TransformerEncoder(
            layer, num_layers=spec.depth, enable_nested_tensor=False
        )
        self.norm = nn.LayerNorm(spec.dim)
        self.head = nn.Linear(spec.dim, n_classes)

        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        # images: (B, 3, H, W) in [-1, 1]
        x = self.patch_embed(images).flatten(2).transpose(1, 2)
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        x = torch.cat([cls, x], dim=1) + self.pos_embed
        x = self.encoder(x)
        return self.head(self.norm(x[:, 0]))


def build_classifier(backbone: str, n_classes: int, image_size: int | None = None) -> VisionTransformer:
    return VisionTransformer(backbone_spec(backbone), n_classes, image_size)
