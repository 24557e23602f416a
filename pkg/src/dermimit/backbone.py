"""ViT backbone: patch tokens, class token and encoder layers that keep their attention."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ConfigurationError, ModelConfig, NumericFailure


@dataclass
class AttentionRecord:
    """Post-softmax attention of one layer, shaped (..., heads, N_p + 1, N_p + 1)."""

    layer_index: int
    matrices: torch.Tensor

    @property
    def num_heads(self) -> int:
        return self.matrices.shape[-3]


def patchify(images: torch.Tensor, patch_size: int) -> torch.Tensor:
    """Split (..., H, W, 3) images into (..., N_p, P*P*3) patches in row-major order."""
    *lead, h, w, c = images.shape
    p = patch_size
    if h % p or w % p:
        raise ConfigurationError(f"image {h}x{w} is not divisible by patch size {p}")
    x = images.reshape(*lead, h // p, p, w // p, p, c)
    x = x.movedim(-4, -3)  # (..., H/P, W/P, P, P, C)
    return x.reshape(*lead, (h // p) * (w // p), p * p * c)


def unpatchify(patches: torch.Tensor, patch_size: int, height: int, width: int) -> torch.Tensor:
    """Inverse of :func:`patchify`."""
    *lead, n, d = patches.shape
    p = patch_size
    rows, cols = height // p, width // p
    if n != rows * cols or d % (p * p):
        raise ConfigurationError(f"{n} patches of length {d} do not tile a {height}x{width} image")
    c = d // (p * p)
    x = patches.reshape(*lead, rows, cols, p, p, c)
    x = x.movedim(-3, -4)
    return x.reshape(*lead, height, width, c)


class LayerNorm(nn.LayerNorm):
    """LayerNorm with a ``bypass`` switch that turns it into the identity (used by tests)."""

    bypass: bool = False

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.bypass:
            return x
        return super().forward(x)


def set_layernorm_bypass(module: nn.Module, bypass: bool = True) -> None:
    for m in module.modules():
        if isinstance(m, LayerNorm):
            m.bypass = bypass


class PatchEmbed(nn.Module):
    def __init__(self, patch_dim: int, num_patches: int, dim: int):
        super().__init__()
        self.num_patches = num_patches
        self.proj = nn.Linear(patch_dim, dim)
        self.cls_token = nn.Parameter(torch.zeros(dim))
        self.pos_embed = nn.Parameter(torch.zeros(num_patches + 1, dim))
        nn.init.normal_(self.cls_token, std=0.02)
        nn.init.normal_(self.pos_embed, std=0.02)

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        if patches.shape[-2] != self.num_patches:
            raise ConfigurationError(f"expected {self.num_patches} patches, got {patches.shape[-2]}")
        tokens = self.proj(patches)
        cls = self.cls_token.expand(*tokens.shape[:-2], 1, -1)
        return torch.cat([cls, tokens], dim=-2) + self.pos_embed


class SelfAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        *lead, n, _ = x.shape
        return x.reshape(*lead, n, self.num_heads, self.head_dim).transpose(-3, -2)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)
        y = (attn @ v).transpose(-3, -2)
        y = y.reshape(*y.shape[:-2], -1)
        return self.out(y), attn


class EncoderLayer(nn.Module):
    """Pre-norm transformer block: x + MHSA(LN(x)), then + MLP(LN(.))."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float = 4.0, index: int = 0):
        super().__init__()
        self.index = index
        hidden = int(round(dim * mlp_ratio))
        self.norm1 = LayerNorm(dim)
        self.attn = SelfAttention(dim, num_heads)
        self.norm2 = LayerNorm(dim)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, AttentionRecord]:
        a, attn = self.attn(self.norm1(x))
        x = x + a
        x = x + self.fc2(F.gelu(self.fc1(self.norm2(x))))
        if not torch.isfinite(x).all():
            raise NumericFailure(f"non-finite activations in encoder layer {self.index}")
        return x, AttentionRecord(self.index, attn)


class ViTBackbone(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.embed_dim
        self.embed = PatchEmbed(config.patch_dim, config.num_patches, d)
        self.layers = nn.ModuleList(
            EncoderLayer(d, config.num_heads, config.mlp_ratio, index=i)
            for i in range(config.backbone_layers)
        )
        self.apply(init_linear)

    def forward(self, images: torch.Tensor) -> Tuple[torch.Tensor, List[AttentionRecord]]:
        cfg = self.config
        if tuple(images.shape[-3:]) != (cfg.image_height, cfg.image_width, 3):
            raise ConfigurationError(
                f"image shape {tuple(images.shape[-3:])} does not match "
                f"({cfg.image_height}, {cfg.image_width}, 3)"
            )
        x = self.embed(patchify(images, cfg.patch_size))
        return run_layers(self.layers, x)


def init_linear(m: nn.Module) -> None:
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)


def run_layers(
    layers: nn.ModuleList, x: torch.Tensor, records: Optional[List[AttentionRecord]] = None
) -> Tuple[torch.Tensor, List[AttentionRecord]]:
    records = [] if records is None else records
    for layer in layers:
        x, rec = layer(x)
        records.append(rec)
    return x, records
