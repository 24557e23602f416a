"""Cross-interaction fusion of disease, body-part and attribute features.

Every fusion direction attends from one head's (layer-normed) class token to
a single pooled token of another head. With one key the per-head softmax is
identically 1, so each direction reduces to ``LN(q) + out(z @ W_v)``; the
softmax is still computed so the printed form stays inspectable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional

import torch
import torch.nn as nn

from .backbone import LayerNorm, init_linear
from .config import ConfigurationError, ModelConfig


@dataclass
class HeadFeatures:
    class_token: torch.Tensor  # (..., F)
    patch_tokens: torch.Tensor  # (..., N_p, F)
    local_token: Optional[torch.Tensor] = None  # (..., F); disease/attribute heads with LSM only


@dataclass
class FusedFeatures:
    g_D_B: Optional[torch.Tensor] = None  # disease class token enhanced by body parts
    g_B_D: Optional[torch.Tensor] = None  # body-part class token enhanced by disease
    g_D_A: Optional[torch.Tensor] = None  # (body-enhanced) disease class token enhanced by attributes
    g_A_D: Optional[torch.Tensor] = None  # attribute class token enhanced by disease
    l_D_A: Optional[torch.Tensor] = None  # disease local token enhanced by attribute local token
    l_A_D: Optional[torch.Tensor] = None  # attribute local token enhanced by disease local token


def gap(patch_tokens: torch.Tensor) -> torch.Tensor:
    return patch_tokens.mean(dim=-2)


class CrossAttention(nn.Module):
    """One fusion direction: query class token against a pooled key/value token."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads:
            raise ConfigurationError(f"fusion dim {dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.norm_q = LayerNorm(dim)
        self.norm_kv = LayerNorm(dim)
        self.w_q = nn.Linear(dim, dim, bias=False)
        self.w_k = nn.Linear(dim, dim, bias=False)
        self.w_v = nn.Linear(dim, dim, bias=False)
        self.out = nn.Linear(dim, dim)
        self.last_attention: Optional[torch.Tensor] = None

    def pool_norm(self, patch_tokens: torch.Tensor) -> torch.Tensor:
        return self.norm_kv(gap(patch_tokens))

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        # (..., L, F) -> (..., heads, L, head_dim)
        return x.reshape(*x.shape[:-1], self.num_heads, self.head_dim).transpose(-3, -2)

    def forward(self, query: torch.Tensor, pooled: torch.Tensor) -> torch.Tensor:
        """``query`` is (..., F); ``pooled`` is (..., F) or a (..., L, F) key sequence."""
        if query.shape[-1] != self.w_q.in_features or pooled.shape[-1] != self.w_q.in_features:
            raise ConfigurationError("query/pooled feature size does not match the fusion dim")
        keys = pooled.unsqueeze(-2) if pooled.dim() == query.dim() else pooled
        q_in = self.norm_q(query)
        q = self._heads(self.w_q(q_in).unsqueeze(-2))
        k = self._heads(self.w_k(keys))
        v = self._heads(self.w_v(keys))
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)
        self.last_attention = attn.detach()
        y = (attn @ v).transpose(-3, -2).reshape(*query.shape)
        return q_in + self.out(y)


class CrossInteraction(nn.Module):
    """Six fusion directions over whichever task heads are enabled."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        f, h = config.fusion_dim, config.num_heads
        has_b, has_a = config.has("body_part"), config.has("attribute")
        self.bd = CrossAttention(f, h) if has_b else None  # query disease, key body
        self.db = CrossAttention(f, h) if has_b else None  # query body, key disease
        self.ad = CrossAttention(f, h) if has_a else None  # query disease, key attribute
        self.da = CrossAttention(f, h) if has_a else None  # query attribute, key disease
        local = has_a and config.lsm_enabled
        self.local_ad = CrossAttention(f, h) if local else None  # query l_D, key l_A
        self.local_da = CrossAttention(f, h) if local else None  # query l_A, key l_D
        self.apply(init_linear)

    def _kv(self, block: CrossAttention, feats: HeadFeatures) -> torch.Tensor:
        if self.config.multi_key_fusion:
            return block.norm_kv(feats.patch_tokens)
        return block.pool_norm(feats.patch_tokens)

    def forward(
        self,
        disease: HeadFeatures,
        body: Optional[HeadFeatures] = None,
        attr: Optional[HeadFeatures] = None,
    ) -> FusedFeatures:
        out = FusedFeatures()
        g_d = disease.class_token
        if body is not None:
            if self.bd is None:
                raise ConfigurationError("body-part features given but the body-part head is disabled")
            out.g_D_B = self.bd(g_d, self._kv(self.bd, body))
            out.g_B_D = self.db(body.class_token, self._kv(self.db, disease))
            g_d = out.g_D_B
        if attr is not None:
            if self.ad is None:
                raise ConfigurationError("attribute features given but the attribute head is disabled")
            out.g_D_A = self.ad(g_d, self._kv(self.ad, attr))
            out.g_A_D = self.da(attr.class_token, self._kv(self.da, disease))
            if self.local_ad is not None:
                if disease.local_token is None or attr.local_token is None:
                    raise ConfigurationError("local fusion needs local tokens from both heads")
                out.l_D_A = self.local_ad(disease.local_token, self.local_ad.norm_kv(attr.local_token))
                out.l_A_D = self.local_da(attr.local_token, self.local_da.norm_kv(disease.local_token))
        return out


def cim_vectors(
    fused: FusedFeatures,
    disease: HeadFeatures,
    body: Optional[HeadFeatures],
    attr: Optional[HeadFeatures],
) -> Dict[str, torch.Tensor]:
    """Concatenate fused tokens into one feature vector per task.

    disease:   [g_D_A, g_D_B, l_D_A]  (each present only if its source head is)
    body_part: [g_B, g_B_D]
    attribute: [g_A, g_A_D, l_A_D]
    Without body and attribute heads the disease class token passes through
    unfused. A disease local token with no attribute partner is appended raw.
    """
    parts: List[torch.Tensor] = [t for t in (fused.g_D_A, fused.g_D_B) if t is not None]
    if not parts:
        parts = [disease.class_token]
    if fused.l_D_A is not None:
        parts.append(fused.l_D_A)
    elif disease.local_token is not None:
        parts.append(disease.local_token)
    vectors = {"disease": torch.cat(parts, dim=-1)}
    if body is not None:
        vectors["body_part"] = torch.cat([body.class_token, fused.g_B_D], dim=-1)
    if attr is not None:
        parts = [attr.class_token, fused.g_A_D]
        if fused.l_A_D is not None:
            parts.append(fused.l_A_D)
        vectors["attribute"] = torch.cat(parts, dim=-1)
    return vectors


class ConcatFusion(nn.Module):
    """Plain concatenation baseline: class tokens, pooled patch means and local tokens."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        f = config.fusion_dim
        multi = config.has("body_part") or config.has("attribute")
        self.norm_disease = LayerNorm(f) if multi else None
        self.norm_body = LayerNorm(f) if config.has("body_part") else None
        self.norm_attr = LayerNorm(f) if config.has("attribute") else None

    def forward(
        self,
        disease: HeadFeatures,
        body: Optional[HeadFeatures] = None,
        attr: Optional[HeadFeatures] = None,
    ) -> Dict[str, torch.Tensor]:
        """disease: [g_D, z_B, z_A, l_D]; body_part: [g_B, z_D]; attribute: [g_A, z_D, l_A]."""
        parts = [disease.class_token]
        z_d = None
        if body is not None or attr is not None:
            z_d = self.norm_disease(gap(disease.patch_tokens))
        if body is not None:
            parts.append(self.norm_body(gap(body.patch_tokens)))
        if attr is not None:
            parts.append(self.norm_attr(gap(attr.patch_tokens)))
        if disease.local_token is not None:
            parts.append(disease.local_token)
        vectors = {"disease": torch.cat(parts, dim=-1)}
        if body is not None:
            vectors["body_part"] = torch.cat([body.class_token, z_d], dim=-1)
        if attr is not None:
            parts = [attr.class_token, z_d]
            if attr.local_token is not None:
                parts.append(attr.local_token)
            vectors["attribute"] = torch.cat(parts, dim=-1)
        return vectors


def vector_sizes(config: ModelConfig) -> Dict[str, int]:
    """Length of each task's concatenated feature vector."""
    f = config.fusion_dim
    has_b, has_a, lsm = config.has("body_part"), config.has("attribute"), config.lsm_enabled
    if config.fusion_mode == "cim":
        n_d = max(1, int(has_b) + int(has_a)) + int(lsm)
        sizes = {"disease": n_d * f}
        if has_b:
            sizes["body_part"] = 2 * f
        if has_a:
            sizes["attribute"] = (2 + int(lsm)) * f
    else:
        sizes = {"disease": (1 + int(has_b) + int(has_a) + int(lsm)) * f}
        if has_b:
            sizes["body_part"] = 2 * f
        if has_a:
            sizes["attribute"] = (2 + int(lsm)) * f
    return sizes
