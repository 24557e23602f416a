"""Lesion selection: mutual class/patch attention scores and top-K patch token selection."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from .backbone import AttentionRecord
from .config import ConfigurationError


@dataclass
class SelectionResult:
    scores: torch.Tensor  # (..., N_p)
    indices: torch.Tensor  # (..., K), 1-based patch indices, descending score
    selected_tokens: torch.Tensor  # (..., K, D)


def mutual_scores(record: AttentionRecord | torch.Tensor) -> torch.Tensor:
    """Mutual attention score of every patch token with the class token.

    The class-token row and column of each head's attention matrix are each
    re-normalised with a softmax over the patch positions only (the class
    token's self-attention entry is dropped), multiplied elementwise and
    averaged over heads. Returns a tensor shaped (..., N_p).
    """
    attn = record.matrices if isinstance(record, AttentionRecord) else record
    if attn.dim() < 3 or attn.shape[-1] != attn.shape[-2] or attn.shape[-1] < 2:
        raise ConfigurationError(f"attention must be (..., heads, N+1, N+1), got {tuple(attn.shape)}")
    cls_to_patch = torch.softmax(attn[..., 0, 1:], dim=-1)
    patch_to_cls = torch.softmax(attn[..., 1:, 0], dim=-1)
    return (cls_to_patch * patch_to_cls).mean(dim=-2)


def head_scores(records: Sequence[AttentionRecord | torch.Tensor]) -> torch.Tensor:
    """Mean of :func:`mutual_scores` over the layers of one task head."""
    if not records:
        raise ConfigurationError("head_scores needs at least one attention record")
    total = mutual_scores(records[0])
    for rec in records[1:]:
        total = total + mutual_scores(rec)
    return total / len(records)


def rank_patches(scores: torch.Tensor, k: int) -> torch.Tensor:
    """0-based positions of the k best scores; ties go to the lower position."""
    n = scores.shape[-1]
    if not 1 <= k <= n:
        raise ConfigurationError(f"K={k} outside [1, {n}]")
    order = torch.sort(scores.detach(), dim=-1, descending=True, stable=True).indices
    return order[..., :k]


def select_top_k(tokens: torch.Tensor, scores: torch.Tensor, k: int) -> SelectionResult:
    """Gather the k highest scoring patch tokens from a (..., N_p + 1, D) sequence.

    Indices are returned 1-based (position in the token sequence), so the
    class token at 0 can never appear. Gradients flow through the gathered
    token values only.
    """
    n_patches = tokens.shape[-2] - 1
    if scores.shape[-1] != n_patches:
        raise ConfigurationError(f"{scores.shape[-1]} scores for {n_patches} patch tokens")
    pos = rank_patches(scores, k)
    idx = pos + 1
    gather_idx = idx.unsqueeze(-1).expand(*idx.shape, tokens.shape[-1])
    selected = torch.gather(tokens, -2, gather_idx)
    return SelectionResult(scores=scores, indices=idx, selected_tokens=selected)
