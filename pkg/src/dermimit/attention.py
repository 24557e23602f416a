"""Attention heatmaps: mutual class/patch scores of one layer drawn over the input image."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch
import torch.nn.functional as F
from matplotlib import colormaps
from PIL import Image

from .backbone import AttentionRecord
from .config import ConfigurationError
from .lesion_selection import mutual_scores
from .model import DermImitFormer


@dataclass
class Heatmap:
    layer: int
    scores: np.ndarray  # (grid_h, grid_w) raw mutual scores
    upsampled: np.ndarray  # (H, W) normalised to [0, 1]
    overlay: np.ndarray  # (H, W, 3) uint8


def layer_records(model: DermImitFormer, image: torch.Tensor, head: str = "disease") -> List[AttentionRecord]:
    """Attention of the shared layers followed by the layers of ``head``, in depth order."""
    if not model.config.has(head):
        raise ConfigurationError(f"head {head!r} is not enabled")
    with torch.no_grad():
        pred = model(image[None] if image.dim() == 3 else image)
    return list(pred.attention) + list(pred.head_attention[head])


def score_grid(record: AttentionRecord, grid: tuple) -> np.ndarray:
    s = mutual_scores(record)
    if s.dim() == 2:
        s = s[0]
    return s.reshape(grid).double().numpy()


def upsample(grid_scores: np.ndarray, height: int, width: int) -> np.ndarray:
    t = torch.from_numpy(grid_scores)[None, None]
    return F.interpolate(t, size=(height, width), mode="bilinear", align_corners=False)[0, 0].numpy()


def overlay(image: np.ndarray, heat: np.ndarray, alpha: float = 0.5, cmap: str = "jet") -> np.ndarray:
    """Blend a [0, 1] heat map (colour-mapped) over an (H, W, 3) image in [0, 1]."""
    colour = colormaps[cmap](heat)[..., :3]
    blended = (1.0 - alpha) * image + alpha * colour
    return np.clip(np.rint(blended * 255.0), 0, 255).astype(np.uint8)


def attention_heatmap(
    model: DermImitFormer,
    image: torch.Tensor,
    layer: int = -1,
    head: str = "disease",
    alpha: float = 0.5,
    cmap: str = "jet",
) -> Heatmap:
    """``layer`` indexes shared then head layers; negative values count from the last one."""
    records = layer_records(model, image, head)
    if not -len(records) <= layer < len(records):
        raise ConfigurationError(f"layer {layer} out of range for {len(records)} layers")
    record = records[layer]
    cfg = model.config
    grid = score_grid(record, cfg.grid)
    up = upsample(grid, cfg.image_height, cfg.image_width)
    lo, hi = float(up.min()), float(up.max())
    # uniform scores carry no spatial information, so they map to a flat overlay
    heat = (up - lo) / (hi - lo) if hi > lo else np.zeros_like(up)
    img = image.detach().double().numpy() if image.dim() == 3 else image[0].detach().double().numpy()
    return Heatmap(record.layer_index, grid, heat, overlay(img, heat, alpha, cmap))


def export_attention(
    model: DermImitFormer,
    image: torch.Tensor,
    layer: int,
    out_path: str | Path,
    csv_path: Optional[str | Path] = None,
    head: str = "disease",
    alpha: float = 0.5,
) -> Heatmap:
    hm = attention_heatmap(model, image, layer, head, alpha)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(hm.overlay).save(out_path, format="PNG")
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["row", "col", "patch_index", "score"])
            gw = hm.scores.shape[1]
            for (r, c), v in np.ndenumerate(hm.scores):
                writer.writerow([r, c, 1 + r * gw + c, repr(float(v))])
    return hm
