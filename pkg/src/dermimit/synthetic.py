"""Programmatic lesion images for smoke tests, ablations and localisation checks.

Each image is a noisy skin-tone background whose tone and texture encode the
body part(s), with one rectangular lesion. Lesion colour and texture encode
the disease and attributes:

    disease 0: red, scaly (striped)
    disease 1: red, smooth
    disease 2: brown, scaly at random

Attributes: 0 red, 1 brown, 2 scaly, 3 raised (bright rim, random), 4 large.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Tuple

import numpy as np
import torch
from PIL import Image

from .data import ImageSet

DISEASES = ["scaly erythema", "smooth erythema", "pigmented lesion"]
BODY_PARTS = ["head", "trunk", "arm", "leg"]
ATTRIBUTES = ["red", "brown", "scaly", "raised", "large"]

_SKIN = np.array([
    [0.86, 0.70, 0.60],
    [0.70, 0.55, 0.42],
    [0.93, 0.82, 0.74],
    [0.55, 0.42, 0.32],
], dtype=np.float32)
_RED = np.array([0.80, 0.12, 0.15], dtype=np.float32)
_BROWN = np.array([0.30, 0.16, 0.06], dtype=np.float32)


def _background(rng: np.random.Generator, size: int, parts: Tuple[int, ...]) -> np.ndarray:
    img = np.empty((size, size, 3), dtype=np.float32)
    bounds = np.linspace(0, size, len(parts) + 1).astype(int)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    for part, (a, b) in zip(parts, zip(bounds[:-1], bounds[1:])):
        # tone plus a part-specific low-frequency ripple
        ripple = 0.04 * np.sin((xx + 3 * part * yy) * (0.15 + 0.05 * part))[..., None]
        img[:, a:b] = (_SKIN[part] + ripple)[:, a:b]
    img += rng.normal(0.0, 0.06, img.shape).astype(np.float32)
    return img


def make_sample(rng: np.random.Generator, disease: int, size: int = 64):
    n_parts = 2 if rng.random() < 0.2 else 1
    parts = tuple(sorted(rng.choice(len(BODY_PARTS), n_parts, replace=False).tolist()))
    img = _background(rng, size, parts)

    side = int(rng.integers(size * 3 // 8, size // 2 + 1))  # 24..32 px at size 64
    y0 = int(rng.integers(0, size - side + 1))
    x0 = int(rng.integers(0, size - side + 1))
    y1, x1 = y0 + side, x0 + side

    attrs = set()
    if disease in (0, 1):
        color, scaly = _RED, disease == 0
        attrs.add(0)
    else:
        color, scaly = _BROWN, bool(rng.random() < 0.5)
        attrs.add(1)
    color = color + rng.normal(0.0, 0.03, 3).astype(np.float32)
    lesion = np.broadcast_to(color, (side, side, 3)).copy()
    if scaly:
        attrs.add(2)
        stripes = (np.arange(side) // 2) % 2 == 0
        lesion[stripes] += 0.25
    if rng.random() < 0.5:
        attrs.add(3)
        rim = np.ones((side, side), bool)
        rim[2:-2, 2:-2] = False
        lesion[rim] = 0.95
    if side >= size * 7 // 16:
        attrs.add(4)
    lesion += rng.normal(0.0, 0.03, lesion.shape).astype(np.float32)
    img[y0:y1, x0:x1] = lesion
    return np.clip(img, 0.0, 1.0), parts, sorted(attrs), (y0, x0, y1, x1)


def make_dataset(n: int, seed: int = 0, size: int = 64, num_diseases: int = 3) -> ImageSet:
    """Balanced synthetic set of ``n`` images."""
    rng = np.random.default_rng(seed)
    diseases = rng.permutation(np.arange(n) % num_diseases)
    images, body, attr, boxes = [], [], [], []
    for d in diseases:
        img, parts, attrs, box = make_sample(rng, int(d), size)
        images.append(img)
        body.append(np.isin(np.arange(len(BODY_PARTS)), parts).astype(np.float32))
        attr.append(np.isin(np.arange(len(ATTRIBUTES)), attrs).astype(np.float32))
        boxes.append(box)
    return ImageSet(
        images=torch.from_numpy(np.stack(images)),
        disease=torch.from_numpy(diseases.astype(np.int64)),
        body_parts=torch.from_numpy(np.stack(body)),
        attributes=torch.from_numpy(np.stack(attr)),
        boxes=np.array(boxes, dtype=np.int64),
    )


def write_dataset(out_dir: str | Path, n: int, seed: int = 0, size: int = 64) -> Path:
    """Write PNGs, ``manifest.jsonl`` and ``vocab.json``; returns the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    ds = make_dataset(n, seed, size)
    with open(out / "vocab.json", "w") as fh:
        json.dump({
            "disease": {str(i): v for i, v in enumerate(DISEASES)},
            "body_part": {str(i): v for i, v in enumerate(BODY_PARTS)},
            "attribute": {str(i): v for i, v in enumerate(ATTRIBUTES)},
        }, fh, indent=2)
    with open(out / "manifest.jsonl", "w") as fh:
        for i in range(len(ds)):
            name = f"images/{i:05d}.png"
            pixels = (ds.images[i].numpy() * 255.0 + 0.5).astype(np.uint8)
            Image.fromarray(pixels).save(out / name)
            fh.write(json.dumps({
                "image_path": name,
                "disease_id": int(ds.disease[i]),
                "body_part_ids": np.flatnonzero(ds.body_parts[i].numpy()).tolist(),
                "attribute_ids": np.flatnonzero(ds.attributes[i].numpy()).tolist(),
                "lesion_box": ds.boxes[i].tolist(),
            }) + "\n")
    return out / "manifest.jsonl"
