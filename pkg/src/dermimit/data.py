"""Manifests, image loading, stratified folds, batching and CutMix."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image

from .config import ModelConfig
from .model import LabelBatch

log = logging.getLogger(__name__)

VOCAB_KEYS = ("disease", "body_part", "attribute")


class ManifestError(ValueError):
    pass


@dataclass
class ManifestRecord:
    image_path: Path
    disease_id: int
    body_part_ids: List[int]
    attribute_ids: List[int]


@dataclass
class DatasetManifest:
    records: List[ManifestRecord]
    vocab: Dict[str, List[str]]
    report: List[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def sizes(self) -> Tuple[int, int, int]:
        return tuple(len(self.vocab[k]) for k in VOCAB_KEYS)  # type: ignore[return-value]

    def disease_ids(self) -> np.ndarray:
        return np.array([r.disease_id for r in self.records], dtype=np.int64)


def _load_vocab(path: Path) -> Dict[str, List[str]]:
    with open(path) as fh:
        raw = json.load(fh)
    vocab = {}
    for key in VOCAB_KEYS:
        if key not in raw:
            raise ManifestError(f"{path}: vocabulary for {key!r} missing")
        entries = raw[key]
        if isinstance(entries, dict):
            ids = sorted(int(i) for i in entries)
            if ids != list(range(len(ids))):
                raise ManifestError(f"{path}: {key} ids must be 0..n-1")
            vocab[key] = [entries[str(i)] for i in ids]
        else:
            vocab[key] = list(entries)
    return vocab


def load_manifest(
    path: str | Path, vocab_path: str | Path | None = None, check_files: bool = True
) -> DatasetManifest:
    """Read a JSONL manifest and validate it against the task vocabularies.

    ``vocab_path`` defaults to ``vocab.json`` next to the manifest; without one
    the vocabulary sizes are inferred from the largest ids seen.
    """
    path = Path(path)
    root = path.parent
    vocab_file = Path(vocab_path) if vocab_path is not None else root / "vocab.json"
    vocab = _load_vocab(vocab_file) if vocab_file.exists() else None

    report: List[str] = []
    records: List[ManifestRecord] = []
    seen: Dict[str, int] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
                rec = ManifestRecord(
                    image_path=Path(raw["image_path"]),
                    disease_id=int(raw["disease_id"]),
                    body_part_ids=[int(i) for i in raw.get("body_part_ids", [])],
                    attribute_ids=[int(i) for i in raw.get("attribute_ids", [])],
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ManifestError(f"{path}:{lineno}: malformed record ({exc})") from exc
            if not rec.image_path.is_absolute():
                rec.image_path = root / rec.image_path
            key = str(rec.image_path)
            if key in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate image_path (first on line {seen[key]})")
            seen[key] = lineno
            if vocab is not None:
                _check_ids(rec, vocab, f"{path}:{lineno}")
            if check_files and not rec.image_path.is_file():
                raise ManifestError(f"{path}:{lineno}: image not found: {rec.image_path}")
            if not rec.body_part_ids:
                report.append(f"line {lineno}: empty body_part_ids")
            if not rec.attribute_ids:
                report.append(f"line {lineno}: empty attribute_ids")
            records.append(rec)

    if vocab is None:
        report.append(f"no vocabulary at {vocab_file}; sizes inferred from ids")
        vocab = {
            "disease": [str(i) for i in range(1 + max((r.disease_id for r in records), default=-1))],
            "body_part": [str(i) for i in range(1 + max((max(r.body_part_ids, default=-1) for r in records), default=-1))],
            "attribute": [str(i) for i in range(1 + max((max(r.attribute_ids, default=-1) for r in records), default=-1))],
        }
    if not records:
        report.append("manifest is empty")
    for msg in report:
        log.warning("%s: %s", path, msg)
    return DatasetManifest(records=records, vocab=vocab, report=report)


def _check_ids(rec: ManifestRecord, vocab: Dict[str, List[str]], where: str) -> None:
    if not 0 <= rec.disease_id < len(vocab["disease"]):
        raise ManifestError(f"{where}: disease_id {rec.disease_id} outside [0, {len(vocab['disease'])})")
    for key, ids in (("body_part", rec.body_part_ids), ("attribute", rec.attribute_ids)):
        for i in ids:
            if not 0 <= i < len(vocab[key]):
                raise ManifestError(f"{where}: {key} id {i} outside [0, {len(vocab[key])})")


def load_image(path: str | Path, height: int, width: int) -> np.ndarray:
    """Decode to RGB, resize (bilinear) to cover height x width, centre-crop, scale to [0, 1]."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (width, height):
            scale = max(width / im.width, height / im.height)
            new = (max(width, math.ceil(im.width * scale)), max(height, math.ceil(im.height * scale)))
            im = im.resize(new, Image.BILINEAR)
            left, top = (new[0] - width) // 2, (new[1] - height) // 2
            im = im.crop((left, top, left + width, top + height))
        return np.asarray(im, dtype=np.float32) / 255.0


def multi_hot(ids: Sequence[int], n: int) -> np.ndarray:
    v = np.zeros(n, dtype=np.float32)
    v[list(ids)] = 1.0
    return v


@dataclass
class ImageSet:
    """In-memory images (N, H, W, 3) with their labels."""

    images: torch.Tensor
    disease: torch.Tensor  # (N,) int64
    body_parts: torch.Tensor  # (N, n_b)
    attributes: torch.Tensor  # (N, n_a)
    boxes: Optional[np.ndarray] = None  # (N, 4) y0, x0, y1, x1 lesion boxes, synthetic data only

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, idx: Sequence[int] | np.ndarray) -> "ImageSet":
        idx = np.asarray(idx, dtype=np.int64)
        t = torch.from_numpy(idx)
        return ImageSet(
            self.images[t], self.disease[t], self.body_parts[t], self.attributes[t],
            None if self.boxes is None else self.boxes[idx],
        )

    def labels(self, idx: Optional[torch.Tensor] = None) -> LabelBatch:
        if idx is None:
            return LabelBatch(self.disease, self.body_parts, self.attributes)
        return LabelBatch(self.disease[idx], self.body_parts[idx], self.attributes[idx])

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, config: ModelConfig) -> "ImageSet":
        n_d, n_b, n_a = manifest.sizes
        h, w = config.image_height, config.image_width
        images = np.stack([load_image(r.image_path, h, w) for r in manifest.records]) if len(manifest) \
            else np.zeros((0, h, w, 3), np.float32)
        return cls(
            images=torch.from_numpy(images),
            disease=torch.tensor([r.disease_id for r in manifest.records], dtype=torch.int64),
            body_parts=torch.from_numpy(np.stack([multi_hot(r.body_part_ids, n_b) for r in manifest.records]))
            if len(manifest) else torch.zeros(0, n_b),
            attributes=torch.from_numpy(np.stack([multi_hot(r.attribute_ids, n_a) for r in manifest.records]))
            if len(manifest) else torch.zeros(0, n_a),
        )


def kfold_split(
    disease_ids: Sequence[int] | np.ndarray, folds: int = 5, seed: int = 0
) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Disease-stratified k-fold split; returns (train, val) index arrays per fold."""
    y = np.asarray(disease_ids)
    if folds < 2:
        raise ValueError("folds must be >= 2")
    if len(y) < folds:
        raise ValueError(f"{len(y)} samples cannot be split into {folds} folds")
    rng = np.random.default_rng(seed)
    assignment = np.empty(len(y), dtype=np.int64)
    offset = 0
    for cls in np.unique(y):
        members = np.flatnonzero(y == cls)
        if len(members) < folds:
            log.warning("class %s has %d samples, fewer than %d folds", cls, len(members), folds)
        members = rng.permutation(members)
        # rotate the starting fold so small classes do not all land in fold 0
        assignment[members] = (offset + np.arange(len(members))) % folds
        offset = (offset + len(members)) % folds
    out = []
    for k in range(folds):
        out.append((np.flatnonzero(assignment != k), np.flatnonzero(assignment == k)))
    return out


def iterate_batches(
    n: int, batch_size: int, rng: Optional[np.random.Generator] = None
) -> Iterator[np.ndarray]:
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


# CutMix ---------------------------------------------------------------------

@dataclass
class CutMixInfo:
    applied: bool
    box: Tuple[int, int, int, int] = (0, 0, 0, 0)  # y0, x0, y1, x1 (exclusive end)
    perm: Optional[np.ndarray] = None
    lam: float = 1.0  # area-corrected share of the original image


def cutmix_box(height: int, width: int, lam: float, rng: np.random.Generator) -> Tuple[int, int, int, int]:
    """Box with side ratios sqrt(1 - lam), uniformly centred and clipped to the image."""
    ratio = math.sqrt(1.0 - lam)
    cut_h, cut_w = int(height * ratio), int(width * ratio)
    cy, cx = int(rng.integers(height)), int(rng.integers(width))
    y0, y1 = np.clip([cy - cut_h // 2, cy + cut_h // 2], 0, height)
    x0, x1 = np.clip([cx - cut_w // 2, cx + cut_w // 2], 0, width)
    return int(y0), int(x0), int(y1), int(x1)


def apply_cutmix(
    images: torch.Tensor, labels: LabelBatch, box: Tuple[int, int, int, int], perm: np.ndarray, num_diseases: int
) -> Tuple[torch.Tensor, LabelBatch, float]:
    """Paste ``box`` from each sample's partner ``perm[i]``; mix labels by the exact area kept."""
    h, w = images.shape[-3], images.shape[-2]
    y0, x0, y1, x1 = box
    p = torch.from_numpy(np.asarray(perm, dtype=np.int64))
    mixed = images.clone()
    mixed[:, y0:y1, x0:x1, :] = images[p, y0:y1, x0:x1, :]
    lam = 1.0 - ((y1 - y0) * (x1 - x0)) / (h * w)

    def mix(t: Optional[torch.Tensor]) -> Optional[torch.Tensor]:
        return None if t is None else lam * t + (1.0 - lam) * t[p]

    soft = labels.soft_disease(num_diseases)
    out = LabelBatch(mix(soft), mix(labels.body_parts), mix(labels.attributes))
    return mixed, out, lam


def cutmix(
    images: torch.Tensor,
    labels: LabelBatch,
    num_diseases: int,
    rng: np.random.Generator,
    prob: float = 0.5,
    alpha: float = 0.3,
) -> Tuple[torch.Tensor, LabelBatch, CutMixInfo]:
    """Batch-level CutMix with lambda ~ Beta(alpha, alpha); labels always come back soft."""
    # draws happen unconditionally so the rng stream does not depend on the outcome
    u = rng.random()
    lam = float(rng.beta(alpha, alpha))
    perm = rng.permutation(images.shape[0])
    box = cutmix_box(images.shape[-3], images.shape[-2], lam, rng)
    if images.shape[0] < 2 or u >= prob:
        soft = LabelBatch(labels.soft_disease(num_diseases), labels.body_parts, labels.attributes)
        return images, soft, CutMixInfo(applied=False)
    mixed, out, lam_area = apply_cutmix(images, labels, box, perm, num_diseases)
    return mixed, out, CutMixInfo(applied=True, box=box, perm=perm, lam=lam_area)


def hflip(images: torch.Tensor, rng: np.random.Generator, prob: float = 0.5) -> torch.Tensor:
    flip = torch.from_numpy(rng.random(images.shape[0]) < prob)
    return torch.where(flip[:, None, None, None], images.flip(-2), images)
