"""The multi-task model: shared backbone, task heads, lesion selection, fusion and losses."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import AttentionRecord, EncoderLayer, LayerNorm, ViTBackbone, init_linear, patchify, run_layers
from .config import ConfigurationError, ModelConfig
from .cross_interaction import (
    ConcatFusion,
    CrossInteraction,
    FusedFeatures,
    HeadFeatures,
    cim_vectors,
    gap,
    vector_sizes,
)
from .lesion_selection import SelectionResult, head_scores, select_top_k

LOG_EPS = math.log(1e-12)


@dataclass
class LabelBatch:
    """Targets for a batch. ``disease`` is (B,) class indices or (B, n_d) soft labels."""

    disease: torch.Tensor
    body_parts: Optional[torch.Tensor] = None  # (B, n_b) multi-hot or soft
    attributes: Optional[torch.Tensor] = None  # (B, n_a) multi-hot or soft

    def __len__(self) -> int:
        return self.disease.shape[0]

    def soft_disease(self, num_classes: int) -> torch.Tensor:
        if self.disease.dim() == 1:
            return F.one_hot(self.disease.long(), num_classes).to(torch.get_default_dtype())
        return self.disease


@dataclass
class Prediction:
    disease_logits_aux: torch.Tensor
    disease_logits_fused: torch.Tensor
    body_part_logits: Optional[torch.Tensor] = None
    attribute_logits: Optional[torch.Tensor] = None
    selection_disease: Optional[SelectionResult] = None
    selection_attr: Optional[SelectionResult] = None
    attention: List[AttentionRecord] = field(default_factory=list)
    head_attention: Dict[str, List[AttentionRecord]] = field(default_factory=dict)
    fused: Optional[FusedFeatures] = None


@dataclass
class LossBreakdown:
    disease_aux: torch.Tensor
    disease_fused: torch.Tensor
    body_part: torch.Tensor
    attribute: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return self.disease_aux + self.disease_fused + self.body_part + self.attribute

    def as_dict(self) -> Dict[str, float]:
        return {
            "L_d": self.disease_aux.item(),
            "L_d_fused": self.disease_fused.item(),
            "L_b": self.body_part.item(),
            "L_a": self.attribute.item(),
            "total": self.total.item(),
        }


def ce_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Batch-mean cross-entropy against class indices or soft targets."""
    if target.dim() == logits.dim() - 1:
        target = F.one_hot(target.long(), logits.shape[-1]).to(logits.dtype)
    log_p = torch.clamp(torch.log_softmax(logits, dim=-1), min=LOG_EPS)
    return -(target * log_p).sum(dim=-1).mean()


def bce_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Batch-mean of the per-sample binary cross-entropy summed over labels."""
    per_label = F.binary_cross_entropy_with_logits(logits, target.to(logits.dtype), reduction="none")
    return per_label.sum(dim=-1).mean()


class TaskHead(nn.Module):
    def __init__(self, config: ModelConfig, first_index: int):
        super().__init__()
        d = config.embed_dim
        self.layers = nn.ModuleList(
            EncoderLayer(d, config.num_heads, config.mlp_ratio, index=first_index + i)
            for i in range(config.head_layers)
        )
        self.norm = LayerNorm(d)

    def forward(self, tokens: torch.Tensor):
        x, records = run_layers(self.layers, tokens)
        return self.norm(x), records


class DermImitFormer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.backbone = ViTBackbone(config)
        first = config.backbone_layers
        self.heads = nn.ModuleDict(
            {task: TaskHead(config, first) for task in config.enabled_heads}
        )
        if config.fusion_mode == "cim":
            self.fusion: nn.Module = CrossInteraction(config)
        else:
            self.fusion = ConcatFusion(config)
        sizes = vector_sizes(config)
        d = config.embed_dim
        self.disease_aux = nn.Linear(d, config.num_diseases)
        self.disease_fused = nn.Linear(sizes["disease"], config.num_diseases)
        self.body_part = nn.Linear(sizes["body_part"], config.num_body_parts) if "body_part" in sizes else None
        self.attribute = nn.Linear(sizes["attribute"], config.num_attributes) if "attribute" in sizes else None
        for m in (self.heads, self.disease_aux, self.disease_fused, self.body_part, self.attribute):
            if m is not None:
                m.apply(init_linear)

    def forward(self, images: torch.Tensor) -> Prediction:
        cfg = self.config
        tokens, records = self.backbone(images)
        feats: Dict[str, HeadFeatures] = {}
        selections: Dict[str, SelectionResult] = {}
        head_records: Dict[str, List[AttentionRecord]] = {}
        for task, head in self.heads.items():
            out, recs = head(tokens)
            head_records[task] = recs
            local = None
            if cfg.lsm_enabled and task in ("disease", "attribute"):
                sel = select_top_k(out, head_scores(recs), cfg.select_k)
                selections[task] = sel
                local = gap(sel.selected_tokens)
            feats[task] = HeadFeatures(out[..., 0, :], out[..., 1:, :], local)

        disease, body, attr = feats["disease"], feats.get("body_part"), feats.get("attribute")
        fused = None
        if cfg.fusion_mode == "cim":
            fused = self.fusion(disease, body, attr)
            vectors = cim_vectors(fused, disease, body, attr)
        else:
            vectors = self.fusion(disease, body, attr)

        return Prediction(
            disease_logits_aux=self.disease_aux(disease.class_token),
            disease_logits_fused=self.disease_fused(vectors["disease"]),
            body_part_logits=self.body_part(vectors["body_part"]) if body is not None else None,
            attribute_logits=self.attribute(vectors["attribute"]) if attr is not None else None,
            selection_disease=selections.get("disease"),
            selection_attr=selections.get("attribute"),
            attention=records,
            head_attention=head_records,
            fused=fused,
        )

    def total_loss(self, pred: Prediction, labels: LabelBatch) -> LossBreakdown:
        return total_loss(pred, labels)


def total_loss(pred: Prediction, labels: LabelBatch) -> LossBreakdown:
    """Sum of the two disease CE terms and the body-part/attribute BCE terms."""
    zero = pred.disease_logits_fused.new_zeros(())
    l_b = zero
    if pred.body_part_logits is not None:
        if labels.body_parts is None:
            raise ConfigurationError("body-part head enabled but no body-part labels given")
        l_b = bce_loss(pred.body_part_logits, labels.body_parts)
    l_a = zero
    if pred.attribute_logits is not None:
        if labels.attributes is None:
            raise ConfigurationError("attribute head enabled but no attribute labels given")
        l_a = bce_loss(pred.attribute_logits, labels.attributes)
    return LossBreakdown(
        disease_aux=ce_loss(pred.disease_logits_aux, labels.disease),
        disease_fused=ce_loss(pred.disease_logits_fused, labels.disease),
        body_part=l_b,
        attribute=l_a,
    )


class PlainViT(nn.Module):
    """Reference single-task ViT classifier (patch embed, encoder stack, final norm, linear)."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.embed_dim
        self.backbone = ViTBackbone(config.replace(backbone_layers=config.backbone_layers + config.head_layers))
        self.norm = LayerNorm(d)
        self.classifier = nn.Linear(d, config.num_diseases)

    @classmethod
    def from_multitask(cls, model: DermImitFormer) -> "PlainViT":
        ref = cls(model.config).to(next(model.parameters()).dtype)
        src = model.backbone
        ref.backbone.embed.load_state_dict(src.embed.state_dict())
        layers = list(src.layers) + list(model.heads["disease"].layers)
        for dst, layer in zip(ref.backbone.layers, layers):
            dst.load_state_dict(layer.state_dict())
        ref.norm.load_state_dict(model.heads["disease"].norm.state_dict())
        ref.classifier.load_state_dict(model.disease_fused.state_dict())
        return ref

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        x, _ = self.backbone(images)
        return self.classifier(self.norm(x)[..., 0, :])


@torch.no_grad()
def infer(
    model: DermImitFormer,
    images: torch.Tensor,
    threshold: float = 0.5,
    disease_names: Optional[Sequence[str]] = None,
    body_part_names: Optional[Sequence[str]] = None,
    attribute_names: Optional[Sequence[str]] = None,
) -> List[Dict[str, Any]]:
    """Structured diagnosis per image: ranked differential, multi-label sets, selected tokens."""
    was_training = model.training
    model.eval()
    pred = model(images)
    model.train(was_training)

    def name(names, i):
        return names[i] if names is not None else str(i)

    probs = torch.softmax(pred.disease_logits_fused, dim=-1)
    out = []
    for b in range(images.shape[0]):
        order = torch.sort(probs[b], descending=True, stable=True).indices.tolist()
        item: Dict[str, Any] = {
            "diseases": [
                {"id": i, "name": name(disease_names, i), "probability": float(probs[b, i])} for i in order
            ]
        }
        for key, logits, names in (
            ("body_parts", pred.body_part_logits, body_part_names),
            ("attributes", pred.attribute_logits, attribute_names),
        ):
            if logits is None:
                continue
            p = torch.sigmoid(logits[b])
            item[key] = [
                {"id": i, "name": name(names, i), "probability": float(p[i])}
                for i in range(p.shape[0])
                if float(p[i]) >= threshold
            ]
        for key, sel in (("selected_tokens_disease", pred.selection_disease),
                         ("selected_tokens_attribute", pred.selection_attr)):
            if sel is not None:
                item[key] = sel.indices[b].tolist()
        out.append(item)
    return out
