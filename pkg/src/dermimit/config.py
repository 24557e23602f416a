"""Model and training configuration."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Tuple

TASKS: Tuple[str, ...] = ("disease", "body_part", "attribute")
FUSION_MODES: Tuple[str, ...] = ("concat", "cim")


class ConfigurationError(ValueError):
    """Raised for inconsistent shapes, sizes or options."""


class NumericFailure(FloatingPointError):
    """Raised when a non-finite value appears in activations or gradients."""


@dataclass
class ModelConfig:
    image_height: int = 64
    image_width: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    backbone_layers: int = 4
    head_layers: int = 2
    num_heads: int = 4
    mlp_ratio: float = 4.0
    select_k: int = 8
    num_diseases: int = 3
    num_body_parts: int = 4
    num_attributes: int = 5
    fusion_dim: int = 64
    enabled_heads: Tuple[str, ...] = TASKS
    lsm_enabled: bool = True
    fusion_mode: str = "cim"
    # experimental: cross-attend over full patch sequences instead of the pooled token
    multi_key_fusion: bool = False

    def __post_init__(self) -> None:
        self.enabled_heads = tuple(self.enabled_heads)
        self.validate()

    @property
    def grid(self) -> Tuple[int, int]:
        return self.image_height // self.patch_size, self.image_width // self.patch_size

    @property
    def num_patches(self) -> int:
        rows, cols = self.grid
        return rows * cols

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3

    def has(self, task: str) -> bool:
        return task in self.enabled_heads

    def validate(self) -> None:
        h, w, p = self.image_height, self.image_width, self.patch_size
        if p <= 0 or h <= 0 or w <= 0:
            raise ConfigurationError("image and patch sizes must be positive")
        if h % p or w % p:
            raise ConfigurationError(f"image {h}x{w} is not divisible by patch size {p}")
        if self.embed_dim % self.num_heads:
            raise ConfigurationError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.fusion_dim % self.num_heads:
            raise ConfigurationError(f"fusion_dim {self.fusion_dim} not divisible by num_heads {self.num_heads}")
        if self.fusion_dim != self.embed_dim:
            raise ConfigurationError("fusion_dim must equal embed_dim (no projection between heads and fusion)")
        if not 1 <= self.select_k <= self.num_patches:
            raise ConfigurationError(f"select_k={self.select_k} outside [1, {self.num_patches}]")
        if self.backbone_layers < 0 or self.head_layers < 1:
            raise ConfigurationError("backbone_layers must be >= 0 and head_layers >= 1")
        unknown = set(self.enabled_heads) - set(TASKS)
        if unknown:
            raise ConfigurationError(f"unknown task heads: {sorted(unknown)}")
        if "disease" not in self.enabled_heads:
            raise ConfigurationError("the disease head must be enabled")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigurationError(f"fusion_mode must be one of {FUSION_MODES}")
        for name in ("num_diseases", "num_body_parts", "num_attributes"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")

    def to_dict(self) -> Dict[str, Any]:
        d = dataclasses.asdict(self)
        d["enabled_heads"] = list(self.enabled_heads)
        return d

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigurationError(f"unknown model config keys: {sorted(extra)}")
        return cls(**d)

    def replace(self, **changes: Any) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


PRESETS: Dict[str, Dict[str, Any]] = {
    "full": dict(
        image_height=384, image_width=384, patch_size=16, embed_dim=768, fusion_dim=768,
        backbone_layers=12, num_heads=12, select_k=24,
        num_diseases=49, num_body_parts=15, num_attributes=27,
    ),
    "desk": dict(
        image_height=64, image_width=64, patch_size=8, embed_dim=64, fusion_dim=64,
        backbone_layers=4, num_heads=4, select_k=8,
    ),
}


def preset(name: str, **overrides: Any) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ModelConfig(**{**PRESETS[name], **overrides})


@dataclass
class TrainConfig:
    lr: float = 0.003
    momentum: float = 0.95
    weight_decay: float = 1e-5
    batch_size: int = 16
    epochs: int = 30
    max_steps: int | None = None
    cutmix_prob: float = 0.5
    cutmix_alpha: float = 0.3
    hflip: bool = False
    cosine_decay: bool = False
    threshold: float = 0.5

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigurationError(f"unknown train config keys: {sorted(extra)}")
        return cls(**d)


@dataclass
class RunConfig:
    """A model config plus a training config, as stored in a JSON config file."""

    model: ModelConfig = field(default_factory=lambda: preset("desk"))
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> Dict[str, Any]:
        return {"model": self.model.to_dict(), "train": self.train.to_dict()}

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "RunConfig":
        model = dict(d.get("model", {}))
        base = model.pop("preset", "desk")
        if base not in PRESETS:
            raise ConfigurationError(f"unknown preset {base!r}; choose from {sorted(PRESETS)}")
        return cls(
            model=ModelConfig.from_dict({**PRESETS[base], **model}),
            train=TrainConfig.from_dict(d.get("train", {})),
        )

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
