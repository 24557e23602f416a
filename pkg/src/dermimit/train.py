"""SGD training loop, evaluation and cross-validation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import numpy as np
import torch

from .checkpoint import load_tensors, save_tensors
from .config import ConfigurationError, NumericFailure, RunConfig
from .data import ImageSet, cutmix, hflip, iterate_batches, kfold_split
from .metrics import aggregate, multiclass_metrics, multilabel_metrics
from .model import DermImitFormer, total_loss

log = logging.getLogger(__name__)


@dataclass
class OptimizerState:
    lr: float = 0.003
    momentum: float = 0.95
    weight_decay: float = 1e-5
    buffers: Dict[str, torch.Tensor] = field(default_factory=dict)
    step_count: int = 0

    def __post_init__(self) -> None:
        if self.lr <= 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ConfigurationError("lr must be positive; momentum and weight_decay non-negative")


@torch.no_grad()
def sgd_step(
    params: Dict[str, torch.Tensor],
    grads: Dict[str, Optional[torch.Tensor]],
    state: OptimizerState,
    lr: Optional[float] = None,
) -> None:
    """In place: g += wd * p; v = mu * v + g; p -= lr * v."""
    lr = state.lr if lr is None else lr
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if not torch.isfinite(g).all():
            raise NumericFailure(f"non-finite gradient for parameter {name!r}")
        g = g + state.weight_decay * p
        buf = state.buffers.get(name)
        if buf is None:
            buf = torch.zeros_like(p)
            state.buffers[name] = buf
        buf.mul_(state.momentum).add_(g)
        p.sub_(lr * buf)
    state.step_count += 1


def scheduled_lr(base: float, step: int, total: int, cosine: bool) -> float:
    if not cosine or total <= 0:
        return base
    return 0.5 * base * (1.0 + math.cos(math.pi * min(step, total) / total))


# evaluation -----------------------------------------------------------------

@torch.no_grad()
def predict_all(model: DermImitFormer, data: ImageSet, batch_size: int = 64) -> Dict[str, torch.Tensor]:
    was_training = model.training
    model.eval()
    chunks: Dict[str, List[torch.Tensor]] = {}
    for idx in iterate_batches(len(data), batch_size):
        pred = model(data.images[torch.from_numpy(idx)])
        for key in ("disease_logits_fused", "disease_logits_aux", "body_part_logits", "attribute_logits"):
            value = getattr(pred, key)
            if value is not None:
                chunks.setdefault(key, []).append(value)
        if pred.selection_disease is not None:
            chunks.setdefault("selected_disease", []).append(pred.selection_disease.indices)
    model.train(was_training)
    return {k: torch.cat(v) for k, v in chunks.items()}


def evaluate(model: DermImitFormer, data: ImageSet, threshold: float = 0.5) -> Dict[str, Any]:
    """Per-task metrics in percent: macro P/R/F1 and accuracy (exact match for multi-label tasks)."""
    cfg = model.config
    out = predict_all(model, data)
    report: Dict[str, Any] = {
        "disease": multiclass_metrics(
            data.disease.numpy(), out["disease_logits_fused"].argmax(-1).numpy(), cfg.num_diseases
        )
    }
    for task, key, target in (
        ("body_part", "body_part_logits", data.body_parts),
        ("attribute", "attribute_logits", data.attributes),
    ):
        if key in out:
            pred = (torch.sigmoid(out[key]) >= threshold).numpy()
            report[task] = multilabel_metrics(target.numpy() >= 0.5, pred)
    return report


def summary(report: Dict[str, Any]) -> Dict[str, Dict[str, float]]:
    return {task: {m: r[m] for m in ("precision", "recall", "f1", "accuracy")} for task, r in report.items()}


# checkpoints ----------------------------------------------------------------

def save_checkpoint(
    path: str | Path,
    model: DermImitFormer,
    run: RunConfig,
    state: Optional[OptimizerState] = None,
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    tensors = dict(model.state_dict())
    if state is not None:
        tensors.update({f"momentum/{k}": v for k, v in state.buffers.items()})
        extra = {**(extra or {}), "step_count": state.step_count}
    return save_tensors(path, tensors, run.to_dict(), extra)


def load_checkpoint(path: str | Path, dtype: torch.dtype = torch.float32):
    """Returns (model, run config, optimizer buffers, extra metadata)."""
    tensors, meta = load_tensors(path)
    run = RunConfig.from_dict(meta["config"])
    model = DermImitFormer(run.model).to(dtype)
    weights = {k: v for k, v in tensors.items() if not k.startswith("momentum/")}
    model.load_state_dict(weights)
    buffers = {k[len("momentum/"):]: v for k, v in tensors.items() if k.startswith("momentum/")}
    return model, run, buffers, meta.get("extra", {})


# training -------------------------------------------------------------------

@dataclass
class TrainResult:
    model: DermImitFormer
    history: List[Dict[str, Any]]
    steps: int
    best_f1: Optional[float] = None
    out_dir: Optional[Path] = None


def train(
    run: RunConfig,
    train_set: ImageSet,
    val_set: Optional[ImageSet] = None,
    seed: int = 0,
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
    on_epoch: Optional[Callable[[Dict[str, Any]], None]] = None,
) -> TrainResult:
    """Train from a seeded initialisation (or resume from a ``last`` checkpoint).

    Batch order, CutMix draws and flips for epoch ``e`` come from a generator
    seeded with ``(seed, e)``, so resuming at an epoch boundary replays the
    same stream as an uninterrupted run.
    """
    cfg, tc = run.model, run.train
    if len(train_set) == 0:
        raise ConfigurationError("training set is empty")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(seed)
    model = DermImitFormer(cfg)
    state = OptimizerState(lr=tc.lr, momentum=tc.momentum, weight_decay=tc.weight_decay)
    start_epoch, best_f1 = 0, None
    if resume is not None:
        loaded, _, buffers, extra = load_checkpoint(resume)
        model.load_state_dict(loaded.state_dict())
        state.buffers = buffers
        state.step_count = int(extra.get("step_count", 0))
        start_epoch = int(extra.get("epoch", 0))
        best_f1 = extra.get("best_f1")

    steps_per_epoch = math.ceil(len(train_set) / tc.batch_size)
    total_steps = tc.epochs * steps_per_epoch if tc.max_steps is None else min(tc.max_steps, tc.epochs * steps_per_epoch)
    params = dict(model.named_parameters())
    history: List[Dict[str, Any]] = []
    log_fh = open(out / "train_log.jsonl", "a") if out is not None else None
    try:
        epoch = start_epoch
        for epoch in range(start_epoch, tc.epochs):
            if tc.max_steps is not None and state.step_count >= tc.max_steps:
                break
            rng = np.random.default_rng([seed, epoch])
            model.train()
            sums: Dict[str, float] = {}
            n_batches = 0
            for idx in iterate_batches(len(train_set), tc.batch_size, rng):
                if tc.max_steps is not None and state.step_count >= tc.max_steps:
                    break
                t = torch.from_numpy(idx)
                images, labels = train_set.images[t], train_set.labels(t)
                if tc.hflip:
                    images = hflip(images, rng)
                if tc.cutmix_prob > 0:
                    images, labels, _ = cutmix(images, labels, cfg.num_diseases, rng, tc.cutmix_prob, tc.cutmix_alpha)
                losses = total_loss(model(images), labels)
                model.zero_grad(set_to_none=True)
                losses.total.backward()
                lr = scheduled_lr(tc.lr, state.step_count, total_steps, tc.cosine_decay)
                sgd_step(params, {k: p.grad for k, p in params.items()}, state, lr=lr)
                for k, v in losses.as_dict().items():
                    sums[k] = sums.get(k, 0.0) + v
                n_batches += 1

            entry: Dict[str, Any] = {
                "epoch": epoch + 1,
                "step": state.step_count,
                "loss": {k: v / max(n_batches, 1) for k, v in sums.items()},
            }
            if val_set is not None and len(val_set):
                metrics = summary(evaluate(model, val_set, tc.threshold))
                entry["val"] = metrics
                f1 = metrics["disease"]["f1"]
                if best_f1 is None or f1 > best_f1:
                    best_f1 = f1
                    entry["best"] = True
                    if out is not None:
                        save_checkpoint(out / "best", model, run, extra={"epoch": epoch + 1, "seed": seed, "best_f1": f1})
            history.append(entry)
            if log_fh is not None:
                log_fh.write(json.dumps(entry) + "\n")
                log_fh.flush()
            if out is not None:
                save_checkpoint(out / "last", model, run, state,
                                extra={"epoch": epoch + 1, "seed": seed, "best_f1": best_f1})
            if on_epoch is not None:
                on_epoch(entry)
        if out is not None and not history:
            save_checkpoint(out / "last", model, run, state,
                            extra={"epoch": start_epoch, "seed": seed, "best_f1": best_f1})
    finally:
        if log_fh is not None:
            log_fh.close()
    return TrainResult(model=model, history=history, steps=state.step_count, best_f1=best_f1, out_dir=out)


def crossval(
    run: RunConfig,
    data: ImageSet,
    folds: int = 5,
    seed: int = 0,
    out_dir: str | Path | None = None,
) -> Dict[str, Any]:
    """Train and evaluate on each stratified fold; aggregate mean and std per metric."""
    out = Path(out_dir) if out_dir is not None else None
    fold_reports: List[Dict[str, Any]] = []
    errors: Dict[int, str] = {}
    for k, (tr, va) in enumerate(kfold_split(data.disease.numpy(), folds, seed)):
        fold_dir = out / f"fold{k}" if out is not None else None
        try:
            result = train(run, data.subset(tr), data.subset(va), seed=seed, out_dir=fold_dir)
            report = summary(evaluate(result.model, data.subset(va), run.train.threshold))
        except Exception as exc:  # keep the folds that did finish
            log.error("fold %d failed: %s", k, exc)
            errors[k] = repr(exc)
            continue
        report_entry = {"fold": k, **report}
        fold_reports.append(report_entry)
        if out is not None:
            with open(fold_dir / "metrics.json", "w") as fh:
                json.dump(report_entry, fh, indent=2)
    agg = aggregate([{t: r[t] for t in r if t != "fold"} for r in fold_reports])
    result = {"folds": fold_reports, "aggregate": agg, "errors": errors}
    if out is not None:
        with open(out / "crossval.json", "w") as fh:
            json.dump(result, fh, indent=2, ensure_ascii=False)
    return result
