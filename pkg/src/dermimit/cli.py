"""Command-line interface.

Global flags come before the subcommand::

    dermimit [--config run.json] [--seed N] [--threads N] [--out-dir DIR] <command> ...

Environment overrides (prefix ``DERMIMIT_``):

* ``DERMIMIT_CONFIG``, ``DERMIMIT_SEED``, ``DERMIMIT_THREADS``, ``DERMIMIT_OUT_DIR``
  supply defaults for the matching global flags; flags win.
* ``DERMIMIT_MODEL__<FIELD>`` and ``DERMIMIT_TRAIN__<FIELD>`` override single
  fields of the run config after the config file is read, e.g.
  ``DERMIMIT_TRAIN__LR=0.01`` or ``DERMIMIT_MODEL__ENABLED_HEADS='["disease"]'``.
  Values are parsed as JSON, falling back to a plain string.

Exit codes: 0 success, 2 bad configuration or data, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence

import torch

from .attention import export_attention
from .config import ConfigurationError, NumericFailure, RunConfig
from .data import ImageSet, ManifestError, load_image, load_manifest
from .model import infer
from .train import crossval, evaluate, load_checkpoint, summary, train

ENV_PREFIX = "DERMIMIT_"
log = logging.getLogger("dermimit")


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def env_overrides(environ: Mapping[str, str]) -> Dict[str, Dict[str, Any]]:
    out: Dict[str, Dict[str, Any]] = {"model": {}, "train": {}}
    for key, raw in environ.items():
        for section in ("model", "train"):
            prefix = f"{ENV_PREFIX}{section.upper()}__"
            if key.startswith(prefix):
                out[section][key[len(prefix):].lower()] = _parse_value(raw)
    return out


def resolve_run_config(
    config_path: Optional[str], environ: Mapping[str, str], cli: Optional[Dict[str, Dict[str, Any]]] = None
) -> RunConfig:
    """Built-in defaults < config file < environment < subcommand flags."""
    raw: Dict[str, Dict[str, Any]] = {"model": {}, "train": {}}
    if config_path:
        with open(config_path) as fh:
            loaded = json.load(fh)
        for section in raw:
            raw[section].update(loaded.get(section, {}))
    for layer in (env_overrides(environ), cli or {}):
        for section, values in layer.items():
            raw[section].update({k: v for k, v in values.items() if v is not None})
    return RunConfig.from_dict(raw)


def _with_vocab_sizes(run: RunConfig, sizes: Sequence[int]) -> RunConfig:
    n_d, n_b, n_a = sizes
    current = (run.model.num_diseases, run.model.num_body_parts, run.model.num_attributes)
    if current != tuple(sizes):
        log.info("class counts %s taken from the vocabulary (config had %s)", tuple(sizes), current)
    return RunConfig(run.model.replace(num_diseases=n_d, num_body_parts=n_b, num_attributes=n_a), run.train)


def _load_set(manifest_path: str, vocab: Optional[str], run: RunConfig):
    manifest = load_manifest(manifest_path, vocab)
    return manifest, ImageSet.from_manifest(manifest, run.model)


def _write_json(path: Path, obj: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, ensure_ascii=False)


def _check_sizes(run: RunConfig, manifest) -> None:
    have = (run.model.num_diseases, run.model.num_body_parts, run.model.num_attributes)
    if have != manifest.sizes:
        raise ConfigurationError(f"checkpoint class counts {have} do not match vocabulary sizes {manifest.sizes}")


# subcommands ----------------------------------------------------------------

def cmd_train(args: argparse.Namespace, run: RunConfig) -> int:
    manifest = load_manifest(args.manifest, args.vocab)
    run = _with_vocab_sizes(run, manifest.sizes)
    train_set = ImageSet.from_manifest(manifest, run.model)
    val_set = _load_set(args.val_manifest, args.vocab, run)[1] if args.val_manifest else None
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    run.save(out / "config.json")
    result = train(run, train_set, val_set, seed=args.seed, out_dir=out, resume=args.resume,
                   on_epoch=lambda e: log.info("epoch %d step %d loss %.4f", e["epoch"], e["step"], e["loss"].get("total", 0.0)))
    final = {"steps": result.steps, "best_f1": result.best_f1,
             "train": summary(evaluate(result.model, train_set, run.train.threshold))}
    if val_set is not None:
        final["val"] = summary(evaluate(result.model, val_set, run.train.threshold))
    _write_json(out / "metrics.json", final)
    print(json.dumps(final, indent=2))
    return 0


def cmd_eval(args: argparse.Namespace, run: RunConfig) -> int:
    model, ck_run, _, _ = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest, args.vocab)
    _check_sizes(ck_run, manifest)
    data = ImageSet.from_manifest(manifest, ck_run.model)
    report = evaluate(model, data, ck_run.train.threshold)
    out = Path(args.out_dir)
    _write_json(out / "metrics.json", report)
    if args.predictions:
        preds = _infer_records(model, data.images, manifest.vocab, ck_run.train.threshold)
        for p, rec in zip(preds, manifest.records):
            p["image_path"] = str(rec.image_path)
        _write_json(out / "predictions.json", preds)
    print(json.dumps(summary(report), indent=2))
    return 0


def cmd_crossval(args: argparse.Namespace, run: RunConfig) -> int:
    manifest = load_manifest(args.manifest, args.vocab)
    run = _with_vocab_sizes(run, manifest.sizes)
    data = ImageSet.from_manifest(manifest, run.model)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    run.save(out / "config.json")
    result = crossval(run, data, folds=args.folds, seed=args.seed, out_dir=out)
    text = {task: {m: v["text"] for m, v in metrics.items()} for task, metrics in result["aggregate"].items()}
    print(json.dumps({"aggregate": text, "errors": result["errors"]}, indent=2, ensure_ascii=False))
    return 0 if not result["errors"] else 1


def cmd_attend(args: argparse.Namespace, run: RunConfig) -> int:
    model, ck_run, _, _ = load_checkpoint(args.checkpoint)
    cfg = ck_run.model
    out = Path(args.out_dir)
    for path in args.image:
        img = torch.from_numpy(load_image(path, cfg.image_height, cfg.image_width))
        stem = Path(path).stem
        png = out / f"{stem}_{args.head}_layer{args.layer}.png"
        csv_path = out / f"{stem}_{args.head}_layer{args.layer}.csv" if args.csv else None
        hm = export_attention(model, img, args.layer, png, csv_path, head=args.head, alpha=args.alpha)
        print(json.dumps({"image": str(path), "heatmap": str(png), "layer_index": hm.layer,
                          "csv": str(csv_path) if csv_path else None}))
    return 0


def cmd_predict(args: argparse.Namespace, run: RunConfig) -> int:
    model, ck_run, _, _ = load_checkpoint(args.checkpoint)
    cfg = ck_run.model
    vocab = json.loads(Path(args.vocab).read_text()) if args.vocab else None
    images = torch.stack([torch.from_numpy(load_image(p, cfg.image_height, cfg.image_width)) for p in args.image])
    threshold = ck_run.train.threshold if args.threshold is None else args.threshold
    preds = _infer_records(model, images, _vocab_lists(vocab) if vocab else None, threshold)
    for p, path in zip(preds, args.image):
        p["image_path"] = str(path)
    _write_json(Path(args.out_dir) / "predictions.json", preds)
    print(json.dumps(preds, indent=2))
    return 0


def cmd_validate(args: argparse.Namespace, run: RunConfig) -> int:
    manifest = load_manifest(args.manifest, args.vocab, check_files=not args.no_check_files)
    counts = [0] * manifest.sizes[0]
    for r in manifest.records:
        counts[r.disease_id] += 1
    report = {"records": len(manifest), "vocab_sizes": dict(zip(("disease", "body_part", "attribute"), manifest.sizes)),
              "disease_counts": counts, "warnings": manifest.report}
    print(json.dumps(report, indent=2))
    return 0


def cmd_make_synthetic(args: argparse.Namespace, run: RunConfig) -> int:
    from .synthetic import write_dataset

    path = write_dataset(Path(args.out_dir), args.n, seed=args.seed, size=args.size)
    print(json.dumps({"manifest": str(path), "images": args.n}))
    return 0


def _vocab_lists(raw: Dict[str, Any]) -> Dict[str, List[str]]:
    out = {}
    for key, entries in raw.items():
        out[key] = [entries[str(i)] for i in range(len(entries))] if isinstance(entries, dict) else list(entries)
    return out


def _infer_records(model, images, vocab, threshold):
    names = vocab or {}
    return infer(model, images, threshold, names.get("disease"), names.get("body_part"), names.get("attribute"))


# parser ---------------------------------------------------------------------

def build_parser(environ: Mapping[str, str]) -> argparse.ArgumentParser:
    def env(name: str, default: Any = None) -> Any:
        return environ.get(ENV_PREFIX + name, default)

    p = argparse.ArgumentParser(prog="dermimit", description="Multi-task skin disease transformer: train, evaluate, inspect.")
    p.add_argument("--config", default=env("CONFIG"), help="JSON run config with 'model' and 'train' sections")
    p.add_argument("--seed", type=int, default=int(env("SEED", 0)))
    p.add_argument("--threads", type=int, default=int(env("THREADS", 1)), help="torch intra-op threads (default 1)")
    p.add_argument("--out-dir", default=env("OUT_DIR", "runs/latest"))
    p.add_argument("--log-level", default=env("LOG_LEVEL", "INFO"))
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train on a manifest; writes checkpoints, train_log.jsonl, metrics.json")
    t.add_argument("--manifest", required=True)
    t.add_argument("--val-manifest")
    t.add_argument("--vocab", help="vocab.json (default: next to the manifest)")
    t.add_argument("--resume", help="checkpoint directory written as <out-dir>/last")
    t.add_argument("--epochs", type=int)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint; writes metrics.json")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--vocab")
    e.add_argument("--predictions", action="store_true", help="also write predictions.json")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("crossval", help="stratified k-fold train/eval; writes crossval.json")
    c.add_argument("--manifest", required=True)
    c.add_argument("--vocab")
    c.add_argument("--folds", type=int, default=5)
    c.add_argument("--epochs", type=int)
    c.add_argument("--max-steps", type=int)
    c.set_defaults(func=cmd_crossval)

    a = sub.add_parser("attend", help="write attention heatmap PNGs")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--image", required=True, nargs="+")
    a.add_argument("--layer", type=int, default=-1, help="index over shared then head layers; negative counts from the end")
    a.add_argument("--head", default="disease", choices=("disease", "body_part", "attribute"))
    a.add_argument("--alpha", type=float, default=0.5)
    a.add_argument("--csv", action="store_true", help="also dump raw scores as CSV")
    a.set_defaults(func=cmd_attend)

    pr = sub.add_parser("predict", help="write inference JSON for images")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--image", required=True, nargs="+")
    pr.add_argument("--vocab")
    pr.add_argument("--threshold", type=float)
    pr.set_defaults(func=cmd_predict)

    v = sub.add_parser("validate-data", help="check a manifest against its vocabulary")
    v.add_argument("--manifest", required=True)
    v.add_argument("--vocab")
    v.add_argument("--no-check-files", action="store_true")
    v.set_defaults(func=cmd_validate)

    s = sub.add_parser("make-synthetic", help="write the programmatic lesion dataset")
    s.add_argument("--n", type=int, default=60)
    s.add_argument("--size", type=int, default=64)
    s.set_defaults(func=cmd_make_synthetic)
    return p


def main(argv: Optional[Sequence[str]] = None, environ: Optional[Mapping[str, str]] = None) -> int:
    environ = os.environ if environ is None else environ
    args = build_parser(environ).parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(args.threads)
    cli_train = {k: getattr(args, k, None) for k in ("epochs", "max_steps", "batch_size", "lr")}
    try:
        run = resolve_run_config(args.config, environ, {"train": cli_train})
        return args.func(args, run)
    except (ConfigurationError, ManifestError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
