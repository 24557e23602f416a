"""Checkpoint directories: ``meta.json`` plus one raw little-endian float32 file per tensor.

Layout::

    <dir>/meta.json            {"format", "version", "config", "tensors": [...], "extra"}
    <dir>/tensors/<name>.bin   raw '<f4' bytes, C order, shape from the table

Tensor names are the model's ``state_dict`` keys; optimizer momentum buffers
are stored as ``momentum/<param name>``.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

import numpy as np
import torch

FORMAT = "dermimit-checkpoint"
VERSION = 1


def _file_name(name: str) -> str:
    return name.replace("/", "__") + ".bin"


def save_tensors(
    path: str | Path,
    tensors: Mapping[str, torch.Tensor],
    config: Dict[str, Any],
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    path = Path(path)
    (path / "tensors").mkdir(parents=True, exist_ok=True)
    table = []
    for name in sorted(tensors):
        arr = tensors[name].detach().cpu().to(torch.float32).contiguous().numpy()
        fname = _file_name(name)
        arr.astype("<f4", copy=False).tofile(path / "tensors" / fname)
        table.append({"name": name, "shape": list(arr.shape), "dtype": "float32", "file": f"tensors/{fname}"})
    meta = {"format": FORMAT, "version": VERSION, "config": config, "tensors": table, "extra": extra or {}}
    with open(path / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    return path


def load_tensors(path: str | Path) -> Tuple[Dict[str, torch.Tensor], Dict[str, Any]]:
    path = Path(path)
    with open(path / "meta.json") as fh:
        meta = json.load(fh)
    if meta.get("format") != FORMAT:
        raise ValueError(f"{path} is not a {FORMAT} directory")
    tensors = {}
    for entry in meta["tensors"]:
        if entry["dtype"] != "float32":
            raise ValueError(f"unsupported dtype {entry['dtype']} for {entry['name']}")
        arr = np.fromfile(path / entry["file"], dtype="<f4")
        expected = int(np.prod(entry["shape"])) if entry["shape"] else 1
        if arr.size != expected:
            raise ValueError(f"{entry['file']}: {arr.size} values, expected {expected}")
        tensors[entry["name"]] = torch.from_numpy(arr.reshape(entry["shape"]).astype(np.float32))
    return tensors, meta


def checkpoint_hash(path: str | Path) -> str:
    """SHA-256 over the tensor table and every tensor's bytes, in name order."""
    path = Path(path)
    with open(path / "meta.json") as fh:
        meta = json.load(fh)
    h = hashlib.sha256()
    h.update(json.dumps(meta["config"], sort_keys=True).encode())
    for entry in sorted(meta["tensors"], key=lambda e: e["name"]):
        h.update(entry["name"].encode())
        h.update(json.dumps(entry["shape"]).encode())
        h.update((path / entry["file"]).read_bytes())
    return h.hexdigest()
