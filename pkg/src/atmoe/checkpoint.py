"""Self-describing JSON checkpoints.

One document carries the full config, the stage marker, seeds, and every
named parameter as a flat row-major number list with dtype and shape. A
sha256 checksum over the canonical serialization (sorted keys, compact
separators, checksum field excluded) validates on load. f64 storage
round-trips bit-identically; f32 halves the file at 1e-6-relative fidelity.
Writes go to a temp file first and rename into place.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import Config, ConfigError
from .model import ToyTransformer
from .training import StageOrderError

FORMAT_VERSION = 1
STAGES = ("none", "experts", "premerged", "router")
DTYPES = {"f64": np.float64, "f32": np.float32}


class CheckpointError(RuntimeError):
    """Unreadable, malformed, or corrupt checkpoint."""


def stage_index(stage: str) -> int:
    if stage not in STAGES:
        raise CheckpointError(f"unknown stage marker {stage!r}; expected one of {STAGES}")
    return STAGES.index(stage)


def canonical_json(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=False)


def checkpoint_checksum(doc: dict) -> str:
    body = {k: v for k, v in doc.items() if k != "checksum"}
    return hashlib.sha256(canonical_json(body).encode("utf-8")).hexdigest()


def checkpoint_doc(model: ToyTransformer, stage_completed: str,
                   seeds: dict | None = None, dtype: str = "f64") -> dict:
    stage_index(stage_completed)
    if dtype not in DTYPES:
        raise ValueError(f"dtype must be one of {sorted(DTYPES)}, got {dtype!r}")
    tensors = {}
    for name in sorted(model.params):
        arr = model.params[name]
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"parameter {name!r} holds non-finite values")
        stored = arr.astype(DTYPES[dtype])
        tensors[name] = {
            "dtype": dtype,
            "shape": list(arr.shape),
            "data": [float(v) for v in stored.ravel()],
        }
    doc = {
        "format_version": FORMAT_VERSION,
        "config": model.cfg.to_dict(),
        "stage_completed": stage_completed,
        "seeds": dict(seeds) if seeds else {"config": model.cfg.seed},
        "tensors": tensors,
    }
    doc["checksum"] = checkpoint_checksum(doc)
    return doc


def save_checkpoint(path: str | Path, model: ToyTransformer, stage_completed: str,
                    seeds: dict | None = None, dtype: str = "f64") -> dict:
    doc = checkpoint_doc(model, stage_completed, seeds, dtype)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(canonical_json(doc))
        fh.write("\n")
    tmp.replace(path)
    return doc


@dataclass
class LoadedCheckpoint:
    model: ToyTransformer
    stage_completed: str
    seeds: dict
    doc: dict


def load_checkpoint(path: str | Path) -> LoadedCheckpoint:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"checkpoint {path} is not valid JSON: {exc}") from exc
    return restore_checkpoint(doc)


def restore_checkpoint(doc: dict) -> LoadedCheckpoint:
    if not isinstance(doc, dict):
        raise CheckpointError("checkpoint document must be a JSON object")
    for key in ("format_version", "config", "stage_completed", "tensors", "checksum"):
        if key not in doc:
            raise CheckpointError(f"checkpoint is missing the {key!r} field")
    if doc["format_version"] != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format_version {doc['format_version']!r}")
    if checkpoint_checksum(doc) != doc["checksum"]:
        raise CheckpointError("checkpoint checksum mismatch (corrupt or edited file)")
    stage = doc["stage_completed"]
    stage_index(stage)
    try:
        cfg = Config.from_dict(doc["config"])
    except ConfigError as exc:
        raise CheckpointError(f"checkpoint config is invalid: {exc}") from exc
    params = {}
    for name, entry in doc["tensors"].items():
        if entry.get("dtype") not in DTYPES:
            raise CheckpointError(f"tensor {name!r} has unknown dtype {entry.get('dtype')!r}")
        arr = np.asarray(entry["data"], dtype=DTYPES[entry["dtype"]])
        if arr.size != int(np.prod(entry["shape"], dtype=np.int64)):
            raise CheckpointError(f"tensor {name!r} data length disagrees with its shape")
        params[name] = arr.reshape(entry["shape"]).astype(np.float64)
    try:
        model = ToyTransformer(cfg, params)
    except (ValueError, KeyError) as exc:
        raise CheckpointError(f"checkpoint tensors do not form a model: {exc}") from exc
    return LoadedCheckpoint(model=model, stage_completed=stage,
                            seeds=dict(doc.get("seeds", {})), doc=doc)


def require_stage(have: str, needed: str, about_to_run: str) -> None:
    """Raise StageOrderError unless ``have`` covers the prerequisite stage."""
    if stage_index(have) < stage_index(needed):
        raise StageOrderError(
            f"stage {about_to_run!r} requires a checkpoint with stage_completed "
            f">= {needed!r}, got {have!r}"
        )
