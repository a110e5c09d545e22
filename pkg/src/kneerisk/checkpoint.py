"""Checkpoint directories: ``weights.npz`` (flat arrays) + ``meta.json`` + loss curve CSV."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
import torch


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path: str | Path, tensors: dict, meta: dict, curve: list | None = None) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    arrays = {k: v.detach().cpu().numpy() if torch.is_tensor(v) else np.asarray(v) for k, v in tensors.items()}
    np.savez(out / "weights.npz", **arrays)
    meta = dict(meta)
    meta["shapes"] = {k: list(a.shape) for k, a in arrays.items()}
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=_jsonable))
    if curve:
        write_curve(curve, out / "loss_curve.csv")
    return out


def _jsonable(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def write_curve(curve: list, path: str | Path) -> None:
    keys = list(dict.fromkeys(k for row in curve for k in row))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for row in curve:
            w.writerow({k: _fmt(row.get(k, "")) for k in keys})


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else v


def load_checkpoint(path: str | Path) -> tuple[dict, dict]:
    """Return ``(tensors, meta)``; raises :class:`CheckpointError` on missing or corrupt files."""
    p = Path(path)
    try:
        meta = json.loads((p / "meta.json").read_text())
        with np.load(p / "weights.npz") as data:
            tensors = {k: torch.from_numpy(np.array(data[k])) for k in data.files}
    except FileNotFoundError as exc:
        raise CheckpointError(f"checkpoint {p} is missing: {exc.filename}") from exc
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"checkpoint {p} is corrupt: {exc}") from exc
    for k, shape in meta.get("shapes", {}).items():
        if k not in tensors or list(tensors[k].shape) != shape:
            raise CheckpointError(f"checkpoint {p}: array {k} does not match recorded shape {shape}")
    return tensors, meta


def exists(path: str | Path) -> bool:
    p = Path(path)
    return (p / "meta.json").is_file() and (p / "weights.npz").is_file()


def prefixed(state: dict, prefix: str) -> dict:
    return {f"{prefix}.{k}": v for k, v in state.items()}


def unprefixed(tensors: dict, prefix: str) -> dict:
    head = prefix + "."
    return {k[len(head):]: v for k, v in tensors.items() if k.startswith(head)}
