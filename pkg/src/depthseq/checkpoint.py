"""Checkpoint files: one JSON manifest line, then raw little-endian float64 tensors."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelConfig, param_shapes

FORMAT = "DSTCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    seed: int = 0
    epoch: int = 0
    val_metric: float | None = None
    extra: dict = field(default_factory=dict)


def _check_shapes(config: ModelConfig, params: dict[str, np.ndarray]) -> None:
    expected = param_shapes(config)
    if set(expected) != set(params):
        missing = sorted(set(expected) - set(params))
        surplus = sorted(set(params) - set(expected))
        raise CheckpointError(f"shape mismatch: missing {missing}, unexpected {surplus}")
    for name, shape in expected.items():
        if tuple(params[name].shape) != tuple(shape):
            raise CheckpointError(
                f"shape mismatch for {name}: config implies {tuple(shape)}, stored {tuple(params[name].shape)}"
            )


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    _check_shapes(ckpt.config, ckpt.params)
    table = []
    blobs = []
    offset = 0
    for name in sorted(ckpt.params):
        arr = np.ascontiguousarray(ckpt.params[name], dtype="<f8")
        raw = arr.tobytes(order="C")
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "dtype": "f64le",
        "config": ckpt.config.to_dict(),
        "seed": int(ckpt.seed),
        "epoch": int(ckpt.epoch),
        "val_metric": None if ckpt.val_metric is None else float(ckpt.val_metric),
        "extra": ckpt.extra,
        "tensors": table,
        "payload_bytes": offset,
    }
    head = (json.dumps(manifest, sort_keys=True, separators=(",", ":")) + "\n").encode("utf-8")
    Path(path).write_bytes(head + b"".join(blobs))


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise CheckpointError("corrupt checkpoint: missing manifest terminator")
    try:
        manifest = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError("corrupt checkpoint: unreadable manifest") from None
    if manifest.get("format") != FORMAT:
        raise CheckpointError("corrupt checkpoint: bad format tag")
    if manifest.get("version") != VERSION:
        raise CheckpointError(f"version mismatch: file has {manifest.get('version')}, expected {VERSION}")
    payload = raw[nl + 1:]
    if len(payload) != manifest.get("payload_bytes"):
        raise CheckpointError("corrupt checkpoint: payload length does not match manifest")
    config = ModelConfig.from_dict(manifest["config"])
    params = {}
    for entry in manifest["tensors"]:
        start, n = entry["offset"], entry["nbytes"]
        shape = tuple(entry["shape"])
        if start + n > len(payload) or n != 8 * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"corrupt checkpoint: bad extent for {entry['name']}")
        params[entry["name"]] = np.frombuffer(payload[start:start + n], dtype="<f8").reshape(shape).astype(np.float64)
    _check_shapes(config, params)
    return Checkpoint(config, params, manifest["seed"], manifest["epoch"], manifest["val_metric"],
                      manifest.get("extra", {}))
