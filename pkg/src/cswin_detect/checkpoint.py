"""Self-describing checkpoint container.

Layout::

    b"CSWCKPT1" | uint64 LE manifest length | manifest JSON | float32 LE payload

The manifest lists every tensor as ``{name, shape, offset}`` (offset in
float32 elements) in insertion order, plus ``config``, ``seed`` and any extra
JSON-serializable metadata.
"""
from __future__ import annotations

import json
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"CSWCKPT1"


class CheckpointError(ValueError):
    pass


class ArchitectureMismatch(CheckpointError):
    """Checkpoint tensors do not fit the target module."""

    def __init__(self, missing, unexpected, mismatched):
        self.missing = list(missing)
        self.unexpected = list(unexpected)
        self.mismatched = list(mismatched)
        parts = []
        if self.missing:
            parts.append(f"missing from checkpoint: {', '.join(self.missing)}")
        if self.unexpected:
            parts.append(f"not in model: {', '.join(self.unexpected)}")
        if self.mismatched:
            parts.append("shape differs: " + ", ".join(f"{n} {a} vs {b}" for n, a, b in self.mismatched))
        super().__init__("architecture mismatch; " + "; ".join(parts))

    @property
    def layer_names(self) -> list[str]:
        return self.missing + self.unexpected + [m[0] for m in self.mismatched]


@dataclass
class Checkpoint:
    tensors: "OrderedDict[str, np.ndarray]"
    config: dict = field(default_factory=dict)
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def state_dict(self, prefix: str = "") -> "OrderedDict[str, torch.Tensor]":
        """Tensors under ``prefix`` with the prefix stripped."""
        return OrderedDict(
            (k[len(prefix):], torch.from_numpy(v.copy()))
            for k, v in self.tensors.items() if k.startswith(prefix)
        )


def _manifest_bytes(tensors, config, seed, extra) -> bytes:
    entries, offset = [], 0
    for name, arr in tensors.items():
        entries.append({"name": name, "offset": offset, "shape": list(arr.shape)})
        offset += int(arr.size)
    manifest = {"config": config, "extra": extra, "format": 1, "seed": int(seed), "tensors": entries}
    return json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()


def to_numpy_tensors(state) -> "OrderedDict[str, np.ndarray]":
    out = OrderedDict()
    for k, v in state.items():
        if isinstance(v, torch.Tensor):
            v = v.detach().cpu().numpy()
        out[k] = np.ascontiguousarray(v, dtype=np.float32)
    return out


def save_checkpoint(path, tensors, config=None, seed: int = 0, extra=None) -> Path:
    """Write a checkpoint. ``tensors`` is an ordered name -> array/tensor map."""
    tensors = to_numpy_tensors(tensors)
    manifest = _manifest_bytes(tensors, config or {}, seed, extra or {})
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for arr in tensors.values():
            fh.write(arr.astype("<f4", copy=False).tobytes(order="C"))
    return path


def save(path, ckpt: Checkpoint) -> Path:
    return save_checkpoint(path, ckpt.tensors, ckpt.config, ckpt.seed, ckpt.extra)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (n,) = struct.unpack("<Q", raw[8:16])
    try:
        manifest = json.loads(raw[16:16 + n])
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: unreadable manifest ({e})") from e
    payload = np.frombuffer(raw, dtype="<f4", offset=16 + n)
    tensors = OrderedDict()
    for e in manifest["tensors"]:
        size = math.prod(e["shape"])
        if e["offset"] + size > payload.size:
            raise CheckpointError(f"{path}: payload truncated at tensor {e['name']}")
        tensors[e["name"]] = payload[e["offset"]:e["offset"] + size].reshape(e["shape"]).astype(np.float32)
    return Checkpoint(tensors, manifest.get("config", {}), manifest.get("seed", 0), manifest.get("extra", {}))


def check_compatible(module: torch.nn.Module, state) -> None:
    """Raise :class:`ArchitectureMismatch` unless ``state`` fits ``module`` exactly."""
    own = module.state_dict()
    missing = [k for k in own if k not in state]
    unexpected = [k for k in state if k not in own]
    mismatched = [
        (k, tuple(own[k].shape), tuple(state[k].shape))
        for k in own if k in state and tuple(own[k].shape) != tuple(state[k].shape)
    ]
    if missing or unexpected or mismatched:
        raise ArchitectureMismatch(missing, unexpected, mismatched)


def load_into(module: torch.nn.Module, state) -> None:
    check_compatible(module, state)
    with torch.no_grad():
        own = module.state_dict()
        for k, v in state.items():
            own[k].copy_(torch.as_tensor(v, dtype=own[k].dtype))
