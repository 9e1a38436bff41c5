"""Checkpoint container.

Layout::

    b"MTTRCKPT"  | u32 version | u64 header length | JSON header | float32 LE payload

The header lists every tensor (name, shape, dtype, byte offset, byte count)
and carries the training config snapshot, the seed, and free-form metadata.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .errors import FormatError, StateError

MAGIC = b"MTTRCKPT"
VERSION = 1


def save_checkpoint(path: str | Path, tensors: dict[str, torch.Tensor], config: dict | None = None,
                    seed: int | None = None, meta: dict | None = None) -> Path:
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = tensors[name].detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4", copy=False)
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32", "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"tensors": entries, "config": config or {}, "seed": seed, "meta": meta or {}}, sort_keys=True
    ).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC + struct.pack("<IQ", VERSION, len(header)) + header)
        for c in chunks:
            f.write(c)
    return path


def load_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    """Returns (tensors, header) where header has 'config', 'seed' and 'meta'."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[20 : 20 + hlen])
    base = 20 + hlen
    tensors = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        buf = data[start : start + e["nbytes"]]
        if len(buf) != e["nbytes"]:
            raise FormatError(f"{path}: truncated payload for {e['name']}")
        arr = np.frombuffer(buf, dtype="<f4").reshape(e["shape"]).copy()
        tensors[e["name"]] = torch.from_numpy(arr)
    return tensors, header


def content_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def module_tensors(module: nn.Module, prefix: str) -> dict[str, torch.Tensor]:
    return {f"{prefix}.{k}": v for k, v in module.state_dict().items()}


def load_module(module: nn.Module, tensors: dict[str, torch.Tensor], prefix: str) -> None:
    """Copy ``prefix.*`` tensors into ``module``, validating names and shapes."""
    own = module.state_dict()
    found = {k[len(prefix) + 1 :]: v for k, v in tensors.items() if k.startswith(prefix + ".")}
    missing = sorted(set(own) - set(found))
    unexpected = sorted(set(found) - set(own))
    if missing or unexpected:
        raise StateError(f"checkpoint/model mismatch under {prefix!r}: missing={missing[:5]} unexpected={unexpected[:5]}")
    for k, v in found.items():
        if tuple(own[k].shape) != tuple(v.shape):
            raise StateError(f"{prefix}.{k}: checkpoint shape {tuple(v.shape)} != model shape {tuple(own[k].shape)}")
    with torch.no_grad():
        for k, v in found.items():
            own[k].copy_(v.to(own[k].dtype))


def optimizer_tensors(opt: torch.optim.Optimizer, names: dict[int, str]) -> dict[str, torch.Tensor]:
    """Adam-style state keyed by parameter name (``names`` maps id(param) -> name)."""
    out = {}
    for group in opt.param_groups:
        for p in group["params"]:
            for key, val in opt.state.get(p, {}).items():
                out[f"optim.{names[id(p)]}.{key}"] = torch.as_tensor(val, dtype=torch.float32)
    return out


def load_optimizer(opt: torch.optim.Optimizer, tensors: dict[str, torch.Tensor], names: dict[int, str]) -> None:
    for group in opt.param_groups:
        for p in group["params"]:
            prefix = f"optim.{names[id(p)]}."
            state = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
            if not state:
                continue
            for key, val in state.items():
                if key != "step" and tuple(val.shape) != tuple(p.shape):
                    raise StateError(f"optimizer state {prefix}{key} has shape {tuple(val.shape)}, expected {tuple(p.shape)}")
            opt.state[p] = {k: (v.clone().reshape(()) if k == "step" else v.clone().to(p.dtype)) for k, v in state.items()}
