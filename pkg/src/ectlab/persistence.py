"""Checkpoint files: magic, manifest length, JSON manifest, contiguous tensor blob.

Byte layout::

    offset 0   8 bytes   magic b"ECTCKPT\\0"
    offset 8   8 bytes   manifest length L, unsigned little-endian
    offset 16  L bytes   manifest, UTF-8 JSON (sorted keys, no whitespace)
    offset 16+L          blob: tensors back to back, little-endian, in manifest order

Each manifest tensor entry gives ``name``, ``shape``, ``dtype`` ("<f4" or "<f8"),
``offset`` (bytes from blob start) and ``nbytes``.
"""

from __future__ import annotations

import base64
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .errors import CheckpointError

MAGIC = b"ECTCKPT\x00"
FORMAT_VERSION = 1
_DTYPES = {torch.float32: "<f4", torch.float64: "<f8"}
_TORCH_DTYPES = {v: k for k, v in _DTYPES.items()}


@dataclass
class Checkpoint:
    config: dict
    phase: str
    step: int
    total_steps: int
    params: dict[str, Tensor]
    rng_state: bytes
    optimizer: dict = field(default_factory=dict)  # hyperparameters + step
    opt_m: dict[str, Tensor] = field(default_factory=dict)
    opt_v: dict[str, Tensor] = field(default_factory=dict)
    ema: dict[str, Tensor] | None = None
    ema_decay: float | None = None
    meta: dict = field(default_factory=dict)

    @property
    def has_ema(self) -> bool:
        return self.ema is not None


def _groups(ckpt: Checkpoint):
    yield "params", ckpt.params
    if ckpt.opt_m:
        yield "opt_m", ckpt.opt_m
        yield "opt_v", ckpt.opt_v
    if ckpt.ema is not None:
        yield "ema", ckpt.ema


def encode(ckpt: Checkpoint) -> bytes:
    index = []
    chunks = []
    offset = 0
    for group, tensors in _groups(ckpt):
        for name, t in tensors.items():
            t = t.detach().cpu().contiguous()
            if t.dtype not in _DTYPES:
                raise CheckpointError(f"tensor {group}/{name}: unsupported dtype {t.dtype}")
            raw = t.numpy().astype(_DTYPES[t.dtype], copy=False).tobytes()
            index.append({"name": f"{group}/{name}", "shape": list(t.shape), "dtype": _DTYPES[t.dtype], "offset": offset, "nbytes": len(raw)})
            chunks.append(raw)
            offset += len(raw)
    manifest = {
        "format": "ectlab-checkpoint",
        "version": FORMAT_VERSION,
        "phase": ckpt.phase,
        "step": ckpt.step,
        "total_steps": ckpt.total_steps,
        "config": ckpt.config,
        "arch": ckpt.config.get("arch"),
        "schedule": ckpt.config.get("schedule"),
        "rng": {"torch": base64.b64encode(ckpt.rng_state).decode("ascii")},
        "optimizer": ckpt.optimizer,
        "ema": {"decay": ckpt.ema_decay} if ckpt.ema is not None else None,
        "meta": ckpt.meta,
        "tensors": index,
    }
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)


def decode(data: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(data) < 16 or data[:8] != MAGIC:
        raise CheckpointError(f"{source}: not an ectlab checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", data[8:16])
    if 16 + hlen > len(data):
        raise CheckpointError(f"{source}: manifest truncated")
    try:
        manifest = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{source}: corrupt manifest ({e})") from None
    if manifest.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {manifest.get('version')!r} (expected {FORMAT_VERSION})")
    blob = data[16 + hlen :]
    groups: dict[str, dict[str, Tensor]] = {"params": {}, "opt_m": {}, "opt_v": {}, "ema": {}}
    end = 0
    for entry in manifest["tensors"]:
        name = entry["name"]
        group, _, pname = name.partition("/")
        if group not in groups or entry["dtype"] not in _TORCH_DTYPES:
            raise CheckpointError(f"{source}: tensor {name}: unknown group or dtype")
        off, nbytes = entry["offset"], entry["nbytes"]
        if off < end or off + nbytes > len(blob):
            raise CheckpointError(f"{source}: tensor {name}: segment out of bounds or overlapping")
        arr = np.frombuffer(blob, dtype=entry["dtype"], count=nbytes // np.dtype(entry["dtype"]).itemsize, offset=off)
        if arr.size != int(np.prod(entry["shape"], dtype=np.int64)):
            raise CheckpointError(f"{source}: tensor {name}: size does not match shape {entry['shape']}")
        groups[group][pname] = torch.from_numpy(arr.reshape(entry["shape"]).astype(arr.dtype.newbyteorder("="))).clone()
        end = off + nbytes
    if end != len(blob):
        raise CheckpointError(f"{source}: {len(blob) - end} trailing bytes after last tensor")
    ema_info = manifest.get("ema")
    return Checkpoint(
        config=manifest["config"],
        phase=manifest["phase"],
        step=manifest["step"],
        total_steps=manifest["total_steps"],
        params=groups["params"],
        rng_state=base64.b64decode(manifest["rng"]["torch"]),
        optimizer=manifest.get("optimizer") or {},
        opt_m=groups["opt_m"],
        opt_v=groups["opt_v"],
        ema=groups["ema"] if ema_info is not None else None,
        ema_decay=ema_info["decay"] if ema_info is not None else None,
        meta=manifest.get("meta") or {},
    )


def save(ckpt: Checkpoint, path: str | Path) -> Path:
    """Write atomically: a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    payload = encode(ckpt)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(payload)
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as e:
        raise OSError(f"cannot write checkpoint {path}: {e}") from e
    return path


def load(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise OSError(f"cannot read checkpoint {path}: {e}") from e
    return decode(data, str(path))


def check_against_model(ckpt: Checkpoint, model: torch.nn.Module) -> None:
    """Raise naming the first missing, unexpected, or mis-shaped parameter tensor."""
    expected = dict(model.named_parameters())
    for group, tensors in (("params", ckpt.params), ("ema", ckpt.ema or {})):
        if group == "ema" and ckpt.ema is None:
            continue
        for name, p in expected.items():
            if name not in tensors:
                raise CheckpointError(f"checkpoint is missing tensor {group}/{name}")
            if tuple(tensors[name].shape) != tuple(p.shape):
                raise CheckpointError(f"tensor {group}/{name}: shape {tuple(tensors[name].shape)} does not match architecture {tuple(p.shape)}")
        for name in tensors:
            if name not in expected:
                raise CheckpointError(f"tensor {group}/{name} is not part of the configured architecture")
