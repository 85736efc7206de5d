"""Binary checkpoint format.

Layout (little-endian)::

    b"HGVT" | u32 version | u32 n | n bytes of UTF-8 config JSON | u32 tensor count
    per tensor: u16 name length | name | u8 ndim | ndim x u32 dims | f64 data

Tensors are written in ``state_dict`` order.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig

MAGIC = b"HGVT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, model: torch.nn.Module, config: ModelConfig, extra: dict | None = None) -> None:
    meta = {"model": config.to_dict(), "extra": extra or {}}
    blob = json.dumps(meta, sort_keys=True).encode()
    state = model.state_dict()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(state)))
    for name, t in state.items():
        raw = name.encode()
        arr = np.ascontiguousarray(t.detach().cpu().to(torch.float64).numpy(), dtype="<f8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_checkpoint(path: str | Path) -> tuple[ModelConfig, dict[str, torch.Tensor], dict]:
    data = Path(path).read_bytes()
    view = memoryview(data)
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {bytes(data[:4])!r}")
    pos = 4

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    version, n_json = take("<II")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    meta = json.loads(bytes(view[pos : pos + n_json]))
    pos += n_json
    (count,) = take("<I")
    tensors: dict[str, torch.Tensor] = {}
    for _ in range(count):
        (n_name,) = take("<H")
        name = bytes(view[pos : pos + n_name]).decode()
        pos += n_name
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I") if ndim else ()
        n = int(np.prod(shape)) if shape else 1
        if pos + 8 * n > len(data):
            raise CheckpointError(f"{path}: truncated tensor {name!r}")
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape)
        pos += 8 * n
        tensors[name] = torch.from_numpy(arr.copy())
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return ModelConfig.from_dict(meta["model"]), tensors, meta.get("extra", {})


def load_model(path: str | Path):
    """Rebuild the model described by a checkpoint and load its weights."""
    from .model import HgVT

    cfg, tensors, _ = read_checkpoint(path)
    model = HgVT(cfg, seed=None)
    ref = model.state_dict()
    for name, t in tensors.items():
        if name in ref:
            tensors[name] = t.to(ref[name].dtype)  # integer buffers (BN counters) round-trip exactly
    model.load_state_dict(tensors)
    model.eval()
    return model
