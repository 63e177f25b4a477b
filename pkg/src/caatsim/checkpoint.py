"""Checkpoint serialization: one binary file per tensor plus a text manifest.

Tensor record layout (all integers little-endian):

    magic   5 bytes  b"CAAT1"
    version u8       1
    namelen u32      length of the UTF-8 tensor name
    name    bytes
    ndim    u32
    extents ndim * u64
    data    float64 little-endian, row-major

The manifest is UTF-8 ``key=value`` lines carrying the resolved config,
the step counter and the seed. Batches are regenerated from
(seed, step), so no mutable generator state needs to be stored: a
loaded checkpoint resumes training bit-for-bit.
"""

from __future__ import annotations

import os
import struct
from dataclasses import fields

import numpy as np

from caatsim.model import CaatModel
from caatsim.optim import AdamWState
from caatsim.training import TrainConfig

__all__ = ["CheckpointError", "save_checkpoint", "load_checkpoint", "write_tensor", "read_tensor"]

MAGIC = b"CAAT1"
VERSION = 1


class CheckpointError(ValueError):
    """Checkpoint file is malformed or inconsistent."""


def write_tensor(path: str, name: str, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    name_bytes = name.encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<B", VERSION))
        f.write(struct.pack("<I", len(name_bytes)))
        f.write(name_bytes)
        f.write(struct.pack("<I", arr.ndim))
        for extent in arr.shape:
            f.write(struct.pack("<Q", extent))
        f.write(arr.astype("<f8").tobytes())


def read_tensor(path: str) -> tuple[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise CheckpointError(f"{path}: truncated record")
        piece = blob[off : off + n]
        off += n
        return piece

    if take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    version = struct.unpack("<B", take(1))[0]
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    namelen = struct.unpack("<I", take(4))[0]
    name = take(namelen).decode("utf-8")
    ndim = struct.unpack("<I", take(4))[0]
    shape = tuple(struct.unpack("<Q", take(8))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    payload = take(count * 8)
    if off != len(blob):
        raise CheckpointError(f"{path}: trailing bytes after payload")
    arr = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
    return name, arr


def _tensor_filename(name: str) -> str:
    return name + ".tsr"


def save_checkpoint(
    model: CaatModel, opt_state: AdamWState, step: int, config: TrainConfig, path: str
) -> None:
    os.makedirs(path, exist_ok=True)
    params = model.params()
    for name, arr in params.items():
        write_tensor(os.path.join(path, _tensor_filename(name)), name, arr)
    for name, arr in opt_state.exp_avg.items():
        full = f"opt.m.{name}"
        write_tensor(os.path.join(path, _tensor_filename(full)), full, arr)
    for name, arr in opt_state.exp_avg_sq.items():
        full = f"opt.v.{name}"
        write_tensor(os.path.join(path, _tensor_filename(full)), full, arr)
    lines = [f"format_version={VERSION}", f"step={step}", f"opt_step={opt_state.step}"]
    for f_ in fields(TrainConfig):
        lines.append(f"{f_.name}={getattr(config, f_.name)!r}")
    with open(os.path.join(path, "manifest.txt"), "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def load_checkpoint(path: str) -> tuple[CaatModel, AdamWState, int, TrainConfig]:
    manifest_path = os.path.join(path, "manifest.txt")
    if not os.path.exists(manifest_path):
        raise CheckpointError(f"{path}: no manifest.txt")
    entries = {}
    with open(manifest_path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                key, _, value = line.partition("=")
                entries[key] = value
    if entries.get("format_version") != str(VERSION):
        raise CheckpointError(f"{path}: unsupported manifest version")
    kwargs = {}
    for f_ in fields(TrainConfig):
        raw = entries[f_.name]
        kwargs[f_.name] = _parse_literal(raw)
    config = TrainConfig(**kwargs)
    step = int(entries["step"])
    model = config.build_model()
    params = model.params()
    opt_state = AdamWState.for_params(params)
    opt_state.step = int(entries["opt_step"])
    for name in params:
        fname = os.path.join(path, _tensor_filename(name))
        stored_name, arr = read_tensor(fname)
        if stored_name != name:
            raise CheckpointError(f"{fname}: holds {stored_name!r}, expected {name!r}")
        model.set_param(name, arr)
        m_name, m_arr = read_tensor(os.path.join(path, _tensor_filename(f"opt.m.{name}")))
        v_name, v_arr = read_tensor(os.path.join(path, _tensor_filename(f"opt.v.{name}")))
        if m_arr.shape != arr.shape or v_arr.shape != arr.shape:
            raise CheckpointError(f"{path}: optimizer state extent mismatch for {name}")
        opt_state.exp_avg[name] = m_arr
        opt_state.exp_avg_sq[name] = v_arr
    return model, opt_state, step, config


def _parse_literal(raw: str):
    if raw == "None":
        return None
    if raw == "True":
        return True
    if raw == "False":
        return False
    if raw.startswith("'") and raw.endswith("'"):
        return raw[1:-1]
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        pass
    return raw
