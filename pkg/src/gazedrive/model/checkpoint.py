"""GPCK checkpoint files and the loss-curve log.

Layout (little-endian): b"GPCK", u32 version, then until end of file one
record per tensor: u32 name length, UTF-8 name, u32 rank, rank x u32 shape,
float64 values in row-major order.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

MAGIC = b"GPCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_tensors(path, tensors) -> None:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for name, value in tensors.items():
        arr = np.array(torch.as_tensor(value).detach().cpu().numpy(), dtype="<f8", order="C")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_tensors(path) -> "OrderedDict[str, np.ndarray]":
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 8:
        raise CheckpointError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    out = OrderedDict()
    pos = 8

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated record at offset {pos}")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    while pos < len(data):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).copy()
        if name in out:
            raise CheckpointError(f"{path}: duplicate tensor {name!r}")
        out[name] = values
    return out


def save_model(path, model: torch.nn.Module) -> None:
    save_tensors(path, model.state_dict())


def load_model(path, model: torch.nn.Module) -> torch.nn.Module:
    tensors = load_tensors(path)
    state = model.state_dict()
    if set(tensors) != set(state):
        missing, extra = set(state) - set(tensors), set(tensors) - set(state)
        raise CheckpointError(f"{path}: tensor names differ (missing {sorted(missing)}, unexpected {sorted(extra)})")
    for name, ref in state.items():
        if tuple(tensors[name].shape) != tuple(ref.shape):
            raise CheckpointError(f"{path}: shape mismatch for {name}")
    model.load_state_dict({k: torch.as_tensor(v, dtype=state[k].dtype) for k, v in tensors.items()})
    return model


def write_loss_log(path, losses, split: str = "train", mode: str = "w") -> None:
    with open(path, mode) as f:
        for step, loss in enumerate(losses):
            f.write(f"{step}\t{float(loss)!r}\t{split}\n")


def read_loss_log(path):
    rows = []
    for line in Path(path).read_text().splitlines():
        step, loss, split = line.split("\t")
        rows.append((int(step), float(loss), split))
    return rows
