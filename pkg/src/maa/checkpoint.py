"""Checkpoint files.

Layout: b"MAAC" | version u16 | header length u64 | header (key-sorted JSON,
utf-8) | raw little-endian tensor blobs in manifest order. The header holds the
resolved config, the model's input shape facts, training progress, and a
manifest of (name, shape, dtype, offset) entries. Optimizer moments are stored
as ``adamw.m/<param>`` and ``adamw.v/<param>`` tensors.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .errors import FormatError
from .model import MAAModel
from .optim import AdamWState

MAGIC = b"MAAC"
VERSION = 1


@dataclass
class Checkpoint:
    config: TrainConfig
    input_dims: dict[int, int]
    num_classes: int
    tensors: dict[str, np.ndarray]
    optimizer_step: int | None = None
    extra: dict = field(default_factory=dict)

    def build_model(self) -> MAAModel:
        model = MAAModel(self.config, self.input_dims, self.num_classes)
        model.load_state_dict({p.name: self.tensors[p.name] for p in model.params()})
        return model

    def optimizer_state(self) -> AdamWState | None:
        if self.optimizer_step is None:
            return None
        m = {k.split("/", 1)[1]: v.copy() for k, v in self.tensors.items() if k.startswith("adamw.m/")}
        v = {k.split("/", 1)[1]: v.copy() for k, v in self.tensors.items() if k.startswith("adamw.v/")}
        return AdamWState(m, v, self.optimizer_step)


def save_checkpoint(path, model: MAAModel, opt_state: AdamWState | None = None, extra: dict | None = None) -> None:
    dtype = np.dtype(model.dtype).newbyteorder("<")
    tensors = [(p.name, p.value) for p in model.params()]
    if opt_state is not None:
        for p in model.params():
            tensors.append((f"adamw.m/{p.name}", opt_state.m[p.name]))
            tensors.append((f"adamw.v/{p.name}", opt_state.v[p.name]))
    manifest, offset = [], 0
    for name, arr in tensors:
        nbytes = arr.size * dtype.itemsize
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": dtype.str, "offset": offset, "nbytes": nbytes})
        offset += nbytes
    header = {
        "format_version": VERSION,
        "config": model.config.to_dict(),
        "input_dims": {str(k): v for k, v in model.input_dims.items()},
        "num_classes": model.num_classes,
        "optimizer_step": None if opt_state is None else opt_state.t,
        "manifest": manifest,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = Path(f"{path}.tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HQ", VERSION, len(blob)))
        f.write(blob)
        for _, arr in tensors:
            f.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (magic {data[:4]!r})", 0)
    if len(data) < 14:
        raise FormatError(f"{path}: truncated checkpoint header", len(data))
    version, hlen = struct.unpack_from("<HQ", data, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}", 4)
    start = 14 + hlen
    if len(data) < start:
        raise FormatError(f"{path}: truncated checkpoint header", len(data))
    header = json.loads(data[14:start].decode("utf-8"))
    tensors = {}
    for entry in header["manifest"]:
        lo = start + entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(data):
            raise FormatError(f"{path}: truncated tensor {entry['name']}", len(data))
        arr = np.frombuffer(data[lo:hi], dtype=np.dtype(entry["dtype"]))
        tensors[entry["name"]] = arr.astype(arr.dtype.newbyteorder("=")).reshape(entry["shape"])
    return Checkpoint(
        TrainConfig.from_dict(header["config"]),
        {int(k): v for k, v in header["input_dims"].items()},
        header["num_classes"],
        tensors,
        header["optimizer_step"],
        header["extra"],
    )
