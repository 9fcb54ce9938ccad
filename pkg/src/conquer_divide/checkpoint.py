"""Checkpoint store: JSON header plus named float32 tensor payload.

Layout: magic "CDCK", u32 header length, UTF-8 header JSON, then raw
little-endian float32 tensor data.  The header carries stage, epoch, config
snapshot and hash, RNG state, metric history, and a tensor directory of
(name, shape, offset) with offsets relative to the data section.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"CDCK"


@dataclass
class Checkpoint:
    stage: str
    epoch: int
    config: dict
    tensors: dict[str, np.ndarray]
    rng_state: dict[str, str] = field(default_factory=dict)
    metric_history: list[dict] = field(default_factory=list)
    active_experts: int = 1
    uniform_gate: bool = False
    best_metric: float | None = None

    @property
    def config_hash(self) -> str:
        canonical = json.dumps(self.config, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def model_tensors(self) -> dict[str, np.ndarray]:
        prefix = "model."
        return {k[len(prefix) :]: v for k, v in self.tensors.items() if k.startswith(prefix)}

    def optimizer_tensors(self) -> dict[str, np.ndarray]:
        prefix = "optim."
        return {k[len(prefix) :]: v for k, v in self.tensors.items() if k.startswith(prefix)}


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    directory = []
    offset = 0
    names = sorted(ckpt.tensors)
    for name in names:
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
    header = {
        "stage": ckpt.stage,
        "epoch": ckpt.epoch,
        "config_hash": ckpt.config_hash,
        "config": ckpt.config,
        "rng_state": ckpt.rng_state,
        "metric_history": ckpt.metric_history,
        "active_experts": ckpt.active_experts,
        "uniform_gate": ckpt.uniform_gate,
        "best_metric": ckpt.best_metric,
        "tensors": directory,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name in names:
            fh.write(np.ascontiguousarray(ckpt.tensors[name], dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> Checkpoint:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic)")
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        data = fh.read()
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=start).reshape(shape).copy()
        tensors[entry["name"]] = arr
    ckpt = Checkpoint(
        stage=header["stage"],
        epoch=header["epoch"],
        config=header["config"],
        tensors=tensors,
        rng_state=header.get("rng_state", {}),
        metric_history=header.get("metric_history", []),
        active_experts=header.get("active_experts", 1),
        uniform_gate=header.get("uniform_gate", False),
        best_metric=header.get("best_metric"),
    )
    if header.get("config_hash") and header["config_hash"] != ckpt.config_hash:
        raise ValueError(f"{path}: config hash mismatch")
    return ckpt
