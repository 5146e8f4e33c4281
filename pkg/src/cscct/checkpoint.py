"""Binary phase checkpoints.

Layout (all integers little-endian)::

    magic      8 bytes   b"CSCCTCKP"
    version    uint32    currently 1
    hdr_len    uint64    length of the JSON header in bytes
    header     hdr_len   UTF-8 JSON (see ``Checkpoint.header``)
    payload    ...       float64 little-endian arrays, C order, at the offsets
                         listed in header["arrays"] (relative to payload start)
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from cscct.memory import ExemplarMemory
from cscct.model import Model, ModelConfig

MAGIC = b"CSCCTCKP"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    phase: int
    config_hash: str
    model_config: dict
    arrays: dict[str, np.ndarray]
    memory_budget: int
    memory_store: dict[int, list[int]]
    class_order: list[int]  # stream label i <- source class class_order[i]
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_learner(cls, learner, stream, phase: int, config, scaler=None) -> "Checkpoint":
        arrays = {f"model.{k}": v for k, v in learner.model.named_arrays().items()}
        if scaler is not None:
            arrays["scaler.mean"] = scaler.mean
            arrays["scaler.std"] = scaler.std
        mc = learner.model.config
        return cls(
            phase=phase,
            config_hash=config.hash(),
            model_config={"input_dim": mc.input_dim, "hidden": list(mc.hidden), "feature_dim": mc.feature_dim,
                          "feature_relu": mc.feature_relu},
            arrays=arrays,
            memory_budget=learner.memory.per_class_budget,
            memory_store={c: list(v) for c, v in learner.memory.store.items()},
            class_order=list(stream.class_order),
            extra={"method": config.method},
        )

    def model(self) -> Model:
        mc = dict(self.model_config)
        mc["hidden"] = tuple(mc["hidden"])
        arrays = {k[len("model."):]: v for k, v in self.arrays.items() if k.startswith("model.")}
        return Model.from_arrays(ModelConfig(**mc), arrays)

    def memory(self) -> ExemplarMemory:
        return ExemplarMemory(self.memory_budget, {c: list(v) for c, v in self.memory_store.items()})

    def standardize(self, x: np.ndarray) -> np.ndarray:
        if "scaler.mean" not in self.arrays:
            return x
        return (x - self.arrays["scaler.mean"]) / self.arrays["scaler.std"]


def save(path, ck: Checkpoint) -> Path:
    entries, blobs, offset = [], [], 0
    for name in sorted(ck.arrays):
        arr = np.ascontiguousarray(ck.arrays[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes(order="C"))
        offset += arr.nbytes
    header = {
        "phase": ck.phase,
        "config_hash": ck.config_hash,
        "model_config": ck.model_config,
        "memory": {"per_class_budget": ck.memory_budget,
                   "store": {str(c): v for c, v in sorted(ck.memory_store.items())}},
        "class_order": ck.class_order,
        "arrays": entries,
        "extra": ck.extra,
    }
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(raw)))
        fh.write(raw)
        for b in blobs:
            fh.write(b)
    return path


def load(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if len(blob) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated file")
    magic, version, hdr_len = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = _PREFIX.size + hdr_len
    header = json.loads(blob[_PREFIX.size:start].decode("utf-8"))
    arrays = {}
    for e in header["arrays"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        lo = start + e["offset"]
        hi = lo + 8 * count
        if hi > len(blob):
            raise CheckpointError(f"{path}: array {e['name']} runs past end of file")
        arrays[e["name"]] = np.frombuffer(blob[lo:hi], dtype="<f8").reshape(e["shape"]).astype(np.float64)
    mem = header["memory"]
    return Checkpoint(
        phase=header["phase"],
        config_hash=header["config_hash"],
        model_config=header["model_config"],
        arrays=arrays,
        memory_budget=mem["per_class_budget"],
        memory_store={int(c): v for c, v in mem["store"].items()},
        class_order=header["class_order"],
        extra=header.get("extra", {}),
    )
