"""Parameter checkpoint container.

Layout (all integers little-endian)::

    magic        8 bytes   b"SKAECKPT"
    version      u32       FORMAT_VERSION
    header_len   u64
    header       UTF-8 JSON, keys sorted:
                   {"arrays": [{"group", "name", "shape", "offset"}, ...],
                    "meta": {...}}
    payload      concatenated little-endian float64 arrays; ``offset`` is the
                 byte offset of each array inside the payload

Groups used by the trainer are ``params``, ``buffers``, ``adam.m`` and
``adam.v``; Adam hyperparameters and step counters live in ``meta["adam"]``.
Arrays stored in float32 are widened to float64, which is exact, and narrowed
back on load when the caller asks for it.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import Dict, Mapping, Tuple

import numpy as np

from .optim import AdamState

MAGIC = b"SKAECKPT"
FORMAT_VERSION = 1

Groups = Dict[str, Dict[str, np.ndarray]]


class CheckpointError(ValueError):
    pass


def dumps(groups: Mapping[str, Mapping[str, np.ndarray]], meta: Mapping = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for group in sorted(groups):
        for name in sorted(groups[group]):
            arr = np.ascontiguousarray(groups[group][name], dtype="<f8")
            entries.append({"group": group, "name": name, "shape": list(arr.shape), "offset": offset})
            raw = arr.tobytes()
            chunks.append(raw)
            offset += len(raw)
    header = json.dumps({"arrays": entries, "meta": dict(meta or {})}, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
    buf.write(header)
    for c in chunks:
        buf.write(c)
    return buf.getvalue()


def loads(data: bytes) -> Tuple[Groups, dict]:
    if data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack_from("<IQ", data, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = 8 + 12
    header = json.loads(data[start : start + hlen].decode("utf-8"))
    payload = memoryview(data)[start + hlen :]
    groups: Groups = {}
    for e in header["arrays"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        end = e["offset"] + 8 * count
        if end > len(payload):
            raise CheckpointError(f"truncated payload for {e['group']}/{e['name']}")
        arr = np.frombuffer(payload[e["offset"] : end], dtype="<f8").reshape(e["shape"])
        groups.setdefault(e["group"], {})[e["name"]] = arr.astype(np.float64)
    return groups, header["meta"]


def save(path, groups, meta=None) -> None:
    Path(path).write_bytes(dumps(groups, meta))


def load(path) -> Tuple[Groups, dict]:
    return loads(Path(path).read_bytes())


def adam_to_record(state: AdamState) -> Tuple[Groups, dict]:
    groups = {"adam.m": dict(state.m), "adam.v": dict(state.v)}
    meta = {
        "lr": state.lr,
        "beta1": state.beta1,
        "beta2": state.beta2,
        "eps": state.eps,
        "t": dict(state.t),
        "steps": state.steps,
    }
    return groups, meta


def adam_from_record(groups: Groups, meta: Mapping, dtype=np.float64) -> AdamState:
    state = AdamState(meta["lr"], meta["beta1"], meta["beta2"], meta["eps"])
    state.m = {k: v.astype(dtype) for k, v in groups.get("adam.m", {}).items()}
    state.v = {k: v.astype(dtype) for k, v in groups.get("adam.v", {}).items()}
    state.t = {k: int(v) for k, v in meta["t"].items()}
    state.steps = int(meta["steps"])
    return state
