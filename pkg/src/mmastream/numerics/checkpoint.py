"""Checkpoint container: b"MMA1" | u32 LE header length | UTF-8 JSON | raw f32 LE data."""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"MMA1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, config: Mapping, params: Mapping[str, np.ndarray]) -> None:
    manifest = [{"name": k, "shape": list(np.shape(v))} for k, v in params.items()]
    header = json.dumps({"config": dict(config), "params": manifest}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for v in params.values():
            fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 8:
        raise CheckpointError(f"{path}: truncated header")
    (n,) = struct.unpack("<I", raw[4:8])
    meta = json.loads(raw[8:8 + n].decode("utf-8"))
    offset = 8 + n
    params: dict[str, np.ndarray] = {}
    for entry in meta["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 4 * count
        if end > len(raw):
            raise CheckpointError(f"{path}: parameter data truncated at {entry['name']}")
        params[entry["name"]] = np.frombuffer(raw[offset:end], dtype="<f4").reshape(shape).astype(np.float32)
        offset = end
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return meta["config"], params
