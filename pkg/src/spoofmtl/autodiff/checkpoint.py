"""Checkpoint container.

Layout (all integers little-endian)::

    bytes 0..7    magic b"SPMTLCK1"
    bytes 8..11   uint32 header length H
    next H bytes  UTF-8 JSON header, keys sorted:
                  {"meta": {...}, "tensors": [{"name", "shape", "offset", "count"}, ...]}
    remainder     concatenated tensor payloads, float32 little-endian, row-major;
                  ``offset``/``count`` are in elements from the start of the payload

The same inputs always serialise to the same bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"SPMTLCK1"


def config_hash(config: Mapping[str, Any]) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], meta: Mapping[str, Any]) -> None:
    entries = []
    chunks = []
    offset = 0
    for name in tensors:
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.size
    header = json.dumps({"meta": dict(meta), "tensors": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    payload = np.frombuffer(raw, dtype="<f4", offset=12 + hlen)
    tensors = {}
    for e in header["tensors"]:
        chunk = payload[e["offset"]:e["offset"] + e["count"]]
        if chunk.size != e["count"]:
            raise ValueError(f"{path}: truncated payload for {e['name']}")
        tensors[e["name"]] = chunk.astype(np.float32).reshape(e["shape"])
    return tensors, header["meta"]
