"""Flat named-array checkpoint files.

Layout: an 8-byte little-endian header length, a JSON header mapping each
array name to its shape and byte offset within the payload, then the raw
float64 buffers back to back.  Round-trips are byte-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

_MAGIC = b"PSCK"


def save_arrays(path, named: dict[str, np.ndarray]) -> None:
    entries = []
    offset = 0
    payload = []
    for name, arr in named.items():
        buf = np.ascontiguousarray(arr, dtype=np.float64).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        payload.append(buf)
        offset += len(buf)
    header = json.dumps({"format": "promptseg-flat-v1", "arrays": entries}).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for buf in payload:
            f.write(buf)


def load_arrays(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path} is not a promptseg checkpoint")
    (hlen,) = struct.unpack("<Q", raw[4:12])
    header = json.loads(raw[12 : 12 + hlen])
    base = 12 + hlen
    out: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = base + entry["offset"]
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=start)
        out[entry["name"]] = arr.reshape(shape).copy()
    return out
