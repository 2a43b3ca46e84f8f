"""Self-describing container: a JSON header followed by little-endian float64 arrays.

Layout: 8-byte magic, uint64 header length, UTF-8 JSON header, then the raw
array blocks in header order.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"NLABv001"


def dump(path: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    entries = []
    blobs = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
        entries.append({"name": name, "shape": list(a.shape)})
        blobs.append(a.tobytes())
    header = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise ValueError(f"{path}: not a container file")
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n))
        arrays = {}
        for e in header["arrays"]:
            count = int(np.prod(e["shape"])) if e["shape"] else 1
            buf = fh.read(8 * count)
            arrays[e["name"]] = np.frombuffer(buf, dtype="<f8").reshape(e["shape"]).copy()
    return header["meta"], arrays
