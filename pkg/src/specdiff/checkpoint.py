"""Flat JSON-header + float64-blob container used for checkpoints and datasets.

Layout::

    b"SPECDIF1"                  8-byte magic
    uint64 little-endian         byte length of the JSON header
    JSON header (UTF-8)          user metadata plus an "arrays" table
    float64 little-endian blob   arrays concatenated in table order

Each ``arrays`` entry is ``{"name", "shape", "offset"}`` with ``offset``
counted in float64 elements from the start of the blob.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SPECDIF1"


def save_container(path, header: dict, arrays: dict) -> Path:
    path = Path(path)
    table = []
    chunks = []
    off = 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        table.append({"name": name, "shape": list(a.shape), "offset": off})
        chunks.append(a.ravel())
        off += a.size
    meta = dict(header)
    meta["arrays"] = table
    raw = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f8")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(raw)))
            fh.write(raw)
            fh.write(blob.astype("<f8").tobytes())
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path


def load_container(path):
    """Return ``(header, arrays)``; the ``arrays`` table is removed from the header."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc
    if data[:8] != MAGIC:
        raise ValueError(f"{path} is not a specdiff container")
    (n,) = struct.unpack("<Q", data[8:16])
    meta = json.loads(data[16:16 + n].decode("utf-8"))
    blob = np.frombuffer(data, dtype="<f8", offset=16 + n)
    arrays = {}
    for entry in meta.pop("arrays"):
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arrays[entry["name"]] = (
            blob[entry["offset"]:entry["offset"] + size].reshape(entry["shape"]).astype(np.float64)
        )
    return meta, arrays
