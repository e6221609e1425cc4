"""Deterministic binary tensor container.

Zip-based formats (npz) embed modification times, which breaks bit-identical
reruns. This container is a JSON header plus raw little-endian array bytes:
byte-for-byte reproducible for identical contents.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"RSSTBIN1"


def save_tensors(path: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named arrays plus a JSON metadata block."""
    entries = []
    blobs = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = json.dumps({"meta": meta or {}, "arrays": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read back (arrays, meta)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: not a tensor container (bad magic)")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        arrays: dict[str, np.ndarray] = {}
        for entry in header["arrays"]:
            dtype = np.dtype(entry["dtype"])
            count = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
            buf = fh.read(dtype.itemsize * count)
            arrays[entry["name"]] = np.frombuffer(buf, dtype=dtype).reshape(entry["shape"]).copy()
    return arrays, header["meta"]
