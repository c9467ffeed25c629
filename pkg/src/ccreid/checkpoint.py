"""Versioned binary container for named arrays plus a JSON header.

Layout: 4-byte magic, u32 format version, u64 header length, canonical JSON
header (sorted keys), then the raw little-endian array payload in sorted
name order. Serialization is fully canonical, so saving the result of a
load reproduces the input byte for byte.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"CCRK"
FORMAT_VERSION = 1
_DTYPES = {"float64": "<f8", "int64": "<i8"}


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    entries = []
    payload = bytearray()
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        if arr.dtype.name not in _DTYPES:
            raise ValueError(f"unsupported dtype {arr.dtype} for array {name!r}")
        entries.append({"name": name, "dtype": arr.dtype.name,
                        "shape": list(arr.shape)})
        payload += arr.astype(_DTYPES[arr.dtype.name]).tobytes(order="C")
    header = json.dumps({"arrays": entries, "meta": meta},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        f.write(payload)


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a checkpoint container "
                             f"(magic {magic!r})")
        version, = struct.unpack("<I", f.read(4))
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported container version {version}")
        header_len, = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(header_len).decode("utf-8"))
        arrays = {}
        for entry in header["arrays"]:
            dt = np.dtype(_DTYPES[entry["dtype"]])
            count = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
            buf = f.read(count * dt.itemsize)
            arrays[entry["name"]] = np.frombuffer(buf, dtype=dt).reshape(
                entry["shape"]).copy()
    return arrays, header["meta"]
