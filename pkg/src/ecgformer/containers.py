"""Single-file container: JSON manifest followed by raw little-endian blobs.

Layout::

    magic      8 bytes   b"ECGFMR01"
    length     u64 LE    byte length of the manifest
    manifest   UTF-8 JSON {"meta": {...}, "tensors": [{name, dtype, shape, offset, nbytes}]}
    blobs      concatenated tensor bytes; offsets are relative to the blob start

dtypes are numpy little-endian codes ("<f4", "<i1", "<i4", "<i2", "<i8").
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = b"ECGFMR01"
_ALLOWED = {"<f4", "<f8", "<i1", "<i2", "<i4", "<i8", "|i1", "|u1", "<u2"}


def write_container(path: str | Path, meta: dict[str, Any], tensors: dict[str, np.ndarray]) -> None:
    entries, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        arr = arr.astype(dt, copy=False)
        code = dt.str
        if code not in _ALLOWED:
            raise TypeError(f"unsupported dtype {code} for {name}")
        data = arr.tobytes()
        entries.append({"name": name, "dtype": code, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    manifest = json.dumps({"meta": meta, "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for b in blobs:
            fh.write(b)


def read_container(path: str | Path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not an ecgformer container")
    (n,) = struct.unpack("<Q", raw[8:16])
    manifest = json.loads(raw[16 : 16 + n])
    base = 16 + n
    tensors = {}
    for e in manifest["tensors"]:
        start = base + e["offset"]
        buf = raw[start : start + e["nbytes"]]
        if len(buf) != e["nbytes"]:
            raise ValueError(f"{path}: truncated tensor {e['name']}")
        tensors[e["name"]] = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return manifest["meta"], tensors


def config_hash(obj: Any) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
