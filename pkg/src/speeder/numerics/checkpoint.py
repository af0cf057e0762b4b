"""Single-file binary container for named arrays plus a metadata record.

Layout (all integers little-endian):

    bytes 0..7    magic ``SPDRBIN1``
    bytes 8..15   uint64 header length H
    bytes 16..16+H-1   UTF-8 JSON header
    remainder     raw array payload, C-order, little-endian scalars

The JSON header holds ``{"meta": {...}, "tensors": [...]}`` where each tensor
entry records name, dtype (numpy little-endian string such as ``<f8``), shape,
byte offset into the payload, and byte length. Round-trips are bit-exact.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MAGIC = b"SPDRBIN1"


class CheckpointError(RuntimeError):
    pass


def _little_endian(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    if arr.dtype.byteorder == ">":
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    return arr


def save_container(path, arrays: dict[str, np.ndarray], meta: dict | None = None):
    """Write arrays + metadata to ``path`` in the documented layout."""
    path = Path(path)
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = _little_endian(np.asarray(arrays[name]))
        raw = arr.tobytes(order="C")
        entries.append(
            {
                "name": name,
                "dtype": arr.dtype.str,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta or {}, "tensors": entries}).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(len(header).to_bytes(8, "little"))
        f.write(header)
        for raw in blobs:
            f.write(raw)


def load_container(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read back (arrays, meta); inverse of :func:`save_container`."""
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        (hlen,) = (int.from_bytes(f.read(8), "little"),)
        header = json.loads(f.read(hlen).decode("utf-8"))
        payload = f.read()
    arrays = {}
    for ent in header["tensors"]:
        raw = payload[ent["offset"] : ent["offset"] + ent["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(ent["dtype"]))
        arrays[ent["name"]] = arr.reshape(ent["shape"]).copy()
    return arrays, header["meta"]
