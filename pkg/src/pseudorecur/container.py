"""Self-describing binary container shared by all trained artifacts.

Layout (little-endian)::

    magic      4 bytes  b"PRCA"
    version    uint32
    hdr_len    uint32
    header     hdr_len bytes of UTF-8 JSON:
                 {"kind": str, "meta": {...},
                  "arrays": [{"name", "dtype", "shape", "offset"}, ...]}
    payload    arrays back to back, row-major

Real-valued arrays are stored as ``<f4`` and integer arrays as ``<i4``.
Offsets are relative to the start of the payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"PRCA"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


class ContainerError(ValueError):
    pass


def _storage_dtype(a: np.ndarray) -> np.dtype:
    if np.issubdtype(a.dtype, np.integer) or a.dtype == np.bool_:
        return np.dtype("<i4")
    return np.dtype("<f4")


def save(path: Path | str, kind: str, arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> None:
    table, offset = [], 0
    items = [(name, a if isinstance(a, np.ndarray) else np.asarray(a)) for name, a in arrays.items()]
    for name, a in items:
        dt = _storage_dtype(a)
        table.append({"name": name, "dtype": dt.str, "shape": list(a.shape), "offset": offset})
        offset += a.size * dt.itemsize
    header = json.dumps(
        {"kind": kind, "meta": dict(meta or {}), "arrays": table}, sort_keys=True
    ).encode()
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(header)))
        fh.write(header)
        for (_, a), entry in zip(items, table):
            dt = np.dtype(entry["dtype"])
            if a.ndim == 0:
                fh.write(np.asarray(a, dtype=dt).tobytes())
                continue
            # stream large (possibly memory-mapped) arrays in row blocks
            step = max(1, (64 << 20) // max(1, a[:1].size * dt.itemsize))
            for s in range(0, len(a), step):
                fh.write(np.ascontiguousarray(a[s:s + step], dtype=dt).tobytes())


def load(path: Path | str, kind: str | None = None, mmap: bool = False):
    """Return ``(meta, arrays)``. With ``mmap`` arrays are read-only memory maps."""
    path = Path(path)
    with open(path, "rb") as fh:
        prefix = fh.read(_PREFIX.size)
        if len(prefix) < _PREFIX.size:
            raise ContainerError(f"{path}: file too short")
        magic, version, hlen = _PREFIX.unpack(prefix)
        if magic != MAGIC:
            raise ContainerError(f"{path}: bad magic {magic!r}")
        if version != VERSION:
            raise ContainerError(f"{path}: unsupported version {version}")
        header = json.loads(fh.read(hlen))
    if kind is not None and header["kind"] != kind:
        raise ContainerError(f"{path}: expected a {kind!r} container, found {header['kind']!r}")
    base = _PREFIX.size + hlen
    arrays = {}
    for entry in header["arrays"]:
        dt, shape = np.dtype(entry["dtype"]), tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        if mmap and count:
            arrays[entry["name"]] = np.memmap(
                path, dtype=dt, mode="r", offset=base + entry["offset"], shape=shape
            )
        else:
            arrays[entry["name"]] = np.fromfile(
                path, dtype=dt, count=count, offset=base + entry["offset"]
            ).reshape(shape)
    return header["meta"], arrays
