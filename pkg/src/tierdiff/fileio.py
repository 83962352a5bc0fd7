"""Versioned binary containers for datasets, checkpoints and sample files.

Byte layout (all integers little-endian)::

    offset  size  field
    0       8     magic (format-specific, e.g. b"TDIFDATA")
    8       4     uint32 format version
    12      8     uint64 header length H
    20      H     UTF-8 JSON header, keys sorted, compact separators
    20+H    ...   array payload, arrays concatenated in header order

The header holds ``meta`` (free-form JSON) and ``arrays``: a list of
``{"name", "dtype", "shape", "offset", "nbytes"}`` with offsets relative to
the payload start. dtypes are numpy little-endian codes (``<f4``, ``<f8``,
``<i4``, ``<i8``, ``|u1``). Writes go to a temp file that is renamed into
place.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

VERSION = 1
DATASET_MAGIC = b"TDIFDATA"
CHECKPOINT_MAGIC = b"TDIFCKPT"
SAMPLES_MAGIC = b"TDIFSMPL"

_PREFIX = struct.Struct("<8sIQ")
_ALLOWED = {"<f4", "<f8", "<i4", "<i8", "|u1"}


class FormatError(ValueError):
    """File is not a valid container of the expected kind/version."""


def _canon_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True).encode("utf-8")


def encode(magic: bytes, meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder not in ("|", "<", "=") else arr.dtype
        code = np.dtype(dt).str
        if code not in _ALLOWED:
            raise TypeError(f"unsupported dtype {code} for array {name!r}")
        raw = np.ascontiguousarray(arr, dtype=code).tobytes()
        entries.append({"name": name, "dtype": code, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = _canon_json({"meta": meta, "arrays": entries})
    return _PREFIX.pack(magic, VERSION, len(header)) + header + b"".join(blobs)


def decode(blob: bytes, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < _PREFIX.size:
        raise FormatError("file too short for a container header")
    got, version, hlen = _PREFIX.unpack_from(blob)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported format version {version} (reader supports {VERSION})")
    start = _PREFIX.size + hlen
    header = json.loads(blob[_PREFIX.size:start].decode("utf-8"))
    arrays = {}
    for e in header["arrays"]:
        lo = start + e["offset"]
        raw = blob[lo: lo + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise FormatError(f"truncated payload for array {e['name']!r}")
        arrays[e["name"]] = np.frombuffer(raw, dtype=e["dtype"]).reshape(e["shape"]).copy()
    return header["meta"], arrays


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_container(path, magic: bytes, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    atomic_write(path, encode(magic, meta, arrays))


def read_container(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes(), magic)


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
