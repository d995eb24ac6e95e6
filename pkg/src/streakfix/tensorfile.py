"""Byte-deterministic tensor container used for checkpoints and weights.

Layout: magic ``SVCP`` | u32 version | u32 header_len | header JSON |
concatenated float32 little-endian payloads.  The header holds a
metadata dict plus the ordered tensor index ``[[name, shape], ...]``.
Identical tensors and metadata always produce identical bytes, which is
what makes checkpoint determinism checks meaningful.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import InputError

MAGIC = b"SVCP"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


def save_tensors(path, tensors, meta=None):
    """Write named float arrays plus a metadata dict to `path` atomically.

    `tensors` maps name -> array-like; entries are stored sorted by name
    and converted to float32.  The write goes through a temp file in the
    same directory followed by an atomic rename.
    """
    path = Path(path)
    names = sorted(tensors)
    arrays = {}
    index = []
    for name in names:
        # tobytes() below copies in C order, so contiguity is not required
        # here and 0-d arrays keep their shape.
        arr = np.asarray(tensors[name], dtype="<f4")
        arrays[name] = arr
        index.append([name, list(arr.shape)])
    header = json.dumps(
        {"meta": dict(meta or {}), "tensors": index},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")

    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(_PREFIX.pack(MAGIC, VERSION, len(header)))
            fh.write(header)
            for name in names:
                fh.write(arrays[name].tobytes())
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def read_meta(path):
    """Read only the metadata dict, skipping tensor payloads."""
    path = Path(path)
    with open(path, "rb") as fh:
        prefix = fh.read(_PREFIX.size)
        if len(prefix) < _PREFIX.size:
            raise InputError(f"{path}: truncated container header")
        magic, version, header_len = _PREFIX.unpack(prefix)
        if magic != MAGIC:
            raise InputError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        if version != VERSION:
            raise InputError(f"{path}: unsupported container version {version}")
        try:
            header = json.loads(fh.read(header_len))
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}: corrupt container header: {exc}") from exc
    return header["meta"]


def load_tensors(path):
    """Read a tensor container; returns (tensors dict, metadata dict)."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _PREFIX.size:
        raise InputError(f"{path}: truncated container header")
    magic, version, header_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise InputError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise InputError(f"{path}: unsupported container version {version}")
    try:
        header = json.loads(raw[_PREFIX.size : _PREFIX.size + header_len])
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: corrupt container header: {exc}") from exc

    tensors = {}
    offset = _PREFIX.size + header_len
    for name, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        end = offset + 4 * count
        if end > len(raw):
            raise InputError(f"{path}: truncated payload for tensor {name!r}")
        tensors[name] = (
            np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
            .reshape(shape)
            .copy()
        )
        offset = end
    if offset != len(raw):
        raise InputError(f"{path}: {len(raw) - offset} trailing bytes")
    return tensors, header["meta"]


def sha256_of(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
