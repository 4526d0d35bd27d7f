"""Named parameter sets and the shared checkpoint container.

A parameter set is a plain ``dict[str, np.ndarray]``; insertion order is the
canonical parameter order and is preserved through save/load.

Checkpoint layout (little-endian)::

    magic    b"SFDC"
    version  uint32 (currently 1)
    meta_len uint32, then meta_len bytes of UTF-8 JSON metadata
    count    uint32
    count x  [name_len uint16, name UTF-8, ndim uint8, shape uint32 * ndim,
              float32 payload in row-major order]
"""

from __future__ import annotations

import json
import os
import struct
from typing import Callable, Mapping

import numpy as np

ParamSet = dict[str, np.ndarray]

MAGIC = b"SFDC"
VERSION = 1


class CheckpointError(ValueError):
    """Raised for unreadable checkpoints or parameter-set mismatches."""


def check_compatible(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray]) -> None:
    if list(a) != list(b):
        raise CheckpointError(f"parameter names differ: {sorted(set(a) ^ set(b)) or 'order'}")
    for name in a:
        if a[name].shape != b[name].shape:
            raise CheckpointError(f"shape mismatch for {name!r}: {a[name].shape} vs {b[name].shape}")


def combine(a: ParamSet, b: ParamSet, fn: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> ParamSet:
    """Apply ``fn`` name-wise to two compatible parameter sets."""
    check_compatible(a, b)
    return {name: fn(a[name], b[name]) for name in a}


def copy_params(p: Mapping[str, np.ndarray]) -> ParamSet:
    return {name: np.array(v, copy=True) for name, v in p.items()}


def zeros_like(p: Mapping[str, np.ndarray]) -> ParamSet:
    return {name: np.zeros_like(v) for name, v in p.items()}


def freeze(p: ParamSet) -> ParamSet:
    """Mark every array read-only so in-place updates fail loudly."""
    for v in p.values():
        v.setflags(write=False)
    return p


def count(p: Mapping[str, np.ndarray]) -> int:
    return int(sum(v.size for v in p.values()))


def all_finite(p: Mapping[str, np.ndarray]) -> bool:
    return all(np.isfinite(v).all() for v in p.values())


def save_checkpoint(path: str | os.PathLike, params: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<II", VERSION, len(meta_bytes)), meta_bytes, struct.pack("<I", len(params))]
    for name, value in params.items():
        encoded = name.encode("utf-8")
        arr = np.ascontiguousarray(value, dtype="<f4")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> tuple[ParamSet, dict]:
    """Read a checkpoint; returns (float32 parameters, metadata)."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {os.fspath(path)}: {exc.strerror}") from exc
    if data[:4] != MAGIC:
        raise CheckpointError(f"{os.fspath(path)}: not a checkpoint (bad magic)")
    try:
        version, meta_len = struct.unpack_from("<II", data, 4)
        if version != VERSION:
            raise CheckpointError(f"{os.fspath(path)}: unsupported checkpoint version {version}")
        off = 12
        meta = json.loads(data[off:off + meta_len].decode("utf-8"))
        off += meta_len
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        params: ParamSet = {}
        for _ in range(n):
            (name_len,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + name_len].decode("utf-8")
            off += name_len
            (ndim,) = struct.unpack_from("<B", data, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shape)
            off += 4 * size
            params[name] = arr.astype(np.float32)
    except (struct.error, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{os.fspath(path)}: truncated or corrupt checkpoint ({exc})") from exc
    if off != len(data):
        raise CheckpointError(f"{os.fspath(path)}: {len(data) - off} trailing bytes")
    return params, meta
