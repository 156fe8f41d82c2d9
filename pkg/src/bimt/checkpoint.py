"""Binary checkpoint container.

Layout (all integers little-endian uint32)::

    b"BMT1" | version | meta_len | meta (UTF-8 JSON) | n_params |
    n_params x (name_len | name | ndim | dims... | float32 payload)
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import DataError, VocabMismatchError

MAGIC = b"BMT1"
VERSION = 1


def _u32(n: int) -> bytes:
    return struct.pack("<I", n)


def dumps(meta: dict, params: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(_u32(VERSION))
    blob = json.dumps(meta, sort_keys=True, ensure_ascii=False).encode("utf-8")
    buf.write(_u32(len(blob)))
    buf.write(blob)
    buf.write(_u32(len(params)))
    for name, arr in params.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        buf.write(_u32(len(raw)))
        buf.write(raw)
        buf.write(_u32(arr.ndim))
        for dim in arr.shape:
            buf.write(_u32(dim))
        buf.write(arr.tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DataError(f"{self.path}: truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def loads(data: bytes, path="<bytes>") -> tuple[dict, dict[str, np.ndarray]]:
    r = _Reader(data, path)
    if r.take(4) != MAGIC:
        raise DataError(f"{path}: not a BMT1 checkpoint")
    version = r.u32()
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    meta = json.loads(r.take(r.u32()).decode("utf-8"))
    params = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        shape = tuple(r.u32() for _ in range(r.u32()))
        count = int(np.prod(shape, dtype=np.int64))
        params[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).copy()
    if r.pos != len(data):
        raise DataError(f"{path}: {len(data) - r.pos} trailing bytes")
    return meta, params


def save(path, meta: dict, params: Mapping[str, np.ndarray]):
    Path(path).write_bytes(dumps(meta, params))


def load(path, expect_vocab_hash: str | None = None, hash_key: str = "vocab_hash"):
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    meta, params = loads(data, path)
    if expect_vocab_hash is not None and meta.get(hash_key) != expect_vocab_hash:
        raise VocabMismatchError(
            f"{path}: vocab hash {str(meta.get(hash_key))[:12]} does not match expected {expect_vocab_hash[:12]}")
    return meta, params
