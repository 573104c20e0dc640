"""Single-file binary checkpoints.

Layout (little-endian): magic ``HCK1``, version u32, metadata count u32
then (key_len u32, key, value_len u32, value) utf-8 pairs, tensor count
u32, then per tensor: name_len u32, name bytes, dtype tag u8, rank u32,
extents u32 each, raw payload. Round-trips every array bit-exactly.
"""

from __future__ import annotations

import numpy as np

from .errors import FormatError

MAGIC = b"HCK1"
VERSION = 1

_DTYPES = {0: "<f8", 1: "<f4", 2: "u1", 3: "<i8"}
_TAGS = {np.dtype("float64"): 0, np.dtype("float32"): 1,
         np.dtype("uint8"): 2, np.dtype("int64"): 3}


def _u32(x: int) -> bytes:
    return np.uint32(x).tobytes()


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict[str, str]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_u32(VERSION))
        fh.write(_u32(len(meta)))
        for key in sorted(meta):
            kb = key.encode("utf-8")
            vb = str(meta[key]).encode("utf-8")
            fh.write(_u32(len(kb)) + kb + _u32(len(vb)) + vb)
        fh.write(_u32(len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name])
            if arr.dtype not in _TAGS:
                arr = arr.astype(np.float64)
            nb = name.encode("utf-8")
            fh.write(_u32(len(nb)) + nb)
            fh.write(bytes([_TAGS[arr.dtype]]))
            fh.write(_u32(arr.ndim))
            for ext in arr.shape:
                fh.write(_u32(ext))
            fh.write(arr.tobytes())


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError("truncated checkpoint", offset=self.pos)
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return int(np.frombuffer(self.take(4), "<u4")[0])


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    r = _Reader(raw)
    if r.take(4) != MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}", offset=0)
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    meta = {}
    for _ in range(r.u32()):
        key = r.take(r.u32()).decode("utf-8")
        meta[key] = r.take(r.u32()).decode("utf-8")
    tensors = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        tag = r.take(1)[0]
        if tag not in _DTYPES:
            raise FormatError(f"unknown dtype tag {tag} for {name!r}", offset=r.pos - 1)
        rank = r.u32()
        shape = tuple(r.u32() for _ in range(rank))
        dtype = np.dtype(_DTYPES[tag])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        payload = r.take(count * dtype.itemsize)
        tensors[name] = np.frombuffer(payload, dtype).reshape(shape).copy()
    if r.pos != len(raw):
        raise FormatError("trailing bytes after tensor table", offset=r.pos)
    return tensors, meta
