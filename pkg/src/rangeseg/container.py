"""Little-endian binary containers: RSAT parameter checkpoints.

Layout::

    b"RSAT" | u16 version | u32 meta_len | meta (utf-8 JSON) | u32 count |
    count * (u16 name_len | name | u8 ndim | ndim * u32 dim | float64[prod(dim)])

The meta block carries free-form provenance, including the model spec hash
that guards against loading a checkpoint into a mismatched topology.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

CHECKPOINT_MAGIC = b"RSAT"
CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    """Malformed container; ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(
                f"truncated file: missing {what} ({n} bytes needed, {len(self.buf) - self.pos} left)",
                self.pos)
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        size = struct.calcsize(fmt)
        vals = struct.unpack(fmt, self.take(size, what))
        return vals[0] if len(vals) == 1 else vals

    def array(self, count: int, dtype: str, what: str) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        raw = self.take(count * itemsize, what)
        return np.frombuffer(raw, dtype=dtype).copy()

    def expect_magic(self, magic: bytes, version: int, kind: str) -> None:
        got = self.take(len(magic), f"{kind} magic")
        if got != magic:
            raise FormatError(f"bad magic {got!r}, expected {magic!r} for a {kind} file", 0)
        off = self.pos
        ver = self.unpack("<H", f"{kind} version")
        if ver != version:
            raise FormatError(f"unsupported {kind} version {ver} (this build reads version {version})", off)

    def expect_end(self) -> None:
        if self.pos != len(self.buf):
            raise FormatError(f"{len(self.buf) - self.pos} trailing bytes after last record", self.pos)


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    parts = [CHECKPOINT_MAGIC, struct.pack("<H", CHECKPOINT_VERSION)]
    meta_bytes = json.dumps(dict(meta or {}), sort_keys=True).encode()
    parts += [struct.pack("<I", len(meta_bytes)), meta_bytes, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    r = Reader(Path(path).read_bytes())
    r.expect_magic(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, "checkpoint")
    meta_len = r.unpack("<I", "meta length")
    off = r.pos
    try:
        meta = json.loads(r.take(meta_len, "meta block").decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"meta block is not valid JSON: {exc}", off) from None
    count = r.unpack("<I", "record count")
    out: dict[str, np.ndarray] = {}
    for i in range(count):
        nlen = r.unpack("<H", f"name length of record {i}")
        name = r.take(nlen, f"name of record {i}").decode()
        ndim = r.unpack("<B", f"ndim of record {name!r}")
        shape = tuple(r.array(ndim, "<u4", f"shape of record {name!r}").tolist())
        size = int(np.prod(shape)) if shape else 1
        out[name] = r.array(size, "<f8", f"payload of record {name!r}").reshape(shape).astype(np.float64)
    r.expect_end()
    return out, meta
