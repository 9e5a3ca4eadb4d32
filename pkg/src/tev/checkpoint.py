"""Parameter checkpoint serialization.

Binary layout (all integers little-endian):

    magic "TEVW" | version u16 | desc_len u32 | descriptor JSON (utf-8)
    | param_count u32 | records...

Each record: name_len u32 | name utf-8 | rank u32 | dims u32 x rank
| float32 payload (row-major).

Loads are strict: wrong magic, truncation, malformed JSON, or trailing bytes
all raise FormatError carrying the byte offset where the problem was found.
Writes go through a temp file and os.replace, so a crash never leaves a
half-written checkpoint at the target path.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from .errors import FormatError
from .numerics import Tensor

MAGIC = b"TEVW"
VERSION = 1

_MAX_NAME = 1 << 16
_MAX_DESC = 1 << 24
_MAX_RANK = 8


class Reader:
    """Cursor over an in-memory buffer; every read names its field so
    truncation errors report what was being parsed and where."""

    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated while reading {what}", self.pos)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]

    def f32_array(self, count: int, what: str) -> np.ndarray:
        raw = self.take(4 * count, what)
        return np.frombuffer(raw, dtype="<f4").astype(np.float32, copy=True)

    def expect_end(self) -> None:
        if self.pos != len(self.buf):
            raise FormatError(
                f"{len(self.buf) - self.pos} trailing bytes after payload", self.pos
            )

    def json_blob(self, length: int, what: str) -> dict:
        raw = self.take(length, what)
        try:
            obj = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError(f"malformed {what}: {e}", self.pos - length) from None
        if not isinstance(obj, dict):
            raise FormatError(f"{what} must be a JSON object", self.pos - length)
        return obj


def write_atomic(path: str, payload: bytes) -> None:
    """Write bytes to `path` via a same-directory temp file and atomic rename."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tev-", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_params(path: str, descriptor: dict, params: dict) -> None:
    """Write a TEVW checkpoint.  `params` maps names to Tensors or arrays;
    insertion order is preserved byte-for-byte."""
    desc = json.dumps(descriptor, sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(desc)), desc]
    chunks.append(struct.pack("<I", len(params)))
    for name, value in params.items():
        arr = np.ascontiguousarray(
            value.data if isinstance(value, Tensor) else value, dtype="<f4"
        )
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    write_atomic(path, b"".join(chunks))


def load_params(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a TEVW checkpoint back as (descriptor, name -> float32 array)."""
    with open(path, "rb") as f:
        r = Reader(f.read())
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    version = r.u16("format version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    desc_len = r.u32("descriptor length")
    if desc_len > _MAX_DESC:
        raise FormatError(f"descriptor length {desc_len} implausibly large", r.pos - 4)
    descriptor = r.json_blob(desc_len, "architecture descriptor")
    count = r.u32("parameter count")
    params: dict[str, np.ndarray] = {}
    for idx in range(count):
        name_len = r.u32(f"name length of parameter {idx}")
        if name_len > _MAX_NAME:
            raise FormatError(f"parameter name length {name_len} implausible", r.pos - 4)
        name_off = r.pos
        raw_name = r.take(name_len, f"name of parameter {idx}")
        try:
            name = raw_name.decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"parameter {idx} name is not utf-8", name_off) from None
        if name in params:
            raise FormatError(f"duplicate parameter name {name!r}", name_off)
        rank = r.u32(f"rank of {name}")
        if rank > _MAX_RANK:
            raise FormatError(f"rank {rank} of {name!r} implausible", r.pos - 4)
        dims = tuple(r.u32(f"dim {d} of {name}") for d in range(rank))
        n = 1
        for d in dims:
            n *= d
        if n > (1 << 28):
            raise FormatError(f"parameter {name!r} claims {n} elements", r.pos)
        params[name] = r.f32_array(n, f"values of {name}").reshape(dims)
    r.expect_end()
    return descriptor, params
