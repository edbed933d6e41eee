"""Binary checkpoint container: JSON metadata plus a named tensor table, FNV-1a sealed.

Layout (all integers little-endian)::

    magic "CANET1" | u32 version | u64 blob length | JSON blob | u32 tensor count
    per tensor: u16 name length | name (utf-8) | u8 dtype code | u8 rank | u32 dims... | payload
    u64 FNV-1a of every preceding byte
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

MAGIC = b"CANET1"
FORMAT_VERSION = 1
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3

DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2, np.dtype("<i8"): 3, np.dtype("u1"): 4}
CODE_DTYPES = {code: dt for dt, code in DTYPE_CODES.items()}


class CheckpointError(ValueError):
    pass


@numba.njit(cache=True)
def _fnv1a(data: np.ndarray) -> np.uint64:
    h = np.uint64(FNV_OFFSET)
    prime = np.uint64(FNV_PRIME)
    for b in data:
        h = (h ^ np.uint64(b)) * prime
    return h


def fnv1a64(data: bytes) -> int:
    return int(_fnv1a(np.frombuffer(data, dtype=np.uint8)))


@dataclass
class Checkpoint:
    meta: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = FORMAT_VERSION


def _meta_blob(meta: dict) -> bytes:
    return json.dumps(meta, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()


def encode(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<I", ckpt.version)]
    blob = _meta_blob(ckpt.meta)
    parts += [struct.pack("<Q", len(blob)), blob, struct.pack("<I", len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        code = DTYPE_CODES.get(arr.dtype.newbyteorder("<"))
        if code is None:
            raise CheckpointError(f"tensor {name}: unsupported dtype {arr.dtype}")
        raw_name = name.encode()
        if len(raw_name) > 0xFFFF or arr.ndim > 0xFF:
            raise CheckpointError(f"tensor {name}: name or rank too large")
        parts += [struct.pack("<H", len(raw_name)), raw_name, struct.pack("<BB", code, arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape),
                  np.ascontiguousarray(arr, dtype=CODE_DTYPES[code]).tobytes()]
    body = b"".join(parts)
    return body + struct.pack("<Q", fnv1a64(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(data: bytes) -> Checkpoint:
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"not a checkpoint: magic {data[:len(MAGIC)]!r}, expected {MAGIC!r}")
    if len(data) < len(MAGIC) + 8:
        raise CheckpointError("truncated checkpoint")
    body, (stored,) = data[:-8], struct.unpack("<Q", data[-8:])
    actual = fnv1a64(body)
    if actual != stored:
        raise CheckpointError(f"checksum mismatch: stored {stored:016x}, computed {actual:016x}")
    r = _Reader(body)
    r.take(len(MAGIC), "magic")
    (version,) = r.unpack("<I", "version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (blob_len,) = r.unpack("<Q", "config length")
    try:
        meta = json.loads(r.take(blob_len, "config"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"malformed config blob: {exc}") from None
    (count,) = r.unpack("<I", "tensor count")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H", "tensor name length")
        name = r.take(name_len, "tensor name").decode()
        code, rank = r.unpack("<BB", f"header of {name}")
        if code not in CODE_DTYPES:
            raise CheckpointError(f"tensor {name}: unknown dtype code {code}")
        shape = r.unpack(f"<{rank}I", f"shape of {name}")
        dtype = CODE_DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        payload = r.take(nbytes, f"payload of {name}")
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name {name}")
        tensors[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    if r.pos != len(body):
        raise CheckpointError(f"{len(body) - r.pos} trailing bytes after the tensor table")
    return Checkpoint(meta, tensors, version)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    data = encode(ckpt)
    path = Path(path)
    try:
        path.write_bytes(data)
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc.strerror}") from exc


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise FileNotFoundError(f"checkpoint not found: {path}") from None
    try:
        return decode(data)
    except CheckpointError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
