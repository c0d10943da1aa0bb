"""Checkpoint files: magic CVCK, version, manifest JSON, then named tensors with CRCs."""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from .tensor import Tensor

MAGIC = b"CVCK"
VERSION = 1

_DTYPE_CODES = {0: "<f4", 1: "<f8"}
_CODE_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CheckpointError(Exception):
    """Malformed, truncated, or corrupt checkpoint file."""


def save_checkpoint(path, arrays: dict, manifest: dict | None = None):
    """Write named float tensors plus a JSON manifest; byte-deterministic for equal inputs."""
    blobs = []
    for name in sorted(arrays):
        arr = arrays[name]
        data = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float32)
        code = _CODE_FOR[data.dtype]
        payload = np.ascontiguousarray(data).astype(_DTYPE_CODES[code], copy=False).tobytes()
        name_b = name.encode("utf-8")
        head = struct.pack("<H", len(name_b)) + name_b + struct.pack("<BB", code, data.ndim)
        head += struct.pack(f"<{data.ndim}I", *data.shape)
        blobs.append(head + payload + struct.pack("<I", zlib.crc32(payload)))
    manifest_b = json.dumps(manifest or {}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", VERSION))
        fh.write(struct.pack("<I", len(manifest_b)))
        fh.write(manifest_b)
        fh.write(struct.pack("<I", len(blobs)))
        for blob in blobs:
            fh.write(blob)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path):
    """Read (arrays, manifest); raises CheckpointError on any corruption."""
    with open(path, "rb") as fh:
        reader = _Reader(fh.read())
    if reader.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = reader.unpack("<H")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (mlen,) = reader.unpack("<I")
    try:
        manifest = json.loads(reader.take(mlen).decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"bad manifest: {exc}") from exc
    (count,) = reader.unpack("<I")
    arrays = {}
    for _ in range(count):
        (nlen,) = reader.unpack("<H")
        name = reader.take(nlen).decode("utf-8")
        code, ndim = reader.unpack("<BB")
        if code not in _DTYPE_CODES:
            raise CheckpointError(f"unknown dtype code {code} for {name!r}")
        shape = reader.unpack(f"<{ndim}I")
        dtype = np.dtype(_DTYPE_CODES[code])
        payload = reader.take(int(np.prod(shape, dtype=np.int64)) * dtype.itemsize)
        (crc,) = reader.unpack("<I")
        if zlib.crc32(payload) != crc:
            raise CheckpointError(f"checksum mismatch in tensor {name!r}")
        arrays[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    if reader.pos != len(reader.buf):
        raise CheckpointError("trailing bytes after last tensor")
    return arrays, manifest
