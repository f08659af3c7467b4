"""Single-file binary checkpoints.

Layout (all little-endian):

    magic   b"UVX1"
    u32     blob count
    per blob:
        u16   name length, then utf-8 name
        u8    kind: 0 = float32 array, 1 = float64 array, 2 = raw bytes
        u8    ndim (0 for raw bytes)
        u32*  shape
        u64   payload byte count
        ...   payload

Parameters, optimizer moments and a JSON metadata blob all ride in the same
file so that a checkpoint alone is enough to render or relight.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"UVX1"

_KIND_F32 = 0
_KIND_F64 = 1
_KIND_BYTES = 2


class CheckpointError(ValueError):
    pass


def save_blobs(path, blobs: dict) -> None:
    """Write {name: ndarray or bytes} to `path` in UVX1 format."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blobs)))
        for name, value in blobs.items():
            enc = name.encode("utf-8")
            f.write(struct.pack("<H", len(enc)))
            f.write(enc)
            if isinstance(value, (bytes, bytearray)):
                f.write(struct.pack("<BB", _KIND_BYTES, 0))
                f.write(struct.pack("<Q", len(value)))
                f.write(value)
                continue
            arr = np.asarray(value)
            if arr.dtype == np.float64:
                kind = _KIND_F64
            else:
                kind = _KIND_F32
                arr = arr.astype(np.float32, copy=False)
            arr = np.ascontiguousarray(arr)
            f.write(struct.pack("<BB", kind, arr.ndim))
            for s in arr.shape:
                f.write(struct.pack("<I", s))
            raw = arr.astype("<f8" if kind == _KIND_F64 else "<f4").tobytes()
            f.write(struct.pack("<Q", len(raw)))
            f.write(raw)


def load_blobs(path) -> dict:
    """Read a UVX1 file back into {name: ndarray or bytes}."""
    blobs = {}
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise CheckpointError(f"{path}: not a UVX1 checkpoint")
        (count,) = struct.unpack("<I", f.read(4))
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode("utf-8")
            kind, ndim = struct.unpack("<BB", f.read(2))
            shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(ndim))
            (nbytes,) = struct.unpack("<Q", f.read(8))
            payload = f.read(nbytes)
            if len(payload) != nbytes:
                raise CheckpointError(f"{path}: truncated blob {name!r}")
            if kind == _KIND_BYTES:
                blobs[name] = payload
            elif kind == _KIND_F64:
                blobs[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
            elif kind == _KIND_F32:
                blobs[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
            else:
                raise CheckpointError(f"{path}: unknown blob kind {kind}")
    return blobs
