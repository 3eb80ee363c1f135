"""PTNS binary tensor container.

Layout: magic b"PTNS", version byte (=1), dtype code byte
(1 = float32, 2 = uint16 label), rank byte, rank little-endian uint32
dims, then the raw little-endian payload. Every checkpoint, dataset file
and dumped feature map uses this container.
"""
from __future__ import annotations

import struct

import numpy as np

MAGIC = b"PTNS"
VERSION = 1
DTYPE_F32 = 1
DTYPE_U16 = 2

_CODES = {DTYPE_F32: np.dtype("<f4"), DTYPE_U16: np.dtype("<u2")}


def write_ptns(path, array):
    """Write a float32 or uint16 array; other dtypes are rejected."""
    arr = np.asarray(array)
    if arr.dtype == np.float32:
        code = DTYPE_F32
    elif arr.dtype == np.uint16:
        code = DTYPE_U16
    else:
        raise ValueError(f"ptns: unsupported dtype {arr.dtype} (use float32 or uint16)")
    if arr.ndim > 255:
        raise ValueError(f"ptns: rank {arr.ndim} exceeds container limit")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<BBB", VERSION, code, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr).astype(_CODES[code], copy=False).tobytes())


def read_ptns(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"ptns: bad magic in {path}")
    version, code, rank = struct.unpack("<BBB", blob[4:7])
    if version != VERSION:
        raise ValueError(f"ptns: unsupported version {version}")
    if code not in _CODES:
        raise ValueError(f"ptns: unknown dtype code {code}")
    dims = struct.unpack(f"<{rank}I", blob[7:7 + 4 * rank])
    payload = blob[7 + 4 * rank:]
    arr = np.frombuffer(payload, dtype=_CODES[code]).reshape(dims)
    return arr.copy()
