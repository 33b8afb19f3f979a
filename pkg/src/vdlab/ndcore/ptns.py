"""PTNS tensor container: a minimal, byte-stable array file.

Layout (all integers little-endian):

  bytes 0..3    magic "PTNS"
  u32           version (currently 1)
  u32           dtype code: 0 = float32, 1 = float64
  u32           ndim
  ndim x u64    extents
  payload       C-contiguous values, little-endian

Writers always produce exactly this layout, so equal tensors serialize to
equal bytes and file hashes are meaningful.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError, SizeError

MAGIC = b"PTNS"
VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES_BY_KIND = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def write_ptns(path, a: np.ndarray) -> None:
    """Serialize a float32/float64 array to `path`."""
    a = np.ascontiguousarray(a)
    if a.dtype not in _CODES_BY_KIND:
        raise FormatError(f"PTNS stores float32/float64 only, got {a.dtype}")
    code = _CODES_BY_KIND[a.dtype]
    head = MAGIC + struct.pack("<III", VERSION, code, a.ndim)
    head += struct.pack(f"<{a.ndim}Q", *a.shape) if a.ndim else b""
    payload = a.astype(_DTYPE_CODES[code], copy=False).tobytes(order="C")
    Path(path).write_bytes(head + payload)


def read_ptns(path) -> np.ndarray:
    """Read a PTNS file back into a numpy array (native byte order)."""
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated header")
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    version, code, ndim = struct.unpack_from("<III", raw, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if code not in _DTYPE_CODES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    off = 16
    if len(raw) < off + 8 * ndim:
        raise FormatError(f"{path}: truncated extents")
    shape = struct.unpack_from(f"<{ndim}Q", raw, off) if ndim else ()
    off += 8 * ndim
    if any(s == 0 for s in shape):
        raise SizeError(f"{path}: zero extent in {shape}")
    dtype = _DTYPE_CODES[code]
    n = int(np.prod(shape)) if shape else 1
    if len(raw) - off != n * dtype.itemsize:
        raise FormatError(
            f"{path}: payload is {len(raw) - off} bytes, expected {n * dtype.itemsize}"
        )
    a = np.frombuffer(raw, dtype=dtype, count=n, offset=off).reshape(shape)
    return a.astype(a.dtype.newbyteorder("="), copy=True)
