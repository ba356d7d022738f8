"""Binary grid files used for cost-volume dumps and scenario feature maps.

Layout: three little-endian uint32 dimensions ``(A, B, C)``, then ``A*B*C``
little-endian float32 values in row-major order, then the boolean mask of the
same shape packed eight per byte (``numpy.packbits``, most significant bit
first, final byte zero-padded).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


def write_grid(path, values: np.ndarray, mask: np.ndarray | None = None) -> None:
    values = np.asarray(values)
    if values.ndim != 3:
        raise ValueError(f"grid must be 3-D, got shape {values.shape}")
    if mask is None:
        mask = np.ones(values.shape, dtype=bool)
    if mask.shape != values.shape:
        raise ValueError("mask shape differs from value shape")
    with open(path, "wb") as fh:
        fh.write(np.asarray(values.shape, dtype="<u4").tobytes())
        fh.write(np.ascontiguousarray(values, dtype="<f4").tobytes())
        fh.write(np.packbits(mask.astype(bool).ravel()).tobytes())


def read_grid(path) -> tuple[np.ndarray, np.ndarray]:
    raw = Path(path).read_bytes()
    dims = tuple(int(x) for x in np.frombuffer(raw[:12], dtype="<u4"))
    n = int(np.prod(dims, dtype=np.int64))
    start = 12
    end = start + 4 * n
    if len(raw) < end + (n + 7) // 8:
        raise ValueError(f"{path}: truncated grid file")
    values = np.frombuffer(raw[start:end], dtype="<f4").reshape(dims)
    mask = np.unpackbits(np.frombuffer(raw[end:], dtype=np.uint8))[:n].astype(bool).reshape(dims)
    return values.astype(np.float64), mask
