"""Writers for the DPT1 tensor container and dataset manifest JSON.

The adapter talks to the main package purely through its on-disk formats,
so the byte layout is implemented here from the published description:

    magic "DPT1" | dtype code u8 (1=float32, 2=float64) | rank u8 |
    2 reserved zero bytes | rank little-endian u64 extents |
    row-major little-endian payload
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"DPT1"
_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


def write_tensor(arr: np.ndarray, path: str | Path) -> None:
    """Atomically write `arr` (float32/float64, rank >= 1, finite)."""
    arr = np.asarray(arr)
    if arr.dtype not in _CODES:
        raise ValueError(f"unsupported dtype {arr.dtype}")
    if arr.ndim < 1 or any(e < 1 for e in arr.shape):
        raise ValueError("tensors must have rank >= 1 and positive extents")
    if not np.isfinite(arr).all():
        raise ValueError("non-finite element")
    header = MAGIC + bytes([_CODES[arr.dtype], arr.ndim, 0, 0])
    extents = np.asarray(arr.shape, dtype="<u8").tobytes()
    payload = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(header + extents + payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_manifest(doc: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
