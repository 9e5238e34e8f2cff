"""Binary weight blobs.

Layout: magic "NNW1", u32 entry count, then per entry a u32 name length,
the UTF-8 name, u32 rank, rank u32 dims, and row-major 32-bit floats. All
integers little-endian.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"NNW1"


class WeightsError(Exception):
    """Weight file is malformed."""


def save_weights(path, named_arrays) -> None:
    """named_arrays: iterable of (name, Tensor-or-ndarray) pairs."""
    items = [(name, np.asarray(getattr(a, "data", a), dtype=np.float32))
             for name, a in named_arrays]
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(items)))
        for name, arr in items:
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr).astype("<f4").tobytes())


def load_weights(path) -> dict:
    """Returns {name: float32 ndarray} in file order (dict preserves it)."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise WeightsError(f"bad magic {blob[:4]!r}")
    off = 4

    def take(n):
        nonlocal off
        if off + n > len(blob):
            raise WeightsError("truncated weight file")
        out = blob[off:off + n]
        off += n
        return out

    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims)
        arrays[name] = data.astype(np.float32)
    if off != len(blob):
        raise WeightsError(f"{len(blob) - off} trailing bytes")
    return arrays


def assign_weights(params, arrays: dict) -> None:
    """Copy loaded arrays into (name, Tensor) pairs; names must align."""
    names = {name for name, _ in params}
    missing = names - set(arrays)
    extra = set(arrays) - names
    if missing or extra:
        raise WeightsError(f"name mismatch: missing {sorted(missing)}, "
                           f"unexpected {sorted(extra)}")
    for name, p in params:
        arr = arrays[name]
        if arr.shape != p.data.shape:
            raise WeightsError(f"{name}: shape {arr.shape} vs "
                               f"{p.data.shape}")
        p.data = arr.astype(p.data.dtype)
