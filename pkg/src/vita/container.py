"""Binary tensor-container format.

Layout (all integers little-endian):

    magic   4 bytes  b"VITA"
    version u32      currently 1
    count   u32      number of entries
    entry:  name_len u16, name utf-8, dtype u8 (0 = float32),
            rank u8, dims u32 * rank, payload (row-major, little-endian)

The converter tool writes these files; this module reads them (and can write
them too, which the test suite uses to build toy checkpoints).
"""

from __future__ import annotations

import struct
from typing import Mapping

import numpy as np

from .errors import LoadError

MAGIC = b"VITA"
VERSION = 1
DTYPE_F32 = 0


def read_container(path) -> dict[str, np.ndarray]:
    """Read every entry into a dict of float32 arrays, in file order."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise LoadError(f"{path}: not a tensor container (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise LoadError(f"{path}: unsupported container version {version}")
    offset = 12
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset:offset + name_len].decode("utf-8")
            offset += name_len
            dtype, rank = struct.unpack_from("<BB", blob, offset)
            offset += 2
            dims = struct.unpack_from(f"<{rank}I", blob, offset) if rank else ()
            offset += 4 * rank
        except struct.error as exc:
            raise LoadError(f"{path}: corrupt header near byte {offset}") from exc
        if dtype != DTYPE_F32:
            raise LoadError(f"{path}: entry {name!r} has unknown dtype {dtype}")
        if name in tensors:
            raise LoadError(f"{path}: duplicate entry {name!r}")
        n_elems = 1
        for d in dims:
            n_elems *= d
        n_bytes = 4 * n_elems
        if offset + n_bytes > len(blob):
            raise LoadError(f"{path}: entry {name!r} payload truncated")
        arr = np.frombuffer(blob, dtype="<f4", count=n_elems, offset=offset).reshape(dims)
        tensors[name] = arr.copy()
        offset += n_bytes
    if offset != len(blob):
        raise LoadError(f"{path}: {len(blob) - offset} trailing bytes after last entry")
    return tensors


def write_container(path, tensors: Mapping[str, np.ndarray]) -> None:
    """Write entries in the mapping's iteration order."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(tensors)))
        for name, arr in tensors.items():
            # asarray, not ascontiguousarray: the latter promotes rank 0 to
            # rank 1, and tobytes() already serializes any layout in C order
            arr = np.asarray(arr, dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<BB", DTYPE_F32, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())
