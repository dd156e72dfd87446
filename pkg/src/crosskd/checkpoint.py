"""Binary checkpoint container.

Layout (all integers and floats little-endian)::

    magic      5 bytes   b"AGKD1"
    count      uint32    number of entries
    then, per entry:
      name_len uint16
      name     name_len bytes, UTF-8
      ndim     uint8
      dims     ndim x uint32
      values   prod(dims) x float64, row-major

Entries keep the insertion order of the mapping they were written from.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import DataError

MAGIC = b"AGKD1"


def encode(state: Mapping[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<I", len(state))]
    for name, value in state.items():
        arr = np.ascontiguousarray(value, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def decode(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:5] != MAGIC:
        raise DataError("not a checkpoint: bad magic")
    pos = 5
    try:
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        state: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            dims = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            n = int(np.prod(dims)) if dims else 1
            values = np.frombuffer(blob, dtype="<f8", count=n, offset=pos)
            pos += 8 * n
            state[name] = values.astype(np.float64).reshape(dims)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise DataError("truncated checkpoint") from exc
    if pos != len(blob):
        raise DataError(f"checkpoint has {len(blob) - pos} trailing bytes")
    return state


def save_checkpoint(path: str | Path, state: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(state))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())
