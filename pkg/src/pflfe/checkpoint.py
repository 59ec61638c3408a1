"""Portable parameter checkpoints.

Layout (all integers little-endian):

    b"PFLFE1" | u32 tensor count
    per tensor: u32 name length | utf-8 name | u32 rank | u64 dims... | f64 payload
"""

from __future__ import annotations

import os
import struct
from typing import Iterable, Mapping

import numpy as np

from .autograd import Tensor

MAGIC = b"PFLFE1"


class CheckpointError(ValueError):
    pass


def dumps(tensors: Iterable[tuple[str, Tensor]]) -> bytes:
    items = list(tensors.items() if isinstance(tensors, Mapping) else tensors)
    chunks = [MAGIC, struct.pack("<I", len(items))]
    for name, tensor in items:
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", tensor.ndim))
        chunks.append(struct.pack(f"<{tensor.ndim}Q", *tensor.shape))
        chunks.append(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())
    return b"".join(chunks)


def loads(blob: bytes) -> dict[str, Tensor]:
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError("bad magic; not a checkpoint file")
    offset = len(MAGIC)

    def take(fmt: str):
        nonlocal offset
        size = struct.calcsize(fmt)
        if offset + size > len(blob):
            raise CheckpointError("truncated checkpoint")
        values = struct.unpack_from(fmt, blob, offset)
        offset += size
        return values

    (count,) = take("<I")
    out: dict[str, Tensor] = {}
    for _ in range(count):
        (length,) = take("<I")
        name = blob[offset:offset + length].decode("utf-8")
        offset += length
        (rank,) = take("<I")
        dims = take(f"<{rank}Q") if rank else ()
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        if offset + 8 * n > len(blob):
            raise CheckpointError(f"truncated payload for {name!r}")
        data = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).astype(np.float64)
        offset += 8 * n
        out[name] = Tensor(data.reshape(dims))
    if offset != len(blob):
        raise CheckpointError(f"{len(blob) - offset} trailing bytes")
    return out


def save(path: str | os.PathLike, tensors) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(tensors))


def load(path: str | os.PathLike) -> dict[str, Tensor]:
    with open(path, "rb") as fh:
        return loads(fh.read())
