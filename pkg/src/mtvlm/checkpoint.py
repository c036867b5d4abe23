"""Flat binary checkpoints for parameter sets.

Layout: magic ``URSK``, then a little-endian u32 format version, then one
record per parameter in insertion order:

    u32 name length, UTF-8 name bytes,
    u32 rank, u32 extents[rank],
    little-endian float64 payload (C order).

The format is intentionally dumb: no compression, no alignment games, so a
checkpoint can be audited with ``xxd``.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .autograd import Parameter, ParameterSet
from .errors import ContractError

MAGIC = b"URSK"
VERSION = 1


def write_checkpoint(path: str | Path,
                     params: ParameterSet | dict[str, np.ndarray]) -> None:
    path = Path(path)
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    for name, p in params.items():
        raw = name.encode("utf-8")
        # asarray, not ascontiguousarray: the latter would write 0-d as (1,)
        arr = np.asarray(p.data if isinstance(p, Parameter) else p, dtype="<f8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    path.write_bytes(b"".join(chunks))


def read_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise ContractError(f"{path}: bad checkpoint magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    offset = 8
    while offset < len(blob):
        (nlen,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset:offset + nlen].decode("utf-8")
        offset += nlen
        (rank,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        shape = struct.unpack_from(f"<{rank}I", blob, offset)
        offset += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).copy()
        offset += 8 * count
        if name in out:
            raise ContractError(f"{path}: duplicate parameter {name!r}")
        out[name] = arr.reshape(shape)
    return out


def load_into(path: str | Path, params: ParameterSet, strict: bool = True) -> None:
    params.load_state(read_checkpoint(path), strict=strict)
