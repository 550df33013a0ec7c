"""Self-describing binary checkpoints.

Layout (all integers little-endian):

    magic   4 bytes  b"PFCK"
    version u32
    nblocks u32
    blocks  repeated: name_len u32, name utf-8, ndim u32, dims u32 each,
            then ndim-product float64 values
    crc     u32  CRC32 of every byte before it

A checkpoint is a flat mapping from names to float64 arrays.  Callers
namespace entries themselves (``model.param.head.W``, ``opt.m.head.W``,
``meta.epoch`` as a 0-d array), so one format serves models, optimizer
state, and bookkeeping alike.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import DataError, StateError

MAGIC = b"PFCK"
VERSION = 1


def save_checkpoint(path, blocks: dict[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(blocks))]
    for name, arr in blocks.items():
        # np.ascontiguousarray would promote 0-d arrays to shape (1,), which
        # breaks round-tripping scalar parameters, so request C order here.
        arr = np.asarray(arr, dtype=np.float64, order="C")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f8").tobytes())
    payload = b"".join(parts)
    payload += struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(payload)
    tmp.replace(path)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise StateError(f"checkpoint {path} does not exist")
    raw = path.read_bytes()
    if len(raw) < 16:
        raise DataError(f"checkpoint {path} is truncated ({len(raw)} bytes)")
    if raw[:4] != MAGIC:
        raise DataError(f"checkpoint {path} has bad magic {raw[:4]!r}")
    (stored_crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != stored_crc:
        raise DataError(f"checkpoint {path} failed CRC32 verification")
    version, nblocks = struct.unpack("<II", raw[4:12])
    if version != VERSION:
        raise DataError(f"checkpoint {path} has unsupported version {version}")

    blocks: dict[str, np.ndarray] = {}
    off = 12
    end = len(raw) - 4
    try:
        for _ in range(nblocks):
            (name_len,) = struct.unpack_from("<I", raw, off)
            off += 4
            name = raw[off : off + name_len].decode("utf-8")
            off += name_len
            (ndim,) = struct.unpack_from("<I", raw, off)
            off += 4
            dims = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
            nbytes = count * 8
            if off + nbytes > end:
                raise DataError(f"checkpoint {path}: block {name!r} runs past end of file")
            arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(dims)
            off += nbytes
            blocks[name] = arr.astype(np.float64)
    except (struct.error, UnicodeDecodeError) as exc:
        raise DataError(f"checkpoint {path} is corrupt: {exc}") from None
    if off != end:
        raise DataError(f"checkpoint {path}: {end - off} trailing bytes after last block")
    return blocks
