"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"PLGT" | u32 version | u32 n | n bytes UTF-8 JSON config
    u32 count | count x (u16 len, name, u8 dtype, u8 rank, rank x u32, payload)
    u32 CRC32 of everything above
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .config import dumps_json
from .exceptions import CheckpointError

MAGIC = b"PLGT"
VERSION = 1
DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("<i8")}
_TAGS = {dt: tag for tag, dt in DTYPES.items()}


def encode_checkpoint(config: dict, tensors: dict[str, np.ndarray]) -> bytes:
    blob = dumps_json(config).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _TAGS:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", _TAGS[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(data) < 16 or data[:4] != MAGIC:
        raise CheckpointError("not a PLGT checkpoint (bad magic or too short)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint CRC mismatch (truncated or corrupt file)")
    r = _Reader(body)
    r.take(4)
    version, n = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    config = json.loads(r.take(n).decode("utf-8"))
    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (ln,) = r.unpack("<H")
        name = r.take(ln).decode("utf-8")
        tag, rank = r.unpack("<BB")
        if tag not in DTYPES:
            raise CheckpointError(f"{name}: unknown dtype tag {tag}")
        shape = r.unpack(f"<{rank}I") if rank else ()
        dt = DTYPES[tag]
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(r.take(size), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after tensor directory")
    return config, tensors


def write_checkpoint(path: str | Path, config: dict, tensors: dict[str, np.ndarray]) -> None:
    """Atomically write; an interrupted save never clobbers the previous file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(config, tensors))
    os.replace(tmp, path)


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    return decode_checkpoint(Path(path).read_bytes())
