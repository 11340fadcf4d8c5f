"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"SSMAF\\0"                 magic
    u32                        format version
    u32 + bytes                configuration text, UTF-8
    u32                        tensor count
    per tensor:
        u32 + bytes            name, UTF-8
        u32                    rank
        u64 * rank             extents
        f64 * prod(extents)    values, C order

Tensors are written in sorted name order so identical state always gives
identical bytes.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"SSMAF\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config_text: str
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = VERSION


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    text = ckpt.config_text.encode("utf-8")
    out = [MAGIC, struct.pack("<II", ckpt.version, len(text)), text, struct.pack("<I", len(ckpt.arrays))]
    for name in sorted(ckpt.arrays):
        arr = np.asarray(ckpt.arrays[name], dtype="<f8", order="C")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack(f"<I{arr.ndim}Q", arr.ndim, *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data, self.pos, self.source = data, 0, source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.source}: truncated at byte {self.pos} (wanted {n} more)")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(data: bytes, source: str = "<bytes>") -> Checkpoint:
    r = _Reader(data, source)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
    version, text_len = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported format version {version}")
    text = r.take(text_len).decode("utf-8")
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}Q")
        n = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(r.take(8 * n), dtype="<f8").astype(float).reshape(shape)
    if r.pos != len(data):
        raise CheckpointError(f"{source}: {len(data) - r.pos} trailing bytes")
    return Checkpoint(text, arrays, version)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    data = encode_checkpoint(ckpt)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    return decode_checkpoint(data, os.fspath(path))
