"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"UMIF"                  magic
    u32                      format version (1)
    u32                      tensor count
    per tensor:
        u32 + bytes          UTF-8 name
        u32                  rank
        u64 * rank           dims
        f32 * prod(dims)     values, row-major
    u32 + bytes              UTF-8 metadata block, ``key=value`` per line

The trailing metadata block carries the run configuration and training
position so a checkpoint alone is enough to resume or evaluate.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

MAGIC = b"UMIF"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_checkpoint(tensors: Mapping[str, np.ndarray], meta: Mapping[str, str] | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    text = "".join(f"{k}={v}\n" for k, v in (meta or {}).items()).encode("utf-8")
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    return buf.getvalue()


def _read(stream: BinaryIO, n: int, what: str) -> bytes:
    pos = stream.tell()
    data = stream.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint reading {what} at byte {pos}")
    return data


def decode_checkpoint(blob: bytes) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    stream = io.BytesIO(blob)
    if _read(stream, 4, "magic") != MAGIC:
        raise CheckpointError("bad magic: not a UMIF checkpoint")
    version, count = struct.unpack("<II", _read(stream, 8, "header"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", _read(stream, 4, "name length"))
        name = _read(stream, name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", _read(stream, 4, "rank"))
        dims = struct.unpack(f"<{rank}Q", _read(stream, 8 * rank, "dims"))
        size = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(_read(stream, 4 * size, f"values of {name}"), dtype="<f4")
        tensors[name] = values.reshape(dims).astype(np.float32)
    (meta_len,) = struct.unpack("<I", _read(stream, 4, "metadata length"))
    text = _read(stream, meta_len, "metadata").decode("utf-8")
    meta = {}
    for line in text.splitlines():
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"malformed metadata line {line!r}")
        meta[key] = value
    if stream.read(1):
        raise CheckpointError(f"trailing bytes after metadata at byte {stream.tell() - 1}")
    return tensors, meta


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], meta: Mapping[str, str] | None = None) -> None:
    Path(path).write_bytes(encode_checkpoint(tensors, meta))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    return decode_checkpoint(Path(path).read_bytes())
