"""On-disk formats: VOXG voxel grids, IMGF view images, and binvox.

VOXG: b"VOXG", u32 side S, then S**3 little-endian float32 values in x, y, z
(row-major) order. IMGF: b"IMGF", u32 H, u32 W, then H*W little-endian
float32 values.
"""

from __future__ import annotations

import re
import struct
from pathlib import Path

import numpy as np

VOXG_MAGIC = b"VOXG"
IMGF_MAGIC = b"IMGF"


class FormatError(ValueError):
    pass


def encode_voxg(grid: np.ndarray) -> bytes:
    grid = np.asarray(grid)
    if grid.ndim != 3 or len(set(grid.shape)) != 1:
        raise FormatError(f"VOXG stores cubic grids, got shape {grid.shape}")
    return VOXG_MAGIC + struct.pack("<I", grid.shape[0]) + np.ascontiguousarray(grid, dtype="<f4").tobytes()


def decode_voxg(blob: bytes) -> np.ndarray:
    if len(blob) < 8 or blob[:4] != VOXG_MAGIC:
        raise FormatError("bad VOXG magic at byte 0")
    (side,) = struct.unpack("<I", blob[4:8])
    expected = 8 + 4 * side**3
    if len(blob) != expected:
        raise FormatError(f"VOXG size mismatch: {len(blob)} bytes, expected {expected} for side {side}")
    return np.frombuffer(blob, dtype="<f4", offset=8).reshape(side, side, side).astype(np.float32)


def encode_imgf(image: np.ndarray) -> bytes:
    image = np.asarray(image)
    if image.ndim != 2:
        raise FormatError(f"IMGF stores 2-D images, got shape {image.shape}")
    h, w = image.shape
    return IMGF_MAGIC + struct.pack("<II", h, w) + np.ascontiguousarray(image, dtype="<f4").tobytes()


def decode_imgf(blob: bytes) -> np.ndarray:
    if len(blob) < 12 or blob[:4] != IMGF_MAGIC:
        raise FormatError("bad IMGF magic at byte 0")
    h, w = struct.unpack("<II", blob[4:12])
    expected = 12 + 4 * h * w
    if len(blob) != expected:
        raise FormatError(f"IMGF size mismatch: {len(blob)} bytes, expected {expected} for {h}x{w}")
    return np.frombuffer(blob, dtype="<f4", offset=12).reshape(h, w).astype(np.float32)


def write_voxg(path, grid: np.ndarray) -> None:
    Path(path).write_bytes(encode_voxg(grid))


def read_voxg(path) -> np.ndarray:
    return decode_voxg(Path(path).read_bytes())


def write_imgf(path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_imgf(image))


def read_imgf(path) -> np.ndarray:
    return decode_imgf(Path(path).read_bytes())


# binvox stores voxels with y varying fastest, then z, then x.


def _read_line(blob: bytes, pos: int) -> tuple[str, int]:
    end = blob.find(b"\n", pos)
    if end < 0:
        raise FormatError(f"binvox header truncated at byte {pos}")
    return blob[pos:end].decode("ascii", errors="replace").strip(), end + 1


def read_binvox(blob: bytes) -> np.ndarray:
    """Decode a binvox file into a binary (x, y, z) uint8 grid."""
    line, pos = _read_line(blob, 0)
    if not line.startswith("#binvox"):
        raise FormatError("bad magic at byte 0: expected '#binvox'")
    dims = None
    while True:
        start = pos
        line, pos = _read_line(blob, pos)
        if line == "data":
            break
        if line.startswith("dim"):
            parts = line.split()
            if len(parts) != 4 or not all(re.fullmatch(r"\d+", p) for p in parts[1:]):
                raise FormatError(f"malformed dim line at byte {start}: {line!r}")
            dims = tuple(int(p) for p in parts[1:])
        elif not (line.startswith("translate") or line.startswith("scale") or line == ""):
            raise FormatError(f"unexpected header line at byte {start}: {line!r}")
    if dims is None:
        raise FormatError(f"missing dim line before data at byte {pos}")
    if len(set(dims)) != 1:
        raise FormatError(f"non-cubic dims {dims} at byte {pos}")
    data = np.frombuffer(blob, dtype=np.uint8, offset=pos)
    if len(data) % 2:
        raise FormatError(f"odd RLE byte count {len(data)} starting at byte {pos}")
    values, counts = data[0::2], data[1::2].astype(np.int64)
    total = int(dims[0] * dims[1] * dims[2])
    if counts.sum() != total:
        raise FormatError(
            f"RLE decodes to {int(counts.sum())} voxels, dims {dims} need {total} (data at byte {pos})"
        )
    bad = np.flatnonzero(values > 1)
    if bad.size:
        raise FormatError(f"RLE value {values[bad[0]]} at byte {pos + 2 * int(bad[0])} is not 0/1")
    flat = np.repeat(values, counts)
    # index = x * (dz * dy) + z * dy + y
    return flat.reshape(dims[0], dims[2], dims[1]).transpose(0, 2, 1).astype(np.uint8)


def write_binvox(grid: np.ndarray, translate=(0.0, 0.0, 0.0), scale: float = 1.0) -> bytes:
    grid = (np.asarray(grid) > 0).astype(np.uint8)
    if grid.ndim != 3 or len(set(grid.shape)) != 1:
        raise FormatError(f"binvox writer expects a cubic grid, got {grid.shape}")
    d = grid.shape[0]
    header = (
        "#binvox 1\n"
        f"dim {d} {d} {d}\n"
        f"translate {translate[0]:g} {translate[1]:g} {translate[2]:g}\n"
        f"scale {scale:g}\n"
        "data\n"
    ).encode("ascii")
    flat = grid.transpose(0, 2, 1).ravel()
    out = bytearray()
    i = 0
    while i < len(flat):
        value = flat[i]
        run = 1
        while i + run < len(flat) and flat[i + run] == value and run < 255:
            run += 1
        out += bytes((int(value), run))
        i += run
    return header + bytes(out)
