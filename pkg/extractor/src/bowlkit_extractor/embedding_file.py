"""Writer and validator for the BWLE embedding wire format.

This mirrors the consumer's published layout byte for byte and is kept
free of any imports from the consumer package:

    magic     4 bytes   b"BWLE"
    version   u32       1
    dim       u32
    records   image_id u64, grid_h u32, grid_w u32, patch_size u32,
              stride u32, then grid_h * grid_w * dim little-endian float32
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"BWLE"
VERSION = 1

_FILE_HEADER = struct.Struct("<4sII")
_RECORD_HEADER = struct.Struct("<QIIII")


class EmbeddingFileError(Exception):
    pass


@dataclass
class GridRecord:
    image_id: int
    patch_size: int
    stride: int
    data: np.ndarray  # (grid_h, grid_w, dim) float32


class EmbeddingWriter:
    """Streams grid records to disk behind a fixed-dim header."""

    def __init__(self, path, dim):
        self._fh = open(path, "wb")
        self._dim = dim
        self._count = 0
        self._fh.write(_FILE_HEADER.pack(MAGIC, VERSION, dim))

    def add(self, record: GridRecord):
        data = np.ascontiguousarray(record.data, dtype="<f4")
        if data.ndim != 3 or data.shape[2] != self._dim:
            raise EmbeddingFileError(
                f"record shape {data.shape} does not match dim {self._dim}"
            )
        grid_h, grid_w, _ = data.shape
        self._fh.write(
            _RECORD_HEADER.pack(
                record.image_id, grid_h, grid_w, record.patch_size, record.stride
            )
        )
        self._fh.write(data.tobytes())
        self._count += 1

    def close(self) -> int:
        self._fh.close()
        return self._count

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def scan_file(path):
    """Validate structure and return per-record stats without keeping payloads.

    Returns (dim, records) where records are dicts with image_id, grid_h,
    grid_w, patch_size, stride, and the min/max L2 norm over the grid.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _FILE_HEADER.size:
        raise EmbeddingFileError(f"{path}: shorter than the file header")
    magic, version, dim = _FILE_HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise EmbeddingFileError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise EmbeddingFileError(f"{path}: unsupported version {version}")
    records = []
    offset = _FILE_HEADER.size
    while offset < len(raw):
        if offset + _RECORD_HEADER.size > len(raw):
            raise EmbeddingFileError(f"{path}: truncated record header")
        image_id, grid_h, grid_w, patch_size, stride = _RECORD_HEADER.unpack_from(
            raw, offset
        )
        offset += _RECORD_HEADER.size
        count = grid_h * grid_w * dim
        if offset + count * 4 > len(raw):
            raise EmbeddingFileError(
                f"{path}: truncated payload for image {image_id}"
            )
        data = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        offset += count * 4
        if grid_h < 1 or grid_w < 1 or dim < 1 or stride < 1:
            raise EmbeddingFileError(f"{path}: invalid geometry for {image_id}")
        norms = np.linalg.norm(
            data.reshape(grid_h * grid_w, dim).astype(np.float64), axis=1
        )
        records.append(
            {
                "image_id": image_id,
                "grid_h": grid_h,
                "grid_w": grid_w,
                "patch_size": patch_size,
                "stride": stride,
                "norm_min": float(norms.min()) if norms.size else 0.0,
                "norm_max": float(norms.max()) if norms.size else 0.0,
            }
        )
    return dim, records
