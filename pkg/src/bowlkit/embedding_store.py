"""Binary patch-embedding storage.

The on-disk layout keeps the toolkit independent of whatever model produced
the embeddings. A file is a small header followed by raw little-endian
float32 grids:

    magic     4 bytes   b"BWLE"
    version   u32       currently 1
    dim       u32       embedding dimension shared by every record
    records   image_id u64, grid_h u32, grid_w u32, patch_size u32,
              stride u32, then grid_h * grid_w * dim float32 values

Vectors are stored exactly as produced by the extractor; unit normalization
is applied on load when requested, so the numeric policy lives here in one
place. ``read_embeddings(write_embeddings(x))`` is bit-exact when loading
without normalization.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import (
    BadMagicError,
    DegenerateInputError,
    DimensionError,
    FormatError,
    TruncatedFileError,
    VersionError,
)

MAGIC = b"BWLE"
VERSION = 1

_FILE_HEADER = struct.Struct("<4sII")
_RECORD_HEADER = struct.Struct("<QIIII")

_ZERO_NORM_EPS = 1e-30


def normalize(vector: np.ndarray) -> np.ndarray:
    """Scale a vector to unit L2 norm, preserving direction and dtype.

    Raises DegenerateInputError for the zero vector.
    """
    v = np.asarray(vector)
    if v.dtype not in (np.float32, np.float64):
        v = v.astype(np.float64)
    if v.size == 0:
        raise DimensionError("cannot normalize an empty vector")
    norm = float(np.linalg.norm(v.astype(np.float64, copy=False)))
    if norm < _ZERO_NORM_EPS:
        raise DegenerateInputError("cannot normalize a zero vector")
    return (v / v.dtype.type(norm)).astype(v.dtype, copy=False)


@dataclass
class PatchGrid:
    """Per-image grid of d-dimensional patch embeddings with pixel geometry."""

    image_id: int
    grid_h: int
    grid_w: int
    patch_size: int
    stride: int
    dim: int
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.grid_h < 1 or self.grid_w < 1:
            raise FormatError("grid dimensions must be >= 1")
        if self.dim < 1:
            raise FormatError("embedding dimension must be >= 1")
        if self.stride < 1 or self.patch_size < 1:
            raise FormatError("patch_size and stride must be >= 1")
        if self.image_id < 0 or self.image_id > 0xFFFFFFFFFFFFFFFF:
            raise FormatError("image_id must fit in an unsigned 64-bit value")
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        expected = (self.grid_h, self.grid_w, self.dim)
        if self.data.shape != expected:
            raise FormatError(
                f"data shape {self.data.shape} does not match grid {expected}"
            )

    def normalized(self) -> "PatchGrid":
        """Copy of the grid with every patch vector scaled to unit norm."""
        norms = np.linalg.norm(self.data.astype(np.float64), axis=2)
        if np.any(norms < _ZERO_NORM_EPS):
            raise DegenerateInputError(
                f"grid for image {self.image_id} contains a zero patch vector"
            )
        data = (self.data / norms[:, :, None].astype(np.float32)).astype(np.float32)
        return replace(self, data=data)

    @property
    def pixel_width(self) -> int:
        return (self.grid_w - 1) * self.stride + self.patch_size

    @property
    def pixel_height(self) -> int:
        return (self.grid_h - 1) * self.stride + self.patch_size


def patch_rect(grid: PatchGrid, row: int, col: int) -> tuple[int, int, int, int]:
    """Pixel rectangle (x, y, w, h) covered by the patch at (row, col).

    Patches are anchored at the top-left: x = col * stride, y = row * stride.
    """
    if not (0 <= row < grid.grid_h and 0 <= col < grid.grid_w):
        raise IndexError(
            f"patch index ({row}, {col}) out of range for grid "
            f"{grid.grid_h}x{grid.grid_w}"
        )
    return (col * grid.stride, row * grid.stride, grid.patch_size, grid.patch_size)


def iter_patches(
    grids: Iterable[PatchGrid],
) -> Iterator[tuple[np.ndarray, int, int, int]]:
    """Yield (vector, image_id, row, col) in row-major stream order."""
    for grid in grids:
        for row in range(grid.grid_h):
            for col in range(grid.grid_w):
                yield grid.data[row, col], grid.image_id, row, col


def write_embeddings(grids: Sequence[PatchGrid], path) -> int:
    """Write grids to ``path`` in the BWLE layout. Returns the record count.

    All grids must share the same embedding dimension.
    """
    grids = list(grids)
    dims = {g.dim for g in grids}
    if len(dims) > 1:
        raise FormatError(f"mixed embedding dimensions in one file: {sorted(dims)}")
    dim = dims.pop() if dims else 0
    with open(path, "wb") as fh:
        fh.write(_FILE_HEADER.pack(MAGIC, VERSION, dim))
        for grid in grids:
            fh.write(
                _RECORD_HEADER.pack(
                    grid.image_id,
                    grid.grid_h,
                    grid.grid_w,
                    grid.patch_size,
                    grid.stride,
                )
            )
            fh.write(grid.data.tobytes())
    return len(grids)


def read_embeddings(path, normalize_vectors: bool = False) -> list[PatchGrid]:
    """Read every PatchGrid from a BWLE file, validating the layout.

    With ``normalize_vectors`` each patch vector is scaled to unit norm on
    load; otherwise the stored bytes are returned exactly.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _FILE_HEADER.size:
        raise TruncatedFileError(f"{path}: file shorter than header")
    magic, version, dim = _FILE_HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise VersionError(f"{path}: unsupported version {version}")
    grids = []
    offset = _FILE_HEADER.size
    while offset < len(raw):
        if offset + _RECORD_HEADER.size > len(raw):
            raise TruncatedFileError(f"{path}: truncated record header")
        image_id, grid_h, grid_w, patch_size, stride = _RECORD_HEADER.unpack_from(
            raw, offset
        )
        offset += _RECORD_HEADER.size
        count = grid_h * grid_w * dim
        nbytes = count * 4
        if offset + nbytes > len(raw):
            raise TruncatedFileError(
                f"{path}: payload for image {image_id} truncated "
                f"({len(raw) - offset} of {nbytes} bytes)"
            )
        data = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        offset += nbytes
        grid = PatchGrid(
            image_id=image_id,
            grid_h=grid_h,
            grid_w=grid_w,
            patch_size=patch_size,
            stride=stride,
            dim=dim,
            data=data.reshape(grid_h, grid_w, dim).copy(),
        )
        if normalize_vectors:
            grid = grid.normalized()
        grid.data.flags.writeable = False  # loaded grids are shared read-only
        grids.append(grid)
    return grids
