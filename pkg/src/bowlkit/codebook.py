"""Background exemplar codebook built by greedy streaming nearest neighbor.

Patches are consumed strictly in stream order. A patch whose maximum cosine
similarity to the current exemplars falls below the diversity threshold
becomes a new exemplar; otherwise it increments the nearest exemplar's
cluster count. The algorithm is order-dependent by construction, so only the
inner similarity scan is vectorized, never the stream.

Similarities during the build are accumulated in float64 so that decisions
(threshold comparisons and argmax) are reproducible against a plain
sequential scan. Exemplar vectors themselves are stored as float32 units.

Codebook files use the layout:

    magic     4 bytes   b"BWLX"
    version   u32       currently 1
    dim       u32
    lambda    f32       diversity threshold used for the build
    count     u32       number of exemplars
    records   embedding f32 * dim, count u64, image_id u64,
              row u32, col u32, insertion_index u64
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .embedding_store import normalize
from .errors import (
    BadMagicError,
    ConfigError,
    DimensionError,
    TruncatedFileError,
    VersionError,
)

MAGIC = b"BWLX"
VERSION = 1

_FILE_HEADER = struct.Struct("<4sIIfI")
_RECORD_TAIL = struct.Struct("<QQIIQ")

NEGATIVE_INFINITY = float("-inf")


@dataclass(frozen=True)
class Exemplar:
    """One codebook entry: a unit embedding plus its cluster bookkeeping."""

    embedding: np.ndarray
    count: int
    image_id: int
    row: int
    col: int
    insertion_index: int


class ExemplarSet:
    """Ordered exemplar collection with cached similarity matrices."""

    def __init__(self, exemplars: Sequence[Exemplar], lam: float, dim: int):
        if not -1.0 < lam < 1.0:
            raise ConfigError(f"lambda must be in (-1, 1), got {lam}")
        if dim < 1:
            raise DimensionError("exemplar dimension must be >= 1")
        # Coerced to float32 so save/load round-trips are bit-exact.
        self.lam = float(np.float32(lam))
        self.dim = int(dim)
        self.exemplars = list(exemplars)
        for ex in self.exemplars:
            if ex.embedding.shape != (dim,):
                raise DimensionError(
                    f"exemplar {ex.insertion_index} has dim "
                    f"{ex.embedding.shape}, set dim {dim}"
                )
        self._matrix32 = None
        self._matrix64 = None

    def __len__(self) -> int:
        return len(self.exemplars)

    @property
    def matrix(self) -> np.ndarray:
        """(n, dim) float32 matrix of exemplar embeddings in insertion order."""
        if self._matrix32 is None:
            if self.exemplars:
                self._matrix32 = np.stack([e.embedding for e in self.exemplars])
            else:
                self._matrix32 = np.empty((0, self.dim), dtype=np.float32)
        return self._matrix32

    @property
    def matrix64(self) -> np.ndarray:
        if self._matrix64 is None:
            self._matrix64 = self.matrix.astype(np.float64)
        return self._matrix64

    def counts(self) -> np.ndarray:
        return np.array([e.count for e in self.exemplars], dtype=np.uint64)


def s_max(query: np.ndarray, exemplar_set: ExemplarSet) -> float:
    """Maximum cosine similarity of ``query`` to the exemplar set.

    Returns -inf for an empty set so that any threshold in (-1, 1) admits
    the first patch.
    """
    q = np.asarray(query)
    if q.shape != (exemplar_set.dim,):
        raise DimensionError(
            f"query dim {q.shape} does not match set dim {exemplar_set.dim}"
        )
    if len(exemplar_set) == 0:
        return NEGATIVE_INFINITY
    q64 = normalize(q.astype(np.float32)).astype(np.float64)
    return float(np.max(exemplar_set.matrix64 @ q64))


def batch_s_max(
    queries: np.ndarray, exemplar_set: ExemplarSet, chunk: int = 8192
) -> np.ndarray:
    """Maximum cosine similarity for each row of ``queries`` (n, dim).

    Rows must be nonzero; they are normalized before the scan. The scan is a
    plain chunked float32 matrix product against the full exemplar matrix.
    """
    q = np.ascontiguousarray(queries, dtype=np.float32)
    if q.ndim != 2 or q.shape[1] != exemplar_set.dim:
        raise DimensionError(
            f"queries shape {q.shape} does not match set dim {exemplar_set.dim}"
        )
    if len(exemplar_set) == 0:
        return np.full(q.shape[0], NEGATIVE_INFINITY)
    norms = np.linalg.norm(q, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise DimensionError("batch_s_max requires nonzero query rows")
    q = q / norms
    mat_t = exemplar_set.matrix.T
    out = np.empty(q.shape[0], dtype=np.float32)
    for start in range(0, q.shape[0], chunk):
        stop = min(start + chunk, q.shape[0])
        out[start:stop] = (q[start:stop] @ mat_t).max(axis=1)
    return out.astype(np.float64)


def build_exemplars(
    patch_stream: Iterable[tuple[np.ndarray, int, int, int]], lam: float
) -> ExemplarSet:
    """Run the greedy streaming selection over (vector, image_id, row, col).

    A patch with maximum similarity below ``lam`` founds a new exemplar with
    count 1 (the founding patch is its own nearest neighbor); otherwise the
    nearest exemplar's count grows by 1, ties resolved to the earliest
    insertion.
    """
    if not -1.0 < lam < 1.0:
        raise ConfigError(f"lambda must be in (-1, 1), got {lam}")
    lam32 = float(np.float32(lam))

    dim = None
    capacity = 256
    mat64 = None
    embeddings32: list[np.ndarray] = []
    counts: list[int] = []
    provenance: list[tuple[int, int, int]] = []

    n = 0
    for vector, image_id, row, col in patch_stream:
        v32 = normalize(np.asarray(vector, dtype=np.float32))
        if dim is None:
            if v32.size == 0:
                raise DimensionError("patch vectors must have dim >= 1")
            dim = v32.shape[0]
            mat64 = np.empty((capacity, dim), dtype=np.float64)
        elif v32.shape != (dim,):
            raise DimensionError(
                f"patch dim {v32.shape} does not match stream dim {dim}"
            )
        q64 = v32.astype(np.float64)
        if n > 0:
            sims = mat64[:n] @ q64
            best = int(np.argmax(sims))  # first max = lowest insertion index
            if float(sims[best]) < lam32:
                best = -1
        else:
            best = -1
        if best < 0:
            if n == capacity:
                capacity *= 2
                grown = np.empty((capacity, dim), dtype=np.float64)
                grown[:n] = mat64[:n]
                mat64 = grown
            mat64[n] = q64
            embeddings32.append(v32)
            counts.append(1)
            provenance.append((image_id, row, col))
            n += 1
        else:
            counts[best] += 1

    if dim is None:
        dim = 1  # empty stream: dimension is unconstrained
    exemplars = [
        Exemplar(
            embedding=embeddings32[i],
            count=counts[i],
            image_id=provenance[i][0],
            row=provenance[i][1],
            col=provenance[i][2],
            insertion_index=i,
        )
        for i in range(len(embeddings32))
    ]
    return ExemplarSet(exemplars, lam=lam32, dim=dim)


def top_n(exemplar_set: ExemplarSet, n: int) -> ExemplarSet:
    """The ``n`` largest clusters, descending by count, ties to earlier insertion."""
    if n < 1:
        raise ConfigError(f"top_n requires n >= 1, got {n}")
    order = sorted(
        exemplar_set.exemplars, key=lambda e: (-e.count, e.insertion_index)
    )
    return ExemplarSet(order[:n], lam=exemplar_set.lam, dim=exemplar_set.dim)


def save_exemplars(exemplar_set: ExemplarSet, path) -> None:
    with open(path, "wb") as fh:
        fh.write(
            _FILE_HEADER.pack(
                MAGIC,
                VERSION,
                exemplar_set.dim,
                exemplar_set.lam,
                len(exemplar_set),
            )
        )
        for ex in exemplar_set.exemplars:
            fh.write(np.ascontiguousarray(ex.embedding, dtype="<f4").tobytes())
            fh.write(
                _RECORD_TAIL.pack(
                    ex.count, ex.image_id, ex.row, ex.col, ex.insertion_index
                )
            )


def load_exemplars(path) -> ExemplarSet:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _FILE_HEADER.size:
        raise TruncatedFileError(f"{path}: file shorter than header")
    magic, version, dim, lam, count = _FILE_HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise VersionError(f"{path}: unsupported version {version}")
    record_size = dim * 4 + _RECORD_TAIL.size
    expected = _FILE_HEADER.size + count * record_size
    if len(raw) != expected:
        raise TruncatedFileError(
            f"{path}: expected {expected} bytes for {count} exemplars, "
            f"got {len(raw)}"
        )
    exemplars = []
    offset = _FILE_HEADER.size
    for _ in range(count):
        embedding = np.frombuffer(raw, dtype="<f4", count=dim, offset=offset).copy()
        offset += dim * 4
        cnt, image_id, row, col, insertion_index = _RECORD_TAIL.unpack_from(
            raw, offset
        )
        offset += _RECORD_TAIL.size
        exemplars.append(
            Exemplar(
                embedding=embedding,
                count=cnt,
                image_id=image_id,
                row=row,
                col=col,
                insertion_index=insertion_index,
            )
        )
    return ExemplarSet(exemplars, lam=lam, dim=dim)
