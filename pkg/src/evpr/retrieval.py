"""Descriptor matrices, cosine similarity, and top-k shortlists.

Reference and query descriptors are stacked row-wise into float32
matrices with unit-norm rows, so the similarity matrix is simply
refs @ queries.T, computed block-wise with float64 accumulation. The
descriptor database file (magic ``EVPD``) persists the reference matrix
together with the pooling gamma and a 32-byte provider fingerprint;
loading rejects fingerprint mismatches unless overridden.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    BadArchiveHeader,
    DimensionMismatch,
    ManifestMismatch,
    QueryOutOfRange,
    TruncatedRecord,
    VersionUnsupported,
)

DEFAULT_TOP_K = 50
_DB_MAGIC = b"EVPD"
_DB_VERSION = 1
_DB_HEADER = struct.Struct("<4sHQIf32s")


@dataclass(frozen=True)
class DescriptorMatrix:
    """N unit-norm descriptors as rows; row i belongs to frame id i."""

    rows: np.ndarray
    side: str = "reference"

    def __post_init__(self):
        if self.rows.ndim != 2:
            raise DimensionMismatch(f"descriptor matrix must be 2-d, got {self.rows.shape}")

    @property
    def count(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def validate_norms(self, tol: float = 1e-6) -> None:
        if self.count == 0:
            return
        norms = np.linalg.norm(self.rows.astype(np.float64), axis=1)
        worst = float(np.abs(norms - 1.0).max())
        if worst > tol:
            raise DimensionMismatch(f"rows are not unit-norm (worst deviation {worst:.2e})")

    @classmethod
    def from_descriptors(cls, vectors, side: str = "reference") -> "DescriptorMatrix":
        rows = np.stack([np.asarray(v, dtype=np.float32) for v in vectors]) \
            if len(vectors) else np.empty((0, 0), dtype=np.float32)
        return cls(rows=rows, side=side)


@dataclass(frozen=True)
class SimilarityMatrix:
    """Cosine similarities, shape (N_ref, N_query), float32."""

    data: np.ndarray

    @property
    def n_ref(self) -> int:
        return self.data.shape[0]

    @property
    def n_query(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class Shortlist:
    """Top-k candidates for one query: (ref_id, score), scores descending."""

    query_id: int
    candidates: list[tuple[int, float]]

    def ids(self) -> list[int]:
        return [ref_id for ref_id, _ in self.candidates]


def build_similarity(refs: DescriptorMatrix, queries: DescriptorMatrix,
                     tile: int = 256) -> SimilarityMatrix:
    """Compute refs @ queries.T block-wise, f64 accumulation, f32 storage."""
    if refs.dim != queries.dim:
        raise DimensionMismatch(
            f"descriptor dims differ: {refs.dim} vs {queries.dim}")
    out = np.empty((refs.count, queries.count), dtype=np.float32)
    q64 = queries.rows.astype(np.float64)
    for i in range(0, refs.count, tile):
        r64 = refs.rows[i:i + tile].astype(np.float64)
        for j in range(0, queries.count, tile):
            out[i:i + tile, j:j + tile] = r64 @ q64[j:j + tile].T
    if out.size and (np.abs(out) > 1.0 + 1e-6).any():
        raise DimensionMismatch("similarity outside [-1, 1]; inputs not normalized?")
    return SimilarityMatrix(out)


def top_k(similarity: SimilarityMatrix, query_id: int, k: int = DEFAULT_TOP_K) -> Shortlist:
    """The k highest-similarity references for one query column.

    Sorted by score descending; ties go to the lower reference id. k is
    clamped to the reference count.
    """
    if not 0 <= query_id < similarity.n_query:
        raise QueryOutOfRange(query_id, similarity.n_query)
    if k < 1:
        raise ValueError("k must be >= 1")
    column = similarity.data[:, query_id]
    k = min(k, similarity.n_ref)
    ids = np.arange(similarity.n_ref)
    order = np.lexsort((ids, -column.astype(np.float64)))[:k]
    return Shortlist(query_id=query_id,
                     candidates=[(int(i), float(column[i])) for i in order])


def save_descriptor_db(path: str, matrix: DescriptorMatrix, gamma: float,
                       fingerprint: bytes) -> None:
    """Persist the reference descriptor matrix (magic EVPD)."""
    if len(fingerprint) != 32:
        raise ValueError("provider fingerprint must be 32 bytes")
    rows = np.ascontiguousarray(matrix.rows, dtype="<f4")
    header = _DB_HEADER.pack(_DB_MAGIC, _DB_VERSION, matrix.count,
                             matrix.dim, gamma, fingerprint)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(rows.tobytes())


def load_descriptor_db(path: str, expect_fingerprint: bytes | None = None,
                       allow_mismatch: bool = False) -> tuple[DescriptorMatrix, float, bytes]:
    """Load a descriptor database; returns (matrix, gamma, fingerprint).

    When ``expect_fingerprint`` is given and differs from the stored one,
    raises ManifestMismatch unless ``allow_mismatch`` is set.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _DB_MAGIC:
        raise BadArchiveHeader(f"{path}: bad descriptor database magic")
    if len(data) < _DB_HEADER.size:
        raise TruncatedRecord(f"{path}: truncated database header")
    _, version, count, dim, gamma, fingerprint = _DB_HEADER.unpack_from(data)
    if version != _DB_VERSION:
        raise VersionUnsupported(f"database version {version}, supported: {_DB_VERSION}")
    payload = data[_DB_HEADER.size:]
    if len(payload) != count * dim * 4:
        raise TruncatedRecord(f"{path}: expected {count * dim * 4} payload bytes, "
                              f"got {len(payload)}")
    rows = np.frombuffer(payload, dtype="<f4").reshape(count, dim).copy()
    if expect_fingerprint is not None and fingerprint != expect_fingerprint:
        if not allow_mismatch:
            raise ManifestMismatch(
                "descriptor database was built with a different global provider "
                "(pass the override flag to load anyway)")
    return DescriptorMatrix(rows=rows, side="reference"), float(gamma), fingerprint
