"""Query subspace Q̂ built from prompt queries, and deviation of vectors from it."""

import logging
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg

log = logging.getLogger(__name__)

# Singular values at or below this fraction of σ₁ count as zero.
NUMERICAL_RANK_RTOL = 1e-10


@dataclass(frozen=True)
class QuerySubspace:
    """Top right-singular directions of a query matrix.

    `orthonormal_basis` holds only the numerically nonzero directions; `basis` is the
    r×d matrix diag(σ)·V with zero rows past the effective rank.
    """
    orthonormal_basis: np.ndarray  # (rank, dim)
    singular_values: np.ndarray    # (requested_rank,), trailing zeros past rank
    dim: int

    @property
    def rank(self) -> int:
        return self.orthonormal_basis.shape[0]

    @property
    def requested_rank(self) -> int:
        return self.singular_values.shape[0]

    @property
    def basis(self) -> np.ndarray:
        full = np.zeros((self.requested_rank, self.dim))
        full[: self.rank] = self.singular_values[: self.rank, None] * self.orthonormal_basis
        return full

    def truncated(self, rank: int) -> "QuerySubspace":
        """Leading `rank` directions of the same decomposition (nested subspaces)."""
        if not 1 <= rank <= self.requested_rank:
            raise ValueError(f"rank must be in [1, {self.requested_rank}], got {rank}")
        eff = min(rank, self.rank)
        return QuerySubspace(
            orthonormal_basis=self.orthonormal_basis[:eff].copy(),
            singular_values=self.singular_values[:rank].copy(),
            dim=self.dim,
        )


def _fix_signs(vt: np.ndarray) -> np.ndarray:
    """Flip each row so its largest-magnitude component is positive."""
    idx = np.argmax(np.abs(vt), axis=1)
    signs = np.sign(vt[np.arange(vt.shape[0]), idx])
    signs[signs == 0] = 1.0
    return vt * signs[:, None]


def build_subspace(queries: np.ndarray, rank: int) -> QuerySubspace:
    """Thin SVD of an n×d query matrix, keeping the top `rank` directions."""
    q = np.asarray(queries, dtype=np.float64)
    if q.ndim != 2 or q.size == 0:
        raise ValueError(f"queries must be a non-empty 2-D matrix, got shape {q.shape}")
    n, d = q.shape
    if not 1 <= rank <= d:
        raise ValueError(f"rank must be in [1, {d}], got {rank}")
    if not np.all(np.isfinite(q)):
        raise ValueError("queries contain non-finite values")

    _, sigma, vt = scipy.linalg.svd(q, full_matrices=False, lapack_driver="gesdd")
    vt = _fix_signs(vt)

    if sigma.size == 0 or sigma[0] == 0.0:
        numerical = 0
    else:
        numerical = int(np.count_nonzero(sigma > NUMERICAL_RANK_RTOL * sigma[0]))
    eff = min(rank, n, numerical)
    if eff < rank:
        log.warning(
            "Requested subspace rank %d exceeds numerical rank; using %d (n=%d, d=%d)",
            rank, eff, n, d,
        )

    singular = np.zeros(rank)
    singular[:eff] = sigma[:eff]
    return QuerySubspace(orthonormal_basis=vt[:eff].copy(), singular_values=singular, dim=d)


def stack_query_heads(query_heads: Sequence[np.ndarray]) -> np.ndarray:
    """Row-stack the queries of every query head served by one KV head (GQA)."""
    if not query_heads:
        raise ValueError("need at least one query head")
    return np.concatenate([np.asarray(q, dtype=np.float64) for q in query_heads], axis=0)


def _check_dim(q: np.ndarray, sub: QuerySubspace) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape[-1] != sub.dim:
        raise ValueError(f"vector dimension {q.shape[-1]} does not match subspace dimension {sub.dim}")
    return q


def project(q: np.ndarray, sub: QuerySubspace) -> np.ndarray:
    """Orthogonal projection onto span(Q̂). Accepts a vector or a stack of row vectors."""
    q = _check_dim(q, sub)
    u = sub.orthonormal_basis
    return (q @ u.T) @ u


def deviation(q: np.ndarray, sub: QuerySubspace) -> np.ndarray | float:
    """‖q − Proj(q)‖₂, per row when given a stack of vectors."""
    q = _check_dim(q, sub)
    residual = q - project(q, sub)
    dev = np.linalg.norm(residual, axis=-1)
    return float(dev) if np.ndim(dev) == 0 else dev


def normalize_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.where(norms > 0, norms, 1.0)


def deviation_curve(
    queries: np.ndarray,
    reference: np.ndarray,
    ranks: Iterable[int],
) -> list[float]:
    """Mean deviation of the normalized `queries` from subspaces of `reference`.

    One SVD of `reference` serves every rank, so the subspaces are nested and the
    curve is non-increasing.
    """
    ranks = list(ranks)
    if not ranks:
        return []
    full = build_subspace(reference, max(ranks))
    unit = normalize_rows(queries)
    return [float(np.mean(deviation(unit, full.truncated(r)))) for r in ranks]
