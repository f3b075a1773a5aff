"""User x target adjacency matrix and its spectral embeddings."""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, TextIO

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as splinalg

DENSE_SVD_LIMIT = 3000


@dataclass(frozen=True)
class AdjacencyMatrix:
    users: list[str]
    targets: list[str]
    entries: sparse.csr_matrix
    row_sums: np.ndarray
    col_sums: np.ndarray

    @property
    def n_edges(self) -> int:
        return int(self.entries.sum())

    @property
    def shape(self) -> tuple[int, int]:
        return self.entries.shape

    def dense(self) -> np.ndarray:
        return self.entries.toarray()

    @classmethod
    def from_edge_counts(cls, counts: dict[tuple[str, str], int]) -> "AdjacencyMatrix":
        counts = {k: v for k, v in counts.items() if v > 0}
        if not counts:
            raise ValueError("adjacency matrix needs at least one edge")
        users = sorted({u for u, _ in counts})
        targets = sorted({c for _, c in counts})
        uidx = {u: i for i, u in enumerate(users)}
        cidx = {c: j for j, c in enumerate(targets)}
        keys = sorted(counts)
        rows = np.fromiter((uidx[u] for u, _ in keys), dtype=np.int64, count=len(keys))
        cols = np.fromiter((cidx[c] for _, c in keys), dtype=np.int64, count=len(keys))
        vals = np.fromiter((counts[k] for k in keys), dtype=np.int64, count=len(keys))
        mat = sparse.csr_matrix((vals, (rows, cols)), shape=(len(users), len(targets)))
        return cls(
            users=users,
            targets=targets,
            entries=mat,
            row_sums=np.asarray(mat.sum(axis=1)).ravel(),
            col_sums=np.asarray(mat.sum(axis=0)).ravel(),
        )

    def restrict_users(self, keep: Iterable[str]) -> "AdjacencyMatrix":
        """Drop users outside ``keep`` and re-prune empty targets."""
        keep = set(keep)
        counts = {}
        coo = self.entries.tocoo()
        for i, j, v in zip(coo.row, coo.col, coo.data):
            if self.users[i] in keep:
                counts[(self.users[i], self.targets[j])] = int(v)
        return AdjacencyMatrix.from_edge_counts(counts)

    def to_csv(self, fh: TextIO) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user", "target", "count"])
        coo = self.entries.tocoo()
        for i, j, v in sorted(zip(coo.row, coo.col, coo.data)):
            w.writerow([self.users[i], self.targets[j], int(v)])

    @classmethod
    def from_csv(cls, fh: TextIO) -> "AdjacencyMatrix":
        return cls.from_edge_counts({(r["user"], r["target"]): int(r["count"]) for r in csv.DictReader(fh)})


@dataclass(frozen=True)
class UserEmbedding:
    coords: np.ndarray
    singular_values: np.ndarray
    right: np.ndarray | None = None


def build_adjacency(train_events) -> AdjacencyMatrix:
    """A[u, c] = number of training events from user u to target c."""
    counts = Counter((e.user, e.target) for e in train_events)
    if not counts:
        raise ValueError("cannot build an adjacency matrix from an empty event list")
    return AdjacencyMatrix.from_edge_counts(counts)


def _fix_signs(u: np.ndarray, vt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # deterministic orientation: the largest-magnitude entry of each left vector is positive
    pivot = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[pivot, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return u * signs, vt * signs[:, None]


def truncated_svd(matrix, rank: int, seed: int = 0) -> UserEmbedding:
    """Top-``rank`` singular triplets; ``coords`` holds the left singular vectors."""
    n, m = matrix.shape
    if not 1 <= rank <= min(n, m):
        raise ValueError(f"rank {rank} outside [1, {min(n, m)}]")
    if min(n, m) <= DENSE_SVD_LIMIT or rank >= min(n, m) - 1:
        dense = matrix.toarray() if sparse.issparse(matrix) else np.asarray(matrix, dtype=float)
        try:
            u, s, vt = np.linalg.svd(dense.astype(float), full_matrices=False)
        except np.linalg.LinAlgError as exc:
            raise RuntimeError(f"dense SVD did not converge: {exc}") from exc
        u, s, vt = u[:, :rank], s[:rank], vt[:rank]
    else:
        v0 = np.random.default_rng(seed).standard_normal(min(n, m))
        maxiter = 20 * min(n, m)
        try:
            u, s, vt = splinalg.svds(sparse.csr_matrix(matrix, dtype=float), k=rank, v0=v0, maxiter=maxiter)
        except splinalg.ArpackNoConvergence as exc:
            raise RuntimeError(f"truncated SVD did not converge after {maxiter} iterations") from exc
        order = np.argsort(s)[::-1]
        u, s, vt = u[:, order], s[order], vt[order]
    u, vt = _fix_signs(u, vt)
    return UserEmbedding(coords=u, singular_values=s, right=vt)


def bicluster_normalize(adj: AdjacencyMatrix) -> np.ndarray:
    """D_U^{-1/2} A D_C^{-1/2}, dense."""
    for name, sums in (("user", adj.row_sums), ("target", adj.col_sums)):
        bad = np.flatnonzero(sums <= 0)
        if bad.size:
            raise ValueError(f"{name} index {int(bad[0])} has zero degree")
    a = adj.dense().astype(float)
    return a / np.sqrt(adj.row_sums)[:, None] / np.sqrt(adj.col_sums)[None, :]


def embedding_rank(singular_values: np.ndarray, total: float | None = None, mass: float = 0.8, cap: int = 16) -> int:
    """Smallest rank whose squared singular values reach ``mass`` of ``total``.

    ``total`` defaults to the sum of the given squared values; pass the squared
    Frobenius norm when only the leading part of the spectrum is known.
    """
    sq = np.asarray(singular_values, dtype=float) ** 2
    frac = np.cumsum(sq) / (sq.sum() if total is None else total)
    return int(min(np.searchsorted(frac, mass - 1e-12) + 1, cap, sq.size))


def user_embedding(adj: AdjacencyMatrix, mass: float = 0.8, cap: int = 16, seed: int = 0) -> UserEmbedding:
    """Left singular vectors of A truncated by :func:`embedding_rank`."""
    svd = truncated_svd(adj.entries, min(cap, *adj.shape), seed=seed)
    total = float(adj.entries.multiply(adj.entries).sum())
    rank = embedding_rank(svd.singular_values, total, mass=mass, cap=cap)
    return UserEmbedding(svd.coords[:, :rank], svd.singular_values[:rank], svd.right[:rank])
