"""Lloyd's k-means with farthest-point seeding."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractViolation


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia_history: list[float] = field(default_factory=list)
    n_iter: int = 0

    @property
    def inertia(self) -> float:
        return self.inertia_history[-1]


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=-1)


def farthest_point_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    idx = [int(rng.integers(len(X)))]
    d = ((X - X[idx[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        nxt = int(np.argmax(d))
        idx.append(nxt)
        d = np.minimum(d, ((X - X[nxt]) ** 2).sum(axis=1))
    return X[idx].copy()


def lloyd(
    vectors,
    k: int = 3,
    rng: np.random.Generator | None = None,
    max_iter: int = 100,
    tol: float = 1e-8,
) -> KMeansResult:
    vectors = [np.asarray(v, dtype=np.float64) for v in vectors]
    if len({v.shape for v in vectors}) > 1:
        raise ContractViolation("vectors must all have the same dimension")
    X = np.asarray(vectors, dtype=np.float64)
    if len(X) and X.ndim != 2:
        raise ContractViolation("vectors must all have the same dimension")
    if len(X) == 0:
        raise ContractViolation("need at least one vector")
    if not 1 <= k <= len(X):
        raise ContractViolation(f"k={k} must be in [1, {len(X)}]")
    rng = rng if rng is not None else np.random.default_rng(0)

    C = farthest_point_init(X, k, rng)
    history: list[float] = []
    assign = np.zeros(len(X), dtype=np.int64)
    it = 0
    for it in range(1, max_iter + 1):
        d = _sq_dists(X, C)
        assign = d.argmin(axis=1)
        # repair empty clusters with the point farthest from its own centroid
        for j in range(k):
            if not np.any(assign == j):
                own = d[np.arange(len(X)), assign]
                sizes = np.bincount(assign, minlength=k)
                own[sizes[assign] <= 1] = -1.0
                far = int(np.argmax(own))
                assign[far] = j
                C[j] = X[far]
                d[:, j] = ((X - C[j]) ** 2).sum(axis=1)
        history.append(float(d[np.arange(len(X)), assign].sum()))
        newC = np.stack([X[assign == j].mean(axis=0) for j in range(k)])
        shift = float(np.sqrt(((newC - C) ** 2).sum(axis=1)).max())
        C = newC
        if shift < tol:
            break
    final = float(((X - C[assign]) ** 2).sum())
    history.append(final)
    return KMeansResult(assign, C, history, it)


def kmeans3(vectors, k: int = 3, rng: np.random.Generator | None = None, max_iter: int = 100, tol: float = 1e-8):
    """Cluster ``vectors`` into ``k`` groups; returns ``(assignments, centroids)``."""
    res = lloyd(vectors, k, rng, max_iter, tol)
    return res.assignments, res.centroids
