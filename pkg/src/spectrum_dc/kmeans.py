"""K-means with k-means++ seeding and empty-cluster repair.

Distances are squared Euclidean; ties always go to the lowest centroid
index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError

DEFAULT_MAX_ITER = 300
DEFAULT_TOL = 1e-6


@dataclass
class ClusterModel:
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    iterations_run: int
    inertia_history: list = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignments, minlength=self.k)


def _check(X, centroids):
    X = np.asarray(X, dtype=np.float64)
    C = np.asarray(centroids, dtype=np.float64)
    if X.ndim != 2 or C.ndim != 2 or X.shape[1] != C.shape[1]:
        raise ShapeError(f"dimension mismatch: X {X.shape}, centroids {C.shape}")
    return X, C


def _sq_dist_exact(X, C, chunk=2 ** 22):
    out = np.empty((X.shape[0], C.shape[0]))
    step = max(1, chunk // max(1, C.size))
    for s in range(0, X.shape[0], step):
        d = X[s:s + step, None, :] - C[None, :, :]
        out[s:s + step] = np.einsum("nkd,nkd->nk", d, d)
    return out


def sq_distances(X, C):
    """Squared distances ``(rows, k)``.

    Uses the BLAS expansion, then recomputes directly any row whose best two
    candidates are within rounding distance so ties resolve exactly.
    """
    if C.shape[0] == 1 or X.shape[0] == 0:
        return _sq_dist_exact(X, C)
    xx = np.einsum("ij,ij->i", X, X)
    cc = np.einsum("ij,ij->i", C, C)
    d = np.maximum(xx[:, None] - 2.0 * (X @ C.T) + cc[None, :], 0.0)
    part = np.partition(d, 1, axis=1)
    scale = xx + cc.max()
    close = (part[:, 1] - part[:, 0]) <= 1e-9 * scale + 1e-300
    if np.any(close):
        d[close] = _sq_dist_exact(X[close], C)
    return d


def assign(X, centroids) -> np.ndarray:
    """Nearest-centroid label for each row of ``X``."""
    X, C = _check(X, centroids)
    if X.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    return np.argmin(sq_distances(X, C), axis=1).astype(np.int64)


def kmeanspp_init(X, k: int, seed: int) -> np.ndarray:
    """Pick ``k`` distinct rows of ``X`` by D^2 weighting.

    When every remaining point coincides with a chosen one the draw falls
    back to uniform over unchosen rows.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if k < 1 or n < k:
        raise ShapeError(f"need 1 <= k <= rows, got k={k}, rows={n}")
    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(n))]
    d2 = _sq_dist_exact(X, X[chosen[0]][None, :])[:, 0]
    taken = np.zeros(n, dtype=bool)
    taken[chosen[0]] = True
    for _ in range(1, k):
        w = np.where(taken, 0.0, d2)
        total = w.sum()
        if total > 0:
            idx = int(rng.choice(n, p=w / total))
        else:
            idx = int(rng.choice(np.flatnonzero(~taken)))
        chosen.append(idx)
        taken[idx] = True
        d2 = np.minimum(d2, _sq_dist_exact(X, X[idx][None, :])[:, 0])
    return X[chosen].copy()


def _repair(X, C, labels, d_best, rng):
    # move each empty centroid onto a random member of the largest cluster
    k = C.shape[0]
    counts = np.bincount(labels, minlength=k)
    for j in np.flatnonzero(counts == 0):
        big = int(np.argmax(counts))
        members = np.flatnonzero(labels == big)
        p = int(rng.choice(members))
        C[j] = X[p]
        labels[p] = j
        d_best[p] = 0.0
        counts[big] -= 1
        counts[j] += 1


def lloyd(X, centroids, max_iter: int = DEFAULT_MAX_ITER, tol: float = DEFAULT_TOL,
          seed: int = 0) -> ClusterModel:
    """Lloyd iterations from the given centroids.

    Stops when no centroid moves more than ``tol`` (Euclidean) or after
    ``max_iter`` updates. ``inertia_history`` holds the objective after every
    assignment; it never increases.
    """
    X, C = _check(X, centroids)
    if max_iter < 1 or tol < 0:
        raise ValueError("max_iter must be >= 1 and tol >= 0")
    k = C.shape[0]
    if X.shape[0] < k:
        raise ShapeError(f"{X.shape[0]} rows cannot fill {k} clusters")
    C = C.copy()
    rng = np.random.default_rng(seed)

    def step():
        d = sq_distances(X, C)
        labels = np.argmin(d, axis=1).astype(np.int64)
        d_best = d[np.arange(len(labels)), labels]
        _repair(X, C, labels, d_best, rng)
        return labels, float(d_best.sum())

    labels, inertia = step()
    history = [inertia]
    it = 0
    while it < max_iter:
        it += 1
        sums = np.zeros_like(C)
        np.add.at(sums, labels, X)
        counts = np.bincount(labels, minlength=k)
        new = sums / counts[:, None]
        shift = float(np.max(np.linalg.norm(new - C, axis=1)))
        C = new
        labels, inertia = step()
        history.append(inertia)
        if shift <= tol:
            break
    return ClusterModel(C, labels, inertia, it, history)


def kmeans(X, k: int, seed: int = 0, max_iter: int = DEFAULT_MAX_ITER,
           tol: float = DEFAULT_TOL) -> ClusterModel:
    X = np.asarray(X, dtype=np.float64)
    return lloyd(X, kmeanspp_init(X, k, seed), max_iter=max_iter, tol=tol, seed=seed)
