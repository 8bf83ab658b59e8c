"""Flattening, PCA and explained-variance analysis."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateDataError,
    EmptySetError,
    InsufficientModelError,
    RankWarning,
    ShapeError,
)

DEFAULT_MAX_ROWS = 20000


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray          # (D,)
    components: np.ndarray    # (N, D), orthonormal rows
    explained_variance: np.ndarray  # (N,), descending
    total_variance: float

    @property
    def input_dim(self) -> int:
        return self.mean.shape[0]

    @property
    def n_components(self) -> int:
        return self.components.shape[0]

    def truncate(self, n: int) -> "PcaModel":
        if not 1 <= n <= self.n_components:
            raise ShapeError(f"cannot keep {n} of {self.n_components} components")
        return PcaModel(self.mean, self.components[:n], self.explained_variance[:n], self.total_variance)


def flatten(tiles) -> np.ndarray:
    """Row-major flatten every tile into a row of length ``W*W``."""
    if len(tiles) == 0:
        raise EmptySetError("cannot flatten an empty tile set")
    return tiles.pixels.reshape(len(tiles), -1).astype(np.float64)


def _fix_signs(components):
    idx = np.argmax(np.abs(components), axis=1)
    signs = np.sign(components[np.arange(len(components)), idx])
    signs[signs == 0] = 1.0
    return components * signs[:, None]


def _complete_basis(basis, dim, count):
    """Append ``count`` unit vectors orthogonal to the rows of ``basis``."""
    q, _ = np.linalg.qr(np.concatenate([basis, np.eye(dim)], axis=0).T)
    return q[:, basis.shape[0]:basis.shape[0] + count].T


def pca_fit(X, n: int, max_rows: int | None = DEFAULT_MAX_ROWS, seed: int = 0) -> PcaModel:
    """Fit an ``n``-component PCA to the rows of ``X``.

    Variances use the ``rows - 1`` divisor. When ``dim > rows`` the spectrum
    comes from the ``rows x rows`` Gram matrix instead of an SVD of the data.
    If ``X`` has more than ``max_rows`` rows a seeded uniform subsample of
    that size is used. Components beyond the numerical rank get variance 0
    (with a :class:`RankWarning`) and an arbitrary orthonormal completion.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError("X must be a 2-D matrix")
    if max_rows is not None and X.shape[0] > max_rows:
        keep = np.sort(np.random.default_rng(seed).choice(X.shape[0], max_rows, replace=False))
        X = X[keep]
    rows, dim = X.shape
    if rows < 2:
        raise ShapeError("PCA needs at least 2 rows")
    if not 1 <= n <= min(rows, dim):
        raise ShapeError(f"n must be in [1, {min(rows, dim)}], got {n}")

    mean = X.mean(axis=0)
    Xc = X - mean
    total = float(np.sum(Xc * Xc) / (rows - 1))

    if dim > rows:
        gram = Xc @ Xc.T
        evals, evecs = np.linalg.eigh(gram)
        evals, evecs = evals[::-1], evecs[:, ::-1]
        sq = np.clip(evals, 0.0, None)
        sing = np.sqrt(sq)
        V = (Xc.T @ evecs[:, :n]) / np.where(sing[:n] > 0, sing[:n], 1.0)
        comps = V.T
    else:
        _, sing, vt = np.linalg.svd(Xc, full_matrices=False)
        sq = sing ** 2
        comps = vt[:n]
    var = sq[:n] / (rows - 1)

    # numerical rank relative to the leading singular value
    tol = max(rows, dim) * np.finfo(np.float64).eps * (sing[0] if sing.size else 0.0)
    rank = int(np.sum(sing > tol))
    if n > rank:
        warnings.warn(f"requested {n} components but data rank is {rank}", RankWarning, stacklevel=2)
        var = var.copy()
        var[rank:] = 0.0
        comps = np.concatenate([comps[:rank], _complete_basis(comps[:rank], dim, n - rank)], axis=0)
    comps = _fix_signs(comps)
    return PcaModel(mean, comps, var, total)


def pca_transform(model: PcaModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise ShapeError(f"expected rows of dim {model.input_dim}, got shape {X.shape}")
    return (X - model.mean) @ model.components.T


def pca_inverse(model: PcaModel, Z) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[1] != model.n_components:
        raise ShapeError(f"expected rows of dim {model.n_components}, got shape {Z.shape}")
    return model.mean + Z @ model.components


def evr(model: PcaModel) -> np.ndarray:
    """Explained variance ratio of each component."""
    if not model.total_variance > 0:
        raise DegenerateDataError("total variance is zero")
    return np.clip(model.explained_variance / model.total_variance, 0.0, 1.0)


def components_for_variance(model: PcaModel, threshold: float = 0.95) -> int:
    """Smallest number of leading components whose cumulative EVR reaches ``threshold``."""
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"threshold must be in (0, 1], got {threshold}")
    cum = np.cumsum(evr(model))
    # slack for the rounding in a full-spectrum cumulative sum
    hit = np.nonzero(cum >= threshold - 1e-10)[0]
    if hit.size == 0:
        raise InsufficientModelError(
            f"{model.n_components} components explain {cum[-1]:.4f} < {threshold} of the variance")
    return int(hit[0]) + 1
