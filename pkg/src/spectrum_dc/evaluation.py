"""Clustering tendency and cluster quality measures.

VAT orders a dissimilarity matrix with a Prim-style traversal so that
compact groups show up as dark blocks on the diagonal; iVAT replaces each
entry with the minimax path distance, which sharpens those blocks.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import EmptyClusterError, ShapeError, SingleClusterError

DEFAULT_VAT_SUBSAMPLE = 500
DEFAULT_SILHOUETTE_SUBSAMPLE = 5000


@dataclass
class VatResult:
    permutation: np.ndarray
    reordered: np.ndarray
    ivat: Optional[np.ndarray] = None


def euclidean_distances(X, Y=None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    Y = X if Y is None else np.asarray(Y, dtype=np.float64)
    xx = np.einsum("ij,ij->i", X, X)
    yy = xx if Y is X else np.einsum("ij,ij->i", Y, Y)
    d2 = xx[:, None] - 2.0 * (X @ Y.T) + yy[None, :]
    return np.sqrt(np.maximum(d2, 0.0))


def subsample_indices(rows: int, count: Optional[int], seed: int) -> np.ndarray:
    """Sorted seeded uniform sample of ``count`` row indices (all rows if ``count >= rows``)."""
    if count is None or count >= rows:
        return np.arange(rows)
    return np.sort(np.random.default_rng(seed).choice(rows, count, replace=False))


def pairwise_distances(X, subsample: Optional[int] = None, seed: int = 0):
    """Euclidean dissimilarity matrix of a seeded subsample of rows.

    Returns ``(d, indices)``; ``d`` is exactly symmetric with a zero diagonal.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError("X must be a 2-D matrix")
    rows = X.shape[0]
    if subsample is not None and not 1 <= subsample <= rows:
        raise ShapeError(f"subsample must be in [1, {rows}], got {subsample}")
    idx = subsample_indices(rows, subsample, seed)
    d = euclidean_distances(X[idx])
    d = np.triu(d, 1)
    return d + d.T, idx


def vat_order(d) -> np.ndarray:
    """VAT visiting order of the samples in dissimilarity matrix ``d``."""
    d = np.asarray(d, dtype=np.float64)
    n = d.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    start = int(np.argmax(d) // n)
    order = [start]
    visited = np.zeros(n, dtype=bool)
    visited[start] = True
    nearest = d[start].copy()
    for _ in range(n - 1):
        cand = np.where(visited, np.inf, nearest)
        nxt = int(np.argmin(cand))
        order.append(nxt)
        visited[nxt] = True
        np.minimum(nearest, d[nxt], out=nearest)
    return np.asarray(order, dtype=np.int64)


def ivat_transform(d_ordered) -> np.ndarray:
    """Minimax path distances of an already VAT-ordered matrix."""
    d = np.asarray(d_ordered, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise ShapeError("expected a square matrix")
    n = d.shape[0]
    out = np.zeros_like(d)
    for r in range(1, n):
        j = int(np.argmin(d[r, :r]))
        out[r, :r] = np.maximum(d[r, j], out[j, :r])
        out[r, j] = d[r, j]
        out[:r, r] = out[r, :r]
    return out


def vat(d, ivat: bool = True) -> VatResult:
    d = np.asarray(d, dtype=np.float64)
    p = vat_order(d)
    reordered = d[np.ix_(p, p)]
    return VatResult(p, reordered, ivat_transform(reordered) if ivat else None)


def render_matrix(m, path) -> None:
    """Write ``m`` as an 8-bit binary PGM, min -> black, max -> white."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or not np.all(np.isfinite(m)):
        raise ShapeError("expected a finite 2-D matrix")
    lo, hi = (float(m.min()), float(m.max())) if m.size else (0.0, 0.0)
    if hi > lo:
        img = np.rint((m - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        img = np.zeros(m.shape, dtype=np.uint8)
    h, w = m.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    data = np.frombuffer(raw[pos + 1:], dtype=np.uint8)
    if maxval != 255 or data.size != w * h:
        raise ValueError(f"{path}: unexpected PGM payload")
    return data.reshape(h, w)


def _cluster_ids(labels):
    labels = np.asarray(labels).reshape(-1)
    ids, inv = np.unique(labels, return_inverse=True)
    return ids, inv.reshape(-1)


def silhouette_from_distances(d, labels) -> float:
    """Mean silhouette over samples from a full dissimilarity matrix.

    Members of singleton clusters score 0.
    """
    d = np.asarray(d, dtype=np.float64)
    ids, inv = _cluster_ids(labels)
    if d.shape != (inv.size, inv.size):
        raise ShapeError("distance matrix does not match labels")
    return float(np.mean(_silhouette_rows(d, inv, len(ids))))


def _silhouette_rows(d_rows, inv_cols, k, inv_rows=None):
    inv_rows = inv_cols if inv_rows is None else inv_rows
    counts = np.bincount(inv_cols, minlength=k).astype(np.float64)
    onehot = np.zeros((inv_cols.size, k))
    onehot[np.arange(inv_cols.size), inv_cols] = 1.0
    sums = d_rows @ onehot
    own = counts[inv_rows]
    rows = np.arange(inv_rows.size)
    a = sums[rows, inv_rows] / np.maximum(own - 1, 1)
    means = sums / counts
    means[rows, inv_rows] = np.inf
    b = means.min(axis=1)
    s = np.zeros(inv_rows.size)
    ok = own > 1
    denom = np.maximum(a, b)
    nz = ok & (denom > 0)
    s[nz] = (b[nz] - a[nz]) / denom[nz]
    return s


def silhouette(X, labels, subsample: Optional[int] = DEFAULT_SILHOUETTE_SUBSAMPLE,
               seed: int = 0, chunk: int = 1024) -> float:
    """Mean silhouette score of ``labels`` on feature rows ``X``.

    With ``subsample`` smaller than the row count, the score is computed on a
    seeded uniform subsample of samples (distances within the subsample).
    """
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels).reshape(-1)
    if X.ndim != 2 or X.shape[0] != labels.size:
        raise ShapeError("labels must align with rows of X")
    idx = subsample_indices(X.shape[0], subsample, seed)
    X, labels = X[idx], labels[idx]
    ids, inv = _cluster_ids(labels)
    if len(ids) < 2:
        raise SingleClusterError("silhouette needs at least 2 distinct labels")
    s = np.empty(inv.size)
    for start in range(0, inv.size, chunk):
        stop = min(start + chunk, inv.size)
        d = euclidean_distances(X[start:stop], X)
        d[np.arange(stop - start), np.arange(start, stop)] = 0.0
        s[start:stop] = _silhouette_rows(d, inv, len(ids), inv[start:stop])
    return float(s.mean())


def _entropy(counts):
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(labels_a, labels_b) -> float:
    """Mutual information normalized by the arithmetic mean of the two entropies."""
    a = np.asarray(labels_a).reshape(-1)
    b = np.asarray(labels_b).reshape(-1)
    if a.size != b.size or a.size == 0:
        raise ShapeError("labelings must have equal, nonzero length")
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ia.max() + 1, ib.max() + 1))
    np.add.at(table, (ia, ib), 1.0)
    ha, hb = _entropy(table.sum(axis=1)), _entropy(table.sum(axis=0))
    if ha == 0.0 and hb == 0.0:
        return 1.0
    if ha == 0.0 or hb == 0.0:
        return 0.0
    n = a.size
    nz = table > 0
    outer = np.outer(table.sum(axis=1), table.sum(axis=0))
    mi = float(np.sum(table[nz] / n * np.log(table[nz] * n / outer[nz])))
    return float(np.clip(mi / ((ha + hb) / 2.0), 0.0, 1.0))


def band_histogram(tiles, labels, k: Optional[int] = None,
                   num_bands: Optional[int] = None) -> np.ndarray:
    """``(K, bands)`` counts of tiles per cluster and frequency sub-band."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size != len(tiles):
        raise ShapeError(f"{labels.size} labels for {len(tiles)} tiles")
    k = k if k is not None else (int(labels.max()) + 1 if labels.size else 0)
    num_bands = num_bands if num_bands is not None else tiles.num_bands
    hist = np.zeros((k, num_bands), dtype=np.int64)
    np.add.at(hist, (labels, tiles.band_index), 1)
    return hist


def average_spectrogram(tiles, labels, cluster_id: int) -> np.ndarray:
    labels = np.asarray(labels).reshape(-1)
    if labels.size != len(tiles):
        raise ShapeError(f"{labels.size} labels for {len(tiles)} tiles")
    members = labels == cluster_id
    if not np.any(members):
        raise EmptyClusterError(f"cluster {cluster_id} has no members")
    return tiles.pixels[members].astype(np.float64).mean(axis=0)
