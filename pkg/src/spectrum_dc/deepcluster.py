"""Alternating clustering / training loop.

Each epoch extracts CNN features, reduces them with a freshly fitted PCA,
clusters the result with K-means, and trains the network for one pass on
the cluster ids as targets. The classification head is reinitialized every
epoch because cluster ids carry no meaning from one clustering to the next.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.optimize import linear_sum_assignment

from .cnn import (
    CnnModel,
    TrainConfig,
    build_model,
    extract_features,
    reinit_head,
    save_checkpoint,
    train_step,
)
from .errors import ConfigError, DegenerateFeaturesError, InterruptError, ShapeError
from .kmeans import ClusterModel, kmeans
from .pca import PcaModel, pca_fit, pca_transform

log = logging.getLogger(__name__)

WHITEN_EPS = 1e-8


@dataclass
class DeepClusterConfig:
    k: int = 10
    n_components: int = 32
    epochs: int = 200
    l2_normalize: bool = True
    whiten: bool = False
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    arch: str = "reduced"
    feature_batch: int = 256
    kmeans_max_iter: int = 300
    kmeans_tol: float = 1e-6

    def validate(self, feature_dim: Optional[int] = None):
        if self.k < 2:
            raise ConfigError("K must be >= 2")
        if self.n_components < 1:
            raise ConfigError("N must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if feature_dim is not None and self.n_components > feature_dim:
            raise ConfigError(f"N={self.n_components} exceeds the feature dimension {feature_dim}")
        self.train.validate()


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    inertia: float
    cluster_sizes: list
    label_churn: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def append(self, rec: EpochRecord):
        self.records.append(rec)

    def to_csv(self, path, k: int) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "mean_loss", "inertia", "churn"] + [f"size_{i}" for i in range(k)])
            for r in self.records:
                churn = "" if np.isnan(r.label_churn) else repr(r.label_churn)
                w.writerow([r.epoch, repr(r.mean_loss), repr(r.inertia), churn] + list(r.cluster_sizes))


@dataclass
class DeepClusterResult:
    model: CnnModel
    history: TrainHistory
    clusters: ClusterModel
    pca: PcaModel


def label_churn(previous, current) -> float:
    """Fraction of samples that change cluster under the best one-to-one id matching."""
    previous = np.asarray(previous)
    current = np.asarray(current)
    if previous.shape != current.shape:
        raise ShapeError("labelings differ in length")
    _, ip = np.unique(previous, return_inverse=True)
    _, ic = np.unique(current, return_inverse=True)
    table = np.zeros((ip.max() + 1, ic.max() + 1))
    np.add.at(table, (ip, ic), 1.0)
    rows, cols = linear_sum_assignment(table, maximize=True)
    return float(1.0 - table[rows, cols].sum() / previous.size)


def project(pca: PcaModel, features, whiten=False, l2_normalize=True) -> np.ndarray:
    """Map features through a fitted reducer, optionally whitening and L2-normalizing rows.

    Zero rows stay zero under normalization.
    """
    z = pca_transform(pca, features)
    if whiten:
        z = z / np.sqrt(pca.explained_variance + WHITEN_EPS)
    if l2_normalize:
        norms = np.linalg.norm(z, axis=1, keepdims=True)
        z = np.divide(z, norms, out=np.zeros_like(z), where=norms > 0)
    return z


def reduce_features(features, n_components, whiten=False, l2_normalize=True):
    """Fit a fresh PCA reducer and project; returns ``(reduced, pca_model)``."""
    pca = pca_fit(features, n_components, max_rows=None)
    if not pca.total_variance > 0:
        raise DegenerateFeaturesError("CNN features collapsed to a single point")
    return project(pca, features, whiten, l2_normalize), pca


def balanced_order(labels, k, rng) -> np.ndarray:
    """Index order drawing (about) equally from every non-empty cluster, ``len(labels)`` long."""
    n = labels.size
    groups = [np.flatnonzero(labels == c) for c in range(k)]
    groups = [g for g in groups if g.size]
    per = n // len(groups) + 1
    picks = [rng.choice(g, per, replace=g.size < per) for g in groups]
    idx = np.concatenate(picks)
    rng.shuffle(idx)
    return idx[:n]


def _derived_seed(seed, *path) -> int:
    return int(np.random.SeedSequence([seed, *path]).generate_state(1)[0])


def cluster_features(model: CnnModel, tiles, cfg: DeepClusterConfig, epoch_index: int):
    """Features -> PCA -> normalization -> K-means; returns ``(ClusterModel, PcaModel)``."""
    feats = extract_features(model, tiles, cfg.feature_batch)
    z, pca = reduce_features(feats, cfg.n_components, cfg.whiten, cfg.l2_normalize)
    if pca.input_dim != model.feature_dim or z.shape[1] != cfg.n_components:
        raise ShapeError("reducer dimensions do not match the model")
    clusters = kmeans(z, cfg.k, seed=cfg.seed ^ epoch_index,
                      max_iter=cfg.kmeans_max_iter, tol=cfg.kmeans_tol)
    return clusters, pca


def train_epoch(model: CnnModel, tiles, labels, train_cfg: TrainConfig, rng) -> float:
    """One pass over ``len(tiles)`` samples; returns the sample-weighted mean loss."""
    x = getattr(tiles, "pixels", tiles)
    n = labels.size
    order = balanced_order(labels, model.k, rng) if train_cfg.balanced_sampling else rng.permutation(n)
    total = 0.0
    for s in range(0, n, train_cfg.batch_size):
        idx = order[s:s + train_cfg.batch_size]
        total += train_step(model, x[idx], labels[idx], train_cfg) * idx.size
    return total / n


def epoch_step(model: CnnModel, tiles, cfg: DeepClusterConfig, epoch_index: int,
               previous_labels=None):
    """Run one clustering + training epoch.

    Returns ``(pseudo_labels, record, clusters, pca)``; ``clusters`` and
    ``pca`` are the ones the labels came from.
    """
    clusters, pca = cluster_features(model, tiles, cfg, epoch_index)
    labels = clusters.assignments
    reinit_head(model, cfg.k, _derived_seed(cfg.seed, epoch_index, 1))
    rng = np.random.default_rng(_derived_seed(cfg.seed, epoch_index, 2))
    loss = train_epoch(model, tiles, labels, cfg.train, rng)
    churn = float("nan") if previous_labels is None else label_churn(previous_labels, labels)
    rec = EpochRecord(epoch_index, loss, clusters.inertia, clusters.sizes().tolist(), churn)
    return labels, rec, clusters, pca


def train(tiles, cfg: DeepClusterConfig, model: Optional[CnnModel] = None,
          checkpoint_dir=None, on_epoch: Optional[Callable] = None) -> DeepClusterResult:
    """Train for ``cfg.epochs`` epochs, then cluster once more with the final model.

    With ``checkpoint_dir`` set, ``last.spck`` is rewritten after every epoch
    and ``best.spck`` keeps the epoch with the lowest mean loss. Both carry
    the PCA reducer and centroids they were clustered with; after the final
    clustering ``last.spck`` holds the final model, reducer and centroids.
    """
    n = len(tiles)
    if n == 0:
        raise ShapeError("no tiles to train on")
    if n < cfg.k:
        raise ShapeError(f"{n} tiles cannot fill {cfg.k} clusters")
    if model is None:
        model = build_model(cfg.arch, tiles.window, k=cfg.k, seed=cfg.seed)
    cfg.validate(model.feature_dim)
    ckdir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckdir is not None:
        ckdir.mkdir(parents=True, exist_ok=True)
    history = TrainHistory()
    previous = None
    best = np.inf
    try:
        for epoch in range(cfg.epochs):
            labels, rec, clusters, pca = epoch_step(model, tiles, cfg, epoch, previous)
            history.append(rec)
            previous = labels
            log.info("epoch %d loss %.4f inertia %.4f churn %.4f", epoch, rec.mean_loss,
                     rec.inertia, rec.label_churn)
            if ckdir is not None:
                save_checkpoint(model, ckdir / "last.spck", pca, clusters.centroids)
                if rec.mean_loss < best:
                    best = rec.mean_loss
                    save_checkpoint(model, ckdir / "best.spck", pca, clusters.centroids)
            if on_epoch is not None:
                on_epoch(rec)
    except KeyboardInterrupt:
        last = ckdir / "last.spck" if ckdir is not None and len(history) else None
        raise InterruptError(f"interrupted after {len(history)} epochs", last, len(history)) from None
    clusters, pca = cluster_features(model, tiles, cfg, cfg.epochs)
    if ckdir is not None:
        save_checkpoint(model, ckdir / "last.spck", pca, clusters.centroids)
    return DeepClusterResult(model, history, clusters, pca)
