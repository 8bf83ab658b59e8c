"""End-to-end commands behind the CLI: baseline sweep, evaluation, report."""

from __future__ import annotations

import logging
from typing import Optional

import numpy as np

from . import evaluation as ev
from .cnn import extract_features, load_checkpoint
from .deepcluster import project
from .errors import MissingArtifactError
from .ingest import save_labels
from .kmeans import assign, kmeans
from .pca import components_for_variance, evr, flatten, pca_fit, pca_transform
from .runlog import RunDir, read_csv, write_csv

log = logging.getLogger(__name__)

SUMMARY_FIELDS = ["model", "components_95", "components_used", "k", "silhouette", "nmi"]


def reduction_ratio(n_baseline: int, n_cnn: int) -> float:
    """Fraction of baseline components saved by the CNN representation."""
    return 1.0 - n_cnn / n_baseline


def _write_evr(run, subdir, model):
    e = evr(model)
    path = run.path(subdir, "evr.csv")
    write_csv(path, ["component", "evr", "cumulative"],
              ((i + 1, float(v), float(c)) for i, (v, c) in enumerate(zip(e, np.cumsum(e)))))
    run.register(f"{subdir}/evr", "evr", path)


def _write_vat(run, subdir, features, subsample, seed):
    count = min(subsample, features.shape[0])
    d, _ = ev.pairwise_distances(features, count, seed)
    res = ev.vat(d)
    for name, m in (("vat", res.reordered), ("ivat", res.ivat)):
        p = run.path(subdir, f"{name}.pgm")
        ev.render_matrix(m, p)
        run.register(f"{subdir}/{name}", "pgm", p)


def _write_bands(run, subdir, tiles, labels, k):
    hist = ev.band_histogram(tiles, labels, k=k)
    p = run.path(subdir, "band_histogram.csv")
    write_csv(p, ["cluster"] + [f"band_{b}" for b in range(hist.shape[1])],
              ([c] + row.tolist() for c, row in enumerate(hist)))
    run.register(f"{subdir}/band_histogram", "histogram", p)
    return hist


def _write_summary(run, subdir, row):
    p = run.path(subdir, "summary.csv")
    write_csv(p, SUMMARY_FIELDS, [[row.get(f, "") for f in SUMMARY_FIELDS]])
    run.register(f"{subdir}/summary", "summary", p)


def run_baseline(run: RunDir, tiles, k_min=2, k_max=30, components: Optional[int] = None,
                 variance=0.95, labels=None, subsample_vat=ev.DEFAULT_VAT_SUBSAMPLE,
                 subsample_sil=ev.DEFAULT_SILHOUETTE_SUBSAMPLE, pca_max_rows=20000, seed=0):
    """Flatten -> PCA -> K-means sweep over ``k_min..k_max``.

    The clustering space keeps ``components`` leading components, or as many
    as needed for ``variance`` of the EVR when not given. Returns the summary
    row as a dict.
    """
    X = flatten(tiles)
    rows = min(X.shape[0], pca_max_rows) if pca_max_rows else X.shape[0]
    full = pca_fit(X, min(rows - 1, X.shape[1]), max_rows=pca_max_rows, seed=seed)
    _write_evr(run, "baseline", full)
    n95 = components_for_variance(full, variance)
    n = components or n95
    Z = pca_transform(full.truncate(n), X)
    log.info("baseline: %d components for %.2f EVR, clustering on %d", n95, variance, n)

    sweep = []
    best = None
    for k in range(k_min, k_max + 1):
        km = kmeans(Z, k, seed=seed)
        sil = ev.silhouette(Z, km.assignments, subsample_sil, seed)
        score = ev.nmi(km.assignments, labels) if labels is not None else ""
        sweep.append([k, sil, km.inertia, score])
        if best is None or sil > best[1]:
            best = (k, sil, score, km.assignments)
    p = run.path("baseline", "silhouette.csv")
    write_csv(p, ["k", "silhouette", "inertia", "nmi"], sweep)
    run.register("baseline/silhouette", "silhouette", p)

    k_best, sil_best, nmi_best, lab_best = best
    p = run.path("baseline", "labels.csv")
    save_labels(lab_best, p)
    run.register("baseline/labels", "labels", p)
    _write_bands(run, "baseline", tiles, lab_best, k_best)
    _write_vat(run, "baseline", Z, subsample_vat, seed)
    row = {"model": "baseline", "components_95": n95, "components_used": n, "k": k_best,
           "silhouette": sil_best, "nmi": nmi_best}
    _write_summary(run, "baseline", row)
    return row


def run_evaluate(run: RunDir, checkpoint, tiles, labels=None, variance=0.95,
                 subsample_vat=ev.DEFAULT_VAT_SUBSAMPLE,
                 subsample_sil=ev.DEFAULT_SILHOUETTE_SUBSAMPLE, whiten=False,
                 l2_normalize=True, seed=0):
    """Score a trained checkpoint on a tile set.

    Cluster labels come from the checkpoint's PCA reducer and centroids.
    """
    ck = load_checkpoint(checkpoint)
    feats = extract_features(ck.model, tiles)
    full = pca_fit(feats, min(feats.shape[0] - 1, feats.shape[1]), max_rows=None)
    _write_evr(run, "evaluate", full)
    n95 = components_for_variance(full, variance)
    if ck.pca is None or ck.centroids is None:
        raise MissingArtifactError(f"{checkpoint}: checkpoint has no PCA/centroid sections")
    z = project(ck.pca, feats, whiten, l2_normalize)
    pred = assign(z, ck.centroids)
    k = ck.centroids.shape[0]
    sil = ev.silhouette(z, pred, subsample_sil, seed) if np.unique(pred).size > 1 else float("nan")
    score = ev.nmi(pred, labels) if labels is not None else ""

    p = run.path("evaluate", "labels.csv")
    save_labels(pred, p)
    run.register("evaluate/labels", "labels", p)
    _write_bands(run, "evaluate", tiles, pred, k)
    _write_vat(run, "evaluate", z, subsample_vat, seed)
    for c in range(k):
        if np.any(pred == c):
            p = run.path("evaluate", f"average_{c:02d}.pgm")
            ev.render_matrix(ev.average_spectrogram(tiles, pred, c), p)
            run.register(f"evaluate/average_{c:02d}", "pgm", p)
    row = {"model": "deepcluster", "components_95": n95, "components_used": ck.pca.n_components,
           "k": k, "silhouette": sil, "nmi": score}
    _write_summary(run, "evaluate", row)
    return row


def sweep_report(run: RunDir):
    """Compare baseline and CNN outputs of a run directory in ``report.csv``."""
    need = [run.root / "baseline" / "summary.csv", run.root / "baseline" / "silhouette.csv",
            run.root / "evaluate" / "summary.csv"]
    missing = [str(p) for p in need if not p.exists()]
    if missing:
        raise MissingArtifactError(f"missing artifacts: {', '.join(missing)}")
    base = read_csv(need[0])[0]
    sweep = {int(r["k"]): r for r in read_csv(need[1])}
    cnn = read_csv(need[2])[0]
    n_base, n_cnn = int(base["components_95"]), int(cnn["components_95"])
    k_cnn = int(cnn["k"])
    base_same_k = sweep[k_cnn]["nmi"] if k_cnn in sweep else ""
    rows = [
        ["baseline", n_base, base["k"], base["silhouette"], base["nmi"], base_same_k, ""],
        ["deepcluster", n_cnn, cnn["k"], cnn["silhouette"], cnn["nmi"], cnn["nmi"],
         reduction_ratio(n_base, n_cnn)],
    ]
    p = run.path("report.csv")
    write_csv(p, ["model", "components_95", "best_k", "best_silhouette", "nmi",
                  "nmi_at_cnn_k", "reduction"], rows)
    run.register("report", "report", p)
    return rows
