"""Property-based checks of the module invariants."""

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from spectrum_dc import evaluation as ev
from spectrum_dc.cnn import build_model, extract_features, make_architecture
from spectrum_dc.cnn import layers as L
from spectrum_dc.deepcluster import project, reduce_features
from spectrum_dc.ingest import (
    PsdMatrix,
    SynthConfig,
    TileSet,
    load_tiles,
    normalize,
    parse_classes,
    save_tiles,
    segment,
    synth_generate,
    tile_count,
)
from spectrum_dc.kmeans import assign, kmeans
from spectrum_dc.pca import evr, pca_fit

from oracles import covariance_pca, minimax_all_paths

seeds = st.integers(0, 2 ** 31 - 1)


def matrix(rng, rows, dim):
    return rng.normal(size=(rows, dim)) * rng.uniform(0.2, 5.0, dim) + rng.normal(size=dim) * 3


# -- ingest ------------------------------------------------------------------


@given(bins=st.integers(1, 40), steps=st.integers(1, 40), window=st.integers(2, 9), seed=seeds)
def test_segment_count_and_pixels(bins, steps, window, seed):
    rng = np.random.default_rng(seed)
    v = rng.normal(-90, 5, (bins, steps)).astype(np.float32)
    tiles = segment(PsdMatrix(v), window)
    assert len(tiles) == tile_count(bins, steps, window) == (bins // window) * (steps // window)
    for i in range(len(tiles)):
        b, t = tiles.band_index[i], tiles.time_index[i]
        np.testing.assert_array_equal(tiles.pixels[i], v[b * window:(b + 1) * window, t * window:(t + 1) * window])


@given(px=arrays(np.float32, st.tuples(st.integers(1, 5), st.just(3), st.just(3)),
                 elements=st.floats(-150, 0, width=32)))
def test_normalize_range(px):
    tiles = normalize(segment(PsdMatrix(px.reshape(-1, 3).T.copy()), 3))
    assert tiles.pixels.min() >= 0 and tiles.pixels.max() <= 1
    if tiles.norm_bounds[1] > tiles.norm_bounds[0]:
        assert tiles.pixels.min() == 0 and tiles.pixels.max() == 1


@settings(max_examples=20)
@given(seed=seeds, per=st.integers(0, 4), window=st.integers(4, 12))
def test_synth_pure_and_roundtrip(seed, per, window, tmp_path_factory):
    cfg = SynthConfig(window=window, tiles_per_class=per,
                      classes=parse_classes("noise_only,line_burst,dot_burst,edge_attenuated:10:0.5:low"),
                      seed=seed)
    a, la = synth_generate(cfg)
    b, lb = synth_generate(cfg)
    assert a.pixels.tobytes() == b.pixels.tobytes() and np.array_equal(la, lb)
    p = tmp_path_factory.mktemp("rt") / "t.sptl"
    save_tiles(a, p)
    back = load_tiles(p)
    assert back.pixels.tobytes() == a.pixels.tobytes()
    assert np.array_equal(back.band_index, a.band_index) and np.array_equal(back.time_index, a.time_index)


# -- pca ---------------------------------------------------------------------


@given(seed=seeds, rows=st.integers(3, 30), dim=st.integers(1, 10))
def test_pca_oracle_and_orthonormal(seed, rows, dim):
    rng = np.random.default_rng(seed)
    X = matrix(rng, rows, dim)
    n = min(rows - 1, dim)
    m = pca_fit(X, n)
    np.testing.assert_allclose(m.components @ m.components.T, np.eye(n), atol=1e-8)
    w, comps, _ = covariance_pca(X)
    np.testing.assert_allclose(m.explained_variance, w[:n], atol=1e-8 * max(1.0, w[0]))
    e = evr(m)
    assert np.all(np.diff(e) <= 1e-12)
    assert abs(e.sum() - 1.0) < 1e-9


@given(seed=seeds, rows=st.integers(4, 30), dim=st.integers(1, 8))
def test_pca_row_permutation_and_shift(seed, rows, dim):
    rng = np.random.default_rng(seed)
    X = matrix(rng, rows, dim)
    n = min(rows - 1, dim)
    base = pca_fit(X, n)
    perm = pca_fit(X[rng.permutation(rows)], n)
    shift = rng.normal(size=dim) * 10
    moved = pca_fit(X + shift, n)
    np.testing.assert_allclose(perm.explained_variance, base.explained_variance, atol=1e-8)
    np.testing.assert_allclose(moved.explained_variance, base.explained_variance, atol=1e-8)
    np.testing.assert_allclose(moved.mean, base.mean + shift, atol=1e-8)
    # compare well-separated components only; degenerate eigenvalues have no unique basis
    v = base.explained_variance
    gap = np.minimum(np.abs(np.diff(np.r_[np.inf, v])), np.abs(np.diff(np.r_[v, -np.inf])))
    ok = gap > 1e-3 * max(v[0], 1e-12)
    np.testing.assert_allclose(perm.components[ok], base.components[ok], atol=1e-6)
    np.testing.assert_allclose(moved.components[ok], base.components[ok], atol=1e-6)


# -- kmeans ------------------------------------------------------------------


@given(seed=seeds, n=st.integers(2, 40), k=st.integers(1, 6), dim=st.integers(1, 4))
def test_kmeans_monotone_and_covering(seed, n, k, dim):
    k = min(k, n)
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, dim))
    m = kmeans(X, k, seed=seed)
    h = np.array(m.inertia_history)
    assert np.all(np.diff(h) <= 1e-9 * max(1.0, h[0]))
    assert np.all(np.bincount(m.assignments, minlength=k) > 0)
    again = kmeans(X, k, seed=seed)
    assert np.array_equal(m.assignments, again.assignments)
    assert m.centroids.tobytes() == again.centroids.tobytes()


@given(seed=seeds, n=st.integers(1, 30), k=st.integers(1, 5), c=st.floats(0.01, 100))
def test_assign_equivariance(seed, n, k, c):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 3))
    C = rng.normal(size=(k, 3))
    lab = assign(X, C)
    p = rng.permutation(n)
    assert np.array_equal(assign(X[p], C), lab[p])
    # powers of two keep the scaled values exact
    s = 2.0 ** np.round(np.log2(c))
    assert np.array_equal(assign(X * s, C * s), lab)


# -- cnn ---------------------------------------------------------------------


@given(logits=arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(2, 8)),
                     elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(logits):
    np.testing.assert_allclose(L.softmax(logits).sum(axis=1), 1.0, atol=1e-9)


@given(n=st.integers(1, 5), k=st.integers(2, 12))
def test_uniform_cross_entropy_is_log_k(n, k):
    loss, _ = L.cross_entropy(np.zeros((n, k)), np.arange(n) % k)
    # averaging n equal terms can cost an ulp
    assert abs(loss - np.log(k)) <= 4 * np.finfo(float).eps * np.log(k)


@settings(max_examples=10)
@given(mult=st.integers(2, 8))
def test_declared_shapes_match_actual(mult):
    window = 4 * mult
    a = make_architecture("reduced", window, k=3, widths=(2, 3, 4), blocks_per_stage=1)
    m = build_model(a, seed=0)
    x = np.zeros((1, window, window, 1), np.float32)
    sizes = a.spatial_sizes()
    y, _ = L.conv_forward(x, m.params["stem.conv.weight"], a.stem_stride, a.stem_kernel // 2)
    assert y.shape[1] == sizes[0]
    for i, stride in enumerate(a.stage_strides):
        y, _ = L.conv_forward(np.zeros(y.shape[:3] + (m.params[f"stage{i + 1}.0.conv1.weight"].shape[1],)),
                              m.params[f"stage{i + 1}.0.conv1.weight"], stride, 1)
        assert y.shape[1] == sizes[i + 1]
    assert extract_features(m, np.zeros((2, window, window))).shape == (2, 4)


@settings(max_examples=10)
@given(seed=seeds)
def test_eval_forward_is_pure(seed):
    m = build_model("reduced", 16, k=3, seed=seed % 1000, widths=(2, 4, 4))
    x = np.random.default_rng(seed).random((3, 16, 16)).astype(np.float32)
    a = extract_features(m, x)
    b = extract_features(m, x)
    assert a.tobytes() == b.tobytes()


@settings(max_examples=10)
@given(seed=seeds)
def test_zeroed_residual_block_is_identity(seed):
    two = build_model("reduced", 16, k=3, seed=seed % 1000, widths=(2, 4, 4), blocks_per_stage=2)
    one = build_model("reduced", 16, k=3, seed=0, widths=(2, 4, 4), blocks_per_stage=1)
    for name in one.params:
        one.params[name] = two.params[name].copy()
    for name in one.buffers:
        one.buffers[name] = two.buffers[name].copy()
    for s in (1, 2):
        for conv in ("conv1", "conv2"):
            two.params[f"stage{s}.1.{conv}.weight"][...] = 0
    x = np.random.default_rng(seed).random((2, 16, 16)).astype(np.float32)
    np.testing.assert_allclose(extract_features(two, x), extract_features(one, x), rtol=1e-6, atol=1e-7)


# -- deepcluster reducer -----------------------------------------------------


@given(seed=seeds, rows=st.integers(5, 40), dim=st.integers(2, 10), n=st.integers(1, 4))
def test_l2_rows_unit_norm(seed, rows, dim, n):
    n = min(n, dim, rows - 1)
    f = np.random.default_rng(seed).normal(size=(rows, dim))
    z, pca = reduce_features(f, n)
    assert pca.input_dim == dim and z.shape == (rows, n)
    norms = np.linalg.norm(z, axis=1)
    nz = norms > 0
    np.testing.assert_allclose(norms[nz], 1.0, atol=1e-9)
    np.testing.assert_array_equal(project(pca, f), z)


# -- evaluation --------------------------------------------------------------


@given(seed=seeds, n=st.integers(1, 7))
def test_ivat_oracle(seed, n):
    rng = np.random.default_rng(seed)
    d, _ = ev.pairwise_distances(rng.normal(size=(n, 2)))
    res = ev.vat(d)
    assert sorted(res.permutation.tolist()) == list(range(n))
    assert np.all(res.ivat <= res.reordered)
    np.testing.assert_array_equal(res.ivat, minimax_all_paths(res.reordered))
    ident = np.arange(n)
    assert np.array_equal(res.reordered[np.ix_(ident, ident)], res.reordered)


@given(seed=seeds, n=st.integers(3, 60), k=st.integers(2, 5), c=st.floats(0.1, 100))
def test_silhouette_invariances(seed, n, k, c):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 2))
    lab = rng.integers(0, k, n)
    lab[:2] = [0, 1]
    s = ev.silhouette(X, lab, subsample=None)
    assert -1 <= s <= 1
    assert abs(ev.silhouette(X * c, lab, subsample=None) - s) < 1e-9
    perm = rng.permutation(k)
    assert abs(ev.silhouette(X, perm[lab], subsample=None) - s) < 1e-12


@given(seed=seeds, n=st.integers(1, 60), ka=st.integers(1, 5), kb=st.integers(1, 5))
def test_nmi_properties(seed, n, ka, kb):
    rng = np.random.default_rng(seed)
    a, b = rng.integers(0, ka, n), rng.integers(0, kb, n)
    v = ev.nmi(a, b)
    assert 0 <= v <= 1
    assert abs(v - ev.nmi(b, a)) < 1e-12
    assert abs(v - ev.nmi(rng.permutation(ka)[a], b)) < 1e-12


@given(seed=seeds, n=st.integers(1, 50), k=st.integers(1, 6), bands=st.integers(1, 5))
def test_band_histogram_total(seed, n, k, bands):
    rng = np.random.default_rng(seed)
    tiles = TileSet(2, np.zeros((n, 2, 2)), np.arange(n), rng.integers(0, bands, n))
    lab = rng.integers(0, k, n)
    h = ev.band_histogram(tiles, lab, k=k, num_bands=bands)
    assert h.sum() == n
    assert np.array_equal(h.sum(axis=1), np.bincount(lab, minlength=k))
