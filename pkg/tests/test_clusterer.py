import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from storerec.clusterer import (CodeMatrix, RankError, UnresolvedCollisionError, assign_codes, hamming_distance,
                                identifier_capacity, identifier_memory, kmeans_fit, load_cluster_models, pca_fit,
                                pca_transform, resolve_collisions, save_cluster_models)
from storerec.errors import ValidationError


def test_pca_against_full_spectrum(rng):
    X = rng.normal(size=(50, 8)) @ rng.normal(size=(8, 8))
    model = pca_fit(X, 3)
    assert np.allclose(model.components.T @ model.components, np.eye(3), atol=1e-5)
    evals = np.sort(np.linalg.eigvalsh(np.cov(X, rowvar=False)))[::-1]
    Z = pca_transform(model, X)
    recon = Z @ model.components.T + model.mean
    err = ((X - recon) ** 2).sum() / (len(X) - 1)
    assert err == pytest.approx(evals[3:].sum(), rel=1e-6)
    assert np.all(np.diff(model.explained_variance_ratio) <= 0) and model.explained_variance_ratio.sum() <= 1


def test_pca_line_and_mean():
    t = np.linspace(-1, 1, 20)
    X = np.stack([t, 2 * t + 1], axis=1)
    model = pca_fit(X, 1)
    assert model.explained_variance_ratio[0] == pytest.approx(1.0, abs=1e-6)
    assert np.allclose(pca_transform(model, X.mean(0, keepdims=True)), 0)


def test_pca_sign_convention(rng):
    X = rng.normal(size=(30, 5))
    a, b = pca_fit(X, 4), pca_fit(-X, 4)
    for c in (a.components.T, b.components.T):
        for row in c:
            assert row[np.argmax(np.abs(row))] > 0
    assert np.allclose(a.components, b.components, atol=1e-8)


def test_pca_rank_error(rng):
    X = rng.normal(size=(20, 2)) @ rng.normal(size=(2, 6))
    with pytest.raises(RankError, match="rank 2"):
        pca_fit(X, 4)
    with pytest.raises(ValidationError):
        pca_fit(rng.normal(size=(3, 6)), 3)


def _best_partition_inertia(x, k):
    best = np.inf
    for labels in itertools.product(range(k), repeat=len(x)):
        labels = np.array(labels)
        if len(set(labels)) < k:
            continue
        best = min(best, sum(((x[labels == c] - x[labels == c].mean(0)) ** 2).sum() for c in range(k)))
    return best


def test_kmeans_exhaustive_oracle():
    x = np.array([[0.0], [0.1], [10.0], [10.1]])
    for seed in range(10):
        m = kmeans_fit(x, 2, seed=seed)
        groups = sorted(sorted(np.flatnonzero(m.labels == c).tolist()) for c in range(2))
        assert groups == [[0, 1], [2, 3]]
        assert m.inertia == pytest.approx(_best_partition_inertia(x, 2))


def test_kmeans_saturation(rng):
    x = rng.normal(size=(7, 3))
    m = kmeans_fit(x, 7, seed=1)
    assert m.inertia == pytest.approx(0.0, abs=1e-12)
    assert sorted(m.labels.tolist()) == list(range(7))


def test_kmeans_properties(rng):
    x = np.concatenate([rng.normal(c, 0.3, size=(40, 2)) for c in (0, 3, 6)])
    m = kmeans_fit(x, 5, seed=3)
    assert np.all(np.diff(m.inertia_history) <= 1e-9)
    assert np.array_equal(m.predict(x), m.labels)
    assert np.all(m.counts > 0) and m.counts.sum() == len(x)
    with pytest.raises(ValidationError):
        kmeans_fit(x[:3], 4)


def test_kmeans_never_empty():
    rng = np.random.default_rng(11)
    for seed in range(100):
        # duplicated points make empty clusters likely
        x = np.repeat(rng.normal(size=(6, 2)), 3, axis=0)
        m = kmeans_fit(x, 6, seed=seed)
        assert np.all(m.counts > 0)


def test_kmeans_ties_go_to_lower_index():
    x = np.array([[0.0], [1.0], [2.0]])
    from storerec.clusterer import nearest
    assert nearest(np.array([[1.0]]), np.array([[0.0], [2.0]]))[0] == 0
    assert kmeans_fit(x, 3, seed=0).inertia == 0


def _blobs(rng, topics=4, per=30, D=16, v=2, noise=0.4):
    centers = rng.normal(size=(v, topics, D)) * 3
    E = np.stack([np.repeat(centers[i], per, axis=0) + rng.normal(0, noise, (topics * per, D)) for i in range(v)])
    return E, np.repeat(np.arange(topics), per)


def test_assign_codes_shapes_and_purity(rng):
    E, _ = _blobs(rng)
    E[:, 1] = E[:, 0]
    ids = [f"i{j:03d}" for j in range(E.shape[1])]
    res = assign_codes(E, ids, d=4, k=16, seed=0)
    C = res.codes
    assert C.codes.shape == (2, 120) and C.codes.min() >= 1 and C.codes.max() <= 16
    assert all(len(set(row)) >= 2 for row in C.codes)
    assert C.column(0) == C.column(1)
    again = assign_codes(E, ids, d=4, k=16, seed=0)
    assert np.array_equal(C.codes, again.codes.codes)
    sizes = [np.bincount(row, minlength=17)[1:] for row in C.codes]
    assert all(s.min() > 0 and s.max() / s.min() <= 20 for s in sizes)


def test_semantic_locality(rng):
    E, topic = _blobs(rng)
    res = assign_codes(E, [str(j) for j in range(E.shape[1])], d=4, k=16, seed=0)
    cols = res.codes.columns()
    intra, inter = [], []
    for a, b in itertools.combinations(range(len(cols)), 2):
        (intra if topic[a] == topic[b] else inter).append(hamming_distance(cols[a], cols[b]))
    assert np.mean(intra) < np.mean(inter)


def _single(codes, reduced, centroids):
    C = CodeMatrix(np.array(codes), [f"i{j}" for j in range(len(codes[0]))])
    return resolve_collisions(C, [np.array(r, float) for r in reduced], [np.array(c, float) for c in centroids])


def test_resolve_identity():
    C, moved = _single([[1, 2], [1, 1]], [[[0], [1]], [[0], [0]]], [[[0], [1]], [[0], [1]]])
    assert moved == [] and C.codes.tolist() == [[1, 2], [1, 1]]


def test_resolve_forced_flip():
    reduced = [[[0.0], [0.0]], [[0.2], [0.1]]]
    cents = [[[0.0], [5.0]], [[0.0], [1.0]]]
    C, moved = _single([[1, 1], [1, 1]], reduced, cents)
    # i1 is nearer its last-position centroid, so i0 moves
    assert moved == ["i0"] and C.codes.tolist() == [[1, 1], [2, 1]]
    assert C.all_distinct()


def test_resolve_strict_exhaustion():
    codes = np.ones((2, 3), int)
    C = CodeMatrix(codes, ["a", "b", "c"])
    reduced = [np.zeros((3, 1)), np.array([[0.0], [0.1], [0.2]])]
    cents = [np.array([[0.0], [1.0]]), np.array([[0.0], [1.0]])]
    with pytest.raises(UnresolvedCollisionError, match="c"):
        resolve_collisions(C, reduced, cents, strict=True)
    out, moved = resolve_collisions(C, reduced, cents)
    assert out.all_distinct() and moved == ["b", "c"]


def test_resolve_many(rng):
    E, _ = _blobs(rng, noise=0.05)
    res = assign_codes(E, [f"i{j:03d}" for j in range(E.shape[1])], d=4, k=16, seed=1)
    out, moved = resolve_collisions(res.codes, res.reduced, [m.centroids for m in res.kmeans])
    assert out.all_distinct()
    changed = [j for j in range(out.n) if out.column(j) != res.codes.column(j)]
    assert sorted(out.item_ids[j] for j in changed) == sorted(moved)


def test_resolve_impossible():
    C = CodeMatrix(np.ones((1, 3), int), ["a", "b", "c"])
    with pytest.raises(UnresolvedCollisionError):
        resolve_collisions(C, [np.zeros((3, 1))], [np.array([[0.0], [1.0]])])


def test_hamming_examples():
    assert hamming_distance((3, 7, 1, 9), (3, 7, 1, 9)) == 0
    assert hamming_distance((3, 7, 1, 9), (3, 7, 2, 9)) == 1
    with pytest.raises(ValidationError):
        hamming_distance((1, 2), (1, 2, 3))


ids4 = st.tuples(*[st.integers(1, 4)] * 4)


@given(ids4, ids4, ids4)
def test_hamming_metric(a, b, c):
    assert hamming_distance(a, b) == hamming_distance(b, a)
    assert hamming_distance(a, c) <= hamming_distance(a, b) + hamming_distance(b, c)


def test_capacity_and_memory():
    assert identifier_capacity(256, 4) == 256 ** 4 == 4294967296
    dense, codes = identifier_memory(25634, 1024, 256, 4)
    assert codes < dense


def test_tsv_and_model_round_trip(tmp_path, rng):
    E, _ = _blobs(rng, per=10)
    res = assign_codes(E, [f"x{j}" for j in range(E.shape[1])], d=3, k=4, seed=0)
    res.codes.write_tsv(tmp_path / "codes.tsv")
    assert (tmp_path / "codes.tsv").read_text().splitlines()[0] == "item_id\tc_1\tc_2"
    back = CodeMatrix.read_tsv(tmp_path / "codes.tsv")
    assert back.item_ids == res.codes.item_ids and np.array_equal(back.codes, res.codes.codes)
    save_cluster_models(tmp_path / "m", res)
    pcas, cents, _ = load_cluster_models(tmp_path / "m")
    for p, q in zip(pcas, res.pcas):
        # the blob format stores float32
        assert np.array_equal(p.components, q.components.astype(np.float32))
        assert np.array_equal(p.mean, q.mean.astype(np.float32))
    for c, m in zip(cents, res.kmeans):
        assert np.array_equal(c, m.centroids.astype(np.float32))
