import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hgvt.config import GraphDims
from hgvt.retrieval import (
    CentroidHasher, EmbeddingDB, Record, adaptive_rerank, average_precision_at_k, bin_diversity,
    evaluate_retrieval, hash_assign, hit_rate_at_k, make_record, prune_graph, ps_search, search,
    train_centroids, variance_summary, vs_distance, vs_distance_arrays, vs_search,
)
from hgvt.retrieval.hashing import centroid_objective

from .retrieval_data import separable_records

DIMS = GraphDims(n_image_vertices=4, n_virtual_vertices=3, n_primary_edges=5, n_virtual_edges=2)


def graph(rng):
    n, m = DIMS.n_vertices, DIMS.n_edges
    return rng.normal(size=(m, 6)), rng.uniform(size=(n, m))


# -- pruning ---------------------------------------------------------------


def test_prune_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(20):
        xe, soft = graph(rng)
        probs = rng.dirichlet(np.ones(2))
        g = prune_graph(xe, soft, probs, DIMS, m=2, n=3)
        root = int(np.argmax(probs))
        col = DIMS.n_primary_edges + root
        vv = sorted(range(3), key=lambda v: (-soft[4 + v, col], v))[:2]
        want = {}
        for v in vv:
            for e in sorted(range(5), key=lambda e: (-soft[4 + v, e], e))[:3]:
                want[e] = want.get(e, 0.0) + soft[4 + v, col] * soft[4 + v, e]
        assert g.root == root and g.vnodes == vv
        assert set(g.edge_ids) == set(want)
        assert len(g.edge_ids) == len(set(g.edge_ids))
        for e, c in zip(g.edge_ids, g.contributions):
            assert c == pytest.approx(want[e], abs=1e-15)
        assert all(a >= b for a, b in zip(g.contributions, g.contributions[1:]))
        np.testing.assert_array_equal(g.features, xe[g.edge_ids])


def test_prune_all_equal_memberships_resolve_to_lowest_indices():
    soft = np.full((DIMS.n_vertices, DIMS.n_edges), 0.5)
    g = prune_graph(np.eye(7, 6), soft, np.array([0.5, 0.5]), DIMS, m=3, n=2)
    assert g.root == 0 and g.vnodes == [0, 1, 2]
    # every vertex reaches the same two hyperedges, so deduplication leaves two
    assert g.edge_ids == [0, 1]
    assert g.contributions == pytest.approx([0.75, 0.75])


def test_prune_requires_gate():
    xe, soft = graph(np.random.default_rng(1))
    with pytest.raises(ValueError):
        prune_graph(xe, soft, None, DIMS)


def test_variance_summary_pads_expert_half():
    feats = np.array([[0.0, 0.0], [2.0, 4.0]])
    mean, delta = variance_summary(feats, 4)
    assert mean == pytest.approx(2.5)
    np.testing.assert_allclose(delta, [0.0, 0.0, -1.5, 1.5])
    mean, delta = variance_summary(feats[:1], 2)
    assert mean == 1e-12 and np.all(delta == 0)
    with pytest.raises(ValueError):
        variance_summary(feats, 1)


# -- PS / VS ---------------------------------------------------------------


def small_db(seed=0, n=30):
    return EmbeddingDB(separable_records(n=n, classes=3, width=8, seed=seed))


def test_ps_self_is_top_and_k_overflow():
    db = small_db()
    r = db.records[7]
    res = ps_search(r.centroid, db, k=100)
    assert res[0] == 7 and len(res) == len(db) and sorted(res) == sorted(db.ids.tolist())


def test_ps_order_matches_loop():
    db = small_db(1)
    q = np.random.default_rng(3).normal(size=8)

    def cos(a, b):
        return float(a @ b / np.linalg.norm(a) / np.linalg.norm(b))

    want = sorted(db.ids.tolist(), key=lambda i: (-cos(q, db.get(i).centroid), i))
    assert ps_search(q, db, k=len(db)) == want


def test_vs_identity_and_symmetry():
    recs = separable_records(n=4, classes=2, width=8, seed=2)
    for order in ("0", "1", "2", "full"):
        assert vs_distance(recs[0], recs[0], order) == 0.0
        assert vs_distance(recs[0], recs[1], order) == pytest.approx(vs_distance(recs[1], recs[0], order), rel=1e-12)
    assert vs_search(recs[0], EmbeddingDB(recs), k=1) == [0]


def test_vs_order0_equals_full_with_uniform_variance():
    recs = separable_records(n=50, width=8, seed=4, uniform_var=0.7)
    db = EmbeddingDB(recs)
    for q in recs[:5]:
        a = vs_distance_arrays(q.centroid, q.var_mean, q.delta, db.centroids, db.var_mean, db.delta, "0")
        b = vs_distance_arrays(q.centroid, q.var_mean, q.delta, db.centroids, db.var_mean, db.delta, "full")
        np.testing.assert_allclose(a, b, rtol=1e-12)
        assert vs_search(q, db, 50, "0") == vs_search(q, db, 50, "full")


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_vs_order2_tracks_full_better_than_order0(seed):
    rng = np.random.default_rng(seed)
    w = 8
    # one shared deviation per pair so the per-dimension error ordering carries to the sum
    delta = np.full(w, rng.uniform(-0.7, 0.7))  # rho = 1 keeps (rho * delta)^2 < 0.5
    q = Record(0, 0, rng.normal(size=w), 1.0, delta, np.zeros((1, 2)), np.ones(1))
    c = Record(1, 0, rng.normal(size=w), 1.0, delta, np.zeros((1, 2)), np.ones(1))
    full = vs_distance(q, c, "full")
    assert abs(vs_distance(q, c, "2") - full) <= abs(vs_distance(q, c, "0") - full) + 1e-12


def test_vs_pointwise_uses_candidate_variance():
    q = Record(0, 0, np.array([1.0, 0.0]), 5.0, np.zeros(2), np.zeros((1, 1)), np.ones(1))
    c = Record(1, 0, np.array([0.0, 1.0]), 2.0, np.array([-1.0, 1.0]), np.zeros((1, 1)), np.ones(1))
    assert vs_distance(q, c, "pointwise") == pytest.approx(1 / 1 + 1 / 3)


def test_vs_rejects_bad_order_and_variance():
    recs = separable_records(n=2, classes=2, width=4)
    with pytest.raises(ValueError):
        vs_distance(recs[0], recs[1], "3")
    bad = Record(9, 0, np.ones(4), 0.0, np.zeros(4), np.zeros((1, 2)), np.ones(1))
    with pytest.raises(ValueError):
        vs_distance(bad, recs[0])


# -- hashing ---------------------------------------------------------------


def test_hash_ties_go_to_lowest_bin():
    h = CentroidHasher(np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 5.0]]))
    assert hash_assign(h, np.array([0.0, 0.0])) == 0
    np.testing.assert_array_equal(h.assign(np.array([[-2.0, 0.0], [0.0, 4.0]])), [1, 2])


def test_train_centroids_preconditions():
    with pytest.raises(ValueError):
        train_centroids(np.zeros((3, 2)), h=5)
    with pytest.raises(ValueError):
        train_centroids(np.zeros((10, 2)), h=1)
    with pytest.raises(ValueError):
        train_centroids(np.zeros((0, 2)), h=2)


def test_centroid_objective_prefers_fitted_centroids():
    import torch

    y = torch.tensor([[0.0, 0.0], [0.1, 0.0], [5.0, 5.0], [5.1, 5.0]], dtype=torch.float64)
    good = torch.tensor([[0.05, 0.0], [5.05, 5.0]], dtype=torch.float64)
    bad = torch.tensor([[2.5, 2.5], [10.0, 10.0]], dtype=torch.float64)
    assert centroid_objective(y, good, 0.1, 0.5) < centroid_objective(y, bad, 0.1, 0.5)


def test_bin_diversity_extremes(tmp_path):
    h = CentroidHasher(np.array([[0.0], [10.0]]))
    assert bin_diversity(h, np.array([[0.0], [10.0]])) == pytest.approx(1.0)
    assert bin_diversity(h, np.array([[0.0], [0.1]])) == 0.0
    h.save(tmp_path / "c.npy")
    np.testing.assert_array_equal(CentroidHasher.load(tmp_path / "c.npy").centroids, h.centroids)


# -- rerank ----------------------------------------------------------------


def rec(id, edges, label=0):
    edges = np.asarray(edges, dtype=np.float64)
    return Record(id, label, np.ones(2), 1.0, np.zeros(2), edges, np.ones(len(edges)))


def test_rerank_identical_and_disjoint():
    hasher = CentroidHasher(np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]]))
    q = rec(0, [[1.0, 0.1], [0.1, 1.0]])
    same = rec(1, [[1.0, 0.1], [0.1, 1.0]])
    far = rec(2, [[-1.0, 0.0], [0.0, -1.0]])
    db = EmbeddingDB([same, far])
    res = adaptive_rerank(q, [2, 1], db, hasher, c=2)
    assert res.ids == [1, 2]
    assert res.scores[0] == pytest.approx(1.0) and res.scores[1] == 0.0
    assert res.lookups == 4 and res.comparisons == 2


def test_rerank_counter_bound_and_clamp():
    rng = np.random.default_rng(0)
    hasher = CentroidHasher(rng.normal(size=(3, 4)))
    db = EmbeddingDB([rec(i, rng.normal(size=(5, 4))) for i in range(20)])
    q = rec(99, rng.normal(size=(6, 4)))
    res = adaptive_rerank(q, list(range(20)), db, hasher, c=4)
    assert res.lookups == 20 * 4 and res.comparisons <= 20 * 4 * 5
    with pytest.warns(UserWarning):
        res = adaptive_rerank(rec(98, rng.normal(size=(2, 4))), list(range(20)), db, hasher, c=4)
    assert res.lookups == 20 * 2


def test_rerank_ties_keep_shortlist_order():
    hasher = CentroidHasher(np.array([[1.0, 0.0], [-1.0, 0.0]]))
    db = EmbeddingDB([rec(i, [[-1.0, 0.0]]) for i in range(3)])
    assert adaptive_rerank(rec(9, [[1.0, 0.0]]), [2, 0, 1], db, hasher, c=1).ids == [2, 0, 1]


# -- evaluation ------------------------------------------------------------


@pytest.mark.parametrize("rel,want", [
    ([1, 1, 1], 1.0),
    ([0, 0, 0], 0.0),
    ([0, 1], 0.5),
    ([1, 0, 1], (1 + 2 / 3) / 2),
    ([0] * 10 + [1], 0.0),
])
def test_average_precision_closed_forms(rel, want):
    assert average_precision_at_k([bool(r) for r in rel], 10) == pytest.approx(want)


def test_hit_rate():
    assert hit_rate_at_k({1: [5, 6], 2: [7, 8]}, {1: 6, 2: 3}, k=2) == 0.5
    assert math.isnan(hit_rate_at_k({1: [5]}, {}, k=1))


def test_search_excludes_self_and_needs_hasher():
    db = small_db()
    q = db.records[0]
    assert 0 not in search("ps", q, db, 5, exclude=0)
    with pytest.raises(ValueError):
        search("aps", q, db, 5)
    with pytest.raises(ValueError):
        search("nope", q, db, 5)


def test_evaluate_retrieval_all_methods_on_separable_data():
    db = EmbeddingDB(separable_records(n=120, classes=4, width=16, seed=5))
    feats = np.concatenate([r.edges for r in db.records])
    hasher = train_centroids(feats, h=4, epochs=2, seed=0)
    res = evaluate_retrieval(db, db.records[:20], ("ps", "vs", "aps", "avs"), 10, hasher=hasher, r=30, c=4)
    assert res["ps"]["mAP@10"] > 0.9 and res["vs"]["mAP@10"] > 0.9
    assert all(0.0 <= v["mAP@10"] <= 1.0 for v in res.values())


# -- database --------------------------------------------------------------


def test_db_round_trip(tmp_path):
    recs = separable_records(n=12, classes=3, width=8, seed=6)
    recs[3] = Record(3, 1, recs[3].centroid, recs[3].var_mean, recs[3].delta, recs[3].edges[:2], recs[3].contributions[:2])
    db = EmbeddingDB(recs)
    db.save(tmp_path / "db.bin")
    back = EmbeddingDB.load(tmp_path / "db.bin")
    assert (tmp_path / "db.bin.json").exists()
    assert back.header() == db.header()
    for a, b in zip(db.records, back.records):
        assert (a.id, a.label) == (b.id, b.label)
        np.testing.assert_allclose(b.centroid, a.centroid, rtol=1e-6)
        np.testing.assert_allclose(b.edges, a.edges, rtol=1e-6, atol=1e-6)
        np.testing.assert_allclose(b.delta, a.delta, atol=1e-6)
    assert back.get(3).edges.shape == (2, 4)


def test_db_rejects_bad_input(tmp_path):
    recs = separable_records(n=2, classes=2, width=4)
    with pytest.raises(ValueError):
        EmbeddingDB([])
    with pytest.raises(ValueError):
        EmbeddingDB([recs[0], recs[0]])
    (tmp_path / "x").write_bytes(b"nope")
    with pytest.raises(ValueError):
        EmbeddingDB.load(tmp_path / "x")


def test_make_record_from_pruned_graph():
    rng = np.random.default_rng(2)
    xe, soft = graph(rng)
    g = prune_graph(xe, soft, np.array([0.2, 0.8]), DIMS, m=2, n=2)
    r = make_record(5, 1, rng.normal(size=12), g)
    assert r.delta.shape == (12,) and r.edges.shape == g.features.shape
    assert np.all(r.variances > 0)
    assert r.delta[:6] == pytest.approx(np.zeros(6))


def test_embed_batch_on_nano(nano):
    import torch

    from hgvt.model import HgVT
    from hgvt.retrieval import embed_batch

    model = HgVT(nano, seed=0)
    imgs = torch.randn(3, nano.in_channels, nano.image_size, nano.image_size, generator=torch.Generator().manual_seed(0),
                       dtype=torch.float64)
    recs = embed_batch(model, imgs, [10, 11, 12], [0, 1, 0])
    assert [r.id for r in recs] == [10, 11, 12]
    assert recs[0].centroid.shape == (nano.pooled_width,)
    assert 1 <= recs[0].edges.shape[0] <= 12
