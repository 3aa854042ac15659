from __future__ import annotations

import itertools

import numpy as np
import pytest

from conftest import pipeline_fd_error
from joinrl.agent import action_mask, apply_action
from joinrl.autodiff import Tape, Tensor, init_param
from joinrl.catalog import Catalog, SchemaGraph, TableStats, generate_catalog
from joinrl.encoders import (
    Encoder, EncoderConfig, JoinForest, JoinTree, SchemaEmbedConfig, child_sum_unit, column_embedding,
    column_feature, leaf_state, nary_unit, schema_embeddings,
)
from joinrl.encoders.schema import biased_walks, embed_graph
from joinrl.encoders.tree import summed_hidden
from joinrl.environment import Leaf
from joinrl.query import generate_workload, parse_spj


def fraction(values, pred):
    return float(np.mean([pred(v) for v in values]))


DOMAIN = np.arange(1, 101)


def random_state(rng, hs, leaf=False):
    h = Tensor(rng.normal(size=(1, hs)))
    return leaf_state(h) if leaf else type(leaf_state(h))(h, Tensor(rng.normal(size=(1, hs))))


# -- column features -------------------------------------------------------------------

def test_example_column_feature_by_counting(example_query, example_catalog):
    f = column_feature(example_query, "T1", "a", example_catalog)
    expected = [0, 0, fraction(DOMAIN, lambda v: v < 40), fraction(DOMAIN, lambda v: v > 60), 0, 0]
    np.testing.assert_allclose(f, expected)
    assert f[2] == pytest.approx(0.39)


def test_join_column_feature(example_query, example_catalog):
    np.testing.assert_array_equal(column_feature(example_query, "T2", "b", example_catalog), [1, 0, 0, 0, 0, 0])


def test_unreferenced_column_is_zero(example_query, example_catalog):
    np.testing.assert_array_equal(column_feature(example_query, "T2", "x", example_catalog), np.zeros(6))


def test_between_fills_le_and_ge(example_query, example_catalog):
    f = column_feature(example_query, "T1", "d", example_catalog)
    assert f[4] == pytest.approx(fraction(DOMAIN, lambda v: v <= 20))
    assert f[5] == pytest.approx(fraction(DOMAIN, lambda v: v >= 10))


def test_same_slot_predicates_multiply(example_catalog):
    q = parse_spj("SELECT * FROM T1 WHERE T1.a < 50 AND T1.a < 20;", example_catalog)
    f = column_feature(q, "T1", "a", example_catalog)
    assert f[2] == pytest.approx(fraction(DOMAIN, lambda v: v < 50) * fraction(DOMAIN, lambda v: v < 20))


def test_unknown_column_raises(example_query, example_catalog):
    with pytest.raises(KeyError):
        column_feature(example_query, "T1", "zz", example_catalog)


def test_features_lie_in_unit_interval(catalog12, workload12):
    for q in workload12[:50]:
        for t in q.tables:
            for c in catalog12.table(t).columns:
                f = column_feature(q, t, c.name, catalog12)
                assert f[0] in (0.0, 1.0)
                assert ((f[1:] >= 0) & (f[1:] <= 1)).all()


def test_column_embedding_products():
    assert not column_embedding(Tape(), Tensor(np.zeros((1, 6))), Tensor(np.ones((6, 3)))).data.any()
    f = Tensor([[0, 0, 0.39, 0.40, 0, 0]])
    padded = Tensor(np.eye(6, 8))
    np.testing.assert_allclose(column_embedding(Tape(), f, padded).data[0, :6], f.data[0])
    m = np.arange(12.0).reshape(6, 2)
    # row 2 is (4, 5) and row 3 is (6, 7)
    out = column_embedding(Tape(), f, Tensor(m)).data[0]
    np.testing.assert_allclose(out, [0.39 * 4 + 0.40 * 6, 0.39 * 5 + 0.40 * 7])
    with pytest.raises(ValueError):
        column_embedding(Tape(), Tensor(np.zeros((1, 5))), Tensor(m))


# -- schema embeddings --------------------------------------------------------------------------

def test_single_table_schema():
    cat = Catalog((TableStats("A", 10, ()),), frozenset())
    emb = schema_embeddings(cat, SchemaEmbedConfig(dim=4), seed=0)
    assert list(emb) == ["A"] and emb["A"].shape == (4,)
    walks = biased_walks([[]], SchemaEmbedConfig(), np.random.default_rng(0))
    assert all(w == [0] for w in walks)


def test_schema_embeddings_deterministic(catalog12):
    a = schema_embeddings(catalog12, seed=3)
    b = schema_embeddings(catalog12, seed=3)
    assert all(np.array_equal(a[t], b[t]) for t in a)


def test_walk_return_weight():
    # path 0-1-2: from 1 having come from 0, return weight 1/p against 1/q for node 2
    cfg = SchemaEmbedConfig(p=0.25, q=1.0, walk_length=3, walks_per_node=4000)
    walks = biased_walks([[1], [0, 2], [1]], cfg, np.random.default_rng(0))
    third = [w[2] for w in walks if w[:2] == [0, 1]]
    assert np.mean([x == 0 for x in third]) == pytest.approx(4 / 5, abs=0.03)


def test_barbell_cliques_cluster():
    left, right = [f"L{i}" for i in range(4)], [f"R{i}" for i in range(4)]
    edges = {tuple(e) for grp in (left, right) for e in itertools.combinations(grp, 2)} | {("L0", "R0")}
    graph = SchemaGraph(tuple(left + right), frozenset(edges))

    def cos(a, b):
        return float(a @ b / np.linalg.norm(a) / np.linalg.norm(b))

    wins = 0
    for seed in range(5):
        emb = embed_graph(graph, SchemaEmbedConfig(), seed)
        within = [cos(emb[a], emb[b]) for grp in (left, right) for a, b in itertools.combinations(grp, 2)]
        across = [cos(emb[a], emb[b]) for a in left for b in right]
        wins += np.mean(within) > np.mean(across)
    assert wins >= 3


# -- table / query level ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def encoder12(catalog12):
    return Encoder(catalog12, EncoderConfig(hs=8, gnn_heads=2), seed=1)


def test_table_embedding_shape_independent_of_columns(encoder12, catalog12, workload12):
    q = workload12[0]
    for t in q.tables:
        assert encoder12.table_embedding(q, t, Tape()).shape == (1, 8)


def test_table_embedding_column_order_invariant(catalog12, workload12):
    q = workload12[0]
    t = q.tables[0]
    enc = Encoder(catalog12, EncoderConfig(hs=8), seed=1)
    stats = catalog12.table(t)
    flipped_tables = tuple(
        TableStats(s.name, s.row_count, tuple(reversed(s.columns))) if s.name == t else s for s in catalog12.tables
    )
    flipped = Catalog(flipped_tables, catalog12.fk_edges, catalog12.seed)
    enc2 = Encoder(flipped, EncoderConfig(hs=8), seed=1, schema_emb=enc.schema_emb)
    assert len(stats.columns) > 1
    a = enc.table_embedding(q, t, Tape()).data
    b = enc2.table_embedding(q, t, Tape()).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_identical_columns_pool_to_themselves(encoder12, workload12, catalog12):
    q = workload12[0]
    t = q.tables[0]
    enc = Encoder(catalog12, EncoderConfig(hs=8), seed=1)
    for c in catalog12.table(t).columns:
        enc.params[f"col/{t}.{c.name}/M"].data[...] = 0.0
        enc.params[f"col/{t}.{c.name}/M"].data[:, 0] = 1.0
    v = np.mean([column_feature(q, t, c.name, catalog12).sum() for c in catalog12.table(t).columns])
    pooled = enc.pooled_columns(q, t, Tape()).data[0]
    assert pooled[0] == pytest.approx(v)
    assert not pooled[1:].any()


def test_attention_weights_sum_to_one(encoder12, workload12):
    q = workload12[1]
    weights = []
    encoder12.query_embedding(q, encoder12.table_embeddings(q, q.tables, Tape()), Tape(), weights)
    assert len(weights) == 2 * 2
    for w in weights:
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)


def test_zero_adjacency_has_no_mixing(encoder12):
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(4, 8)))
    weights = []
    encoder12.graph_embedding(x, np.zeros((4, 4)), Tape(), weights)
    for w in weights:
        np.testing.assert_allclose(w, np.eye(4), atol=1e-12)


def test_query_embedding_relabeling_invariant(encoder12):
    rng = np.random.default_rng(1)
    for _ in range(10):
        n = int(rng.integers(2, 8))
        x = rng.normal(size=(n, 8))
        adj = np.triu(rng.random((n, n)) < 0.5, 1).astype(float)
        adj = adj + adj.T
        perm = rng.permutation(n)
        a = encoder12.graph_embedding(Tensor(x), adj, Tape()).data
        b = encoder12.graph_embedding(Tensor(x[perm]), adj[np.ix_(perm, perm)], Tape()).data
        assert np.abs(a - b).max() < 1e-10


# -- trees, forests, states ---------------------------------------------------------------------------

def test_leaf_cell_is_zero():
    # a leaf's absent cell must behave exactly like an explicit zero cell
    rng = np.random.default_rng(2)
    hs = 5
    U, b = init_param(0, "U", 4 * hs, 7 * hs), init_param(0, "b", 1, 7 * hs, fan_in=4 * hs)
    kids = [random_state(rng, hs, leaf=True) for _ in range(4)]
    assert all(k.is_leaf for k in kids)
    zeroed = [type(k)(k.h, Tensor(np.zeros((1, hs)))) for k in kids]
    np.testing.assert_allclose(nary_unit(kids, U, b, Tape()).h.data, nary_unit(zeroed, U, b, Tape()).h.data,
                               atol=1e-15)


def test_nary_needs_four_children():
    rng = np.random.default_rng(3)
    U, b = init_param(0, "U", 12, 21), init_param(0, "b", 1, 21)
    with pytest.raises(ValueError):
        nary_unit([random_state(rng, 3) for _ in range(3)], U, b, Tape())


def test_nary_child_swap_changes_output():
    rng = np.random.default_rng(4)
    hs = 4
    changed = 0
    for trial in range(100):
        U, b = init_param(trial, "U", 4 * hs, 7 * hs), init_param(trial, "b", 1, 7 * hs)
        a0, b0, b1, a1 = (random_state(rng, hs) for _ in range(4))
        h1 = nary_unit([a0, b0, b1, a1], U, b, Tape()).h.data
        h2 = nary_unit([a1, b1, b0, a0], U, b, Tape()).h.data
        changed += not np.allclose(h1, h2, atol=1e-12)
    assert changed >= 95


def test_encode_tree_is_pure(encoder12, workload12):
    q = workload12[2]
    ctx = encoder12.context(q, Tape(record=False))
    from joinrl.environment import dp_optimal
    plan, _ = dp_optimal(q, encoder12.catalog)
    s1 = encoder12.encode_tree(plan, ctx, Tape())
    s2 = encoder12.encode_tree(plan, ctx, Tape())
    assert np.array_equal(s1.h.data, s2.h.data) and np.array_equal(s1.c.data, s2.c.data)


def test_forest_permutation_invariance():
    rng = np.random.default_rng(5)
    hs = 6
    p = {k: init_param(9, k, r, c) for k, r, c in (("Ui", hs, 3 * hs), ("bi", 1, 3 * hs), ("Uf", hs, hs),
                                                   ("bf", 1, hs))}
    worst = 0.0
    for _ in range(20):
        k = int(rng.integers(1, 7))
        kids = [random_state(rng, hs, leaf=bool(rng.random() < 0.4)) for _ in range(k)]
        ref = child_sum_unit(kids, p["Ui"], p["bi"], p["Uf"], p["bf"], Tape()).h.data
        for _ in range(10):
            perm = [kids[i] for i in rng.permutation(k)]
            out = child_sum_unit(perm, p["Ui"], p["bi"], p["Uf"], p["bf"], Tape()).h.data
            worst = max(worst, float(np.abs(out - ref).max()))
    assert worst < 1e-10


def test_identical_trees_scale_summed_hidden():
    rng = np.random.default_rng(6)
    s = random_state(rng, 4)
    np.testing.assert_allclose(summed_hidden([s, s, s], Tape()).data, 3 * s.h.data)


def test_empty_forest_rejected(encoder12):
    with pytest.raises(ValueError):
        encoder12.forest_embedding(JoinForest(()), Tape())


def test_forest_rejects_overlapping_trees():
    s = leaf_state(Tensor(np.zeros((1, 2))))
    with pytest.raises(ValueError):
        JoinForest((JoinTree(Leaf("A"), s), JoinTree(Leaf("A"), s)))


def test_state_shape_and_sensitivity(encoder12, workload12, catalog12):
    q = next(q for q in workload12 if q.n_tables >= 4)
    ctx = encoder12.context(q, Tape(record=False))
    f0 = encoder12.initial_forest(ctx)
    s0 = encoder12.state(ctx, f0, Tape()).data
    assert s0.shape == (1, 16)
    mask = action_mask(q, f0, catalog12)
    a, b = np.flatnonzero(mask.vector)[:2]
    fa = apply_action(f0, int(a), q, catalog12, encoder12, ctx, Tape())
    fb = apply_action(f0, int(b), q, catalog12, encoder12, ctx, Tape())
    sa, sb = encoder12.state(ctx, fa, Tape()).data, encoder12.state(ctx, fb, Tape()).data
    np.testing.assert_array_equal(sa[0, :8], s0[0, :8])  # R(q) part is per query
    assert not np.allclose(sa, sb)


def test_encoder_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(gnn_layers=3)
    with pytest.raises(ValueError):
        EncoderConfig(hs=5, gnn_heads=2)
    cfg = EncoderConfig(hs=8)
    assert EncoderConfig.from_dict(cfg.to_dict()) == cfg


def test_pipeline_gradient_small_instance():
    cat = generate_catalog(11, 6, 4, 0.5)
    q = generate_workload(cat, 5, 3, 2, 5)[0]
    assert pipeline_fd_error(cat, q, 0) < 1e-4
