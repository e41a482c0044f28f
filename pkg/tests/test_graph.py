import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedlap.graph import (
    GraphError,
    bernoulli_graph,
    build_graph,
    cut_fraction,
    edge_homophily,
    laplacian,
    partition,
    reconstruct_edges,
    sbm_generate,
    split_labels,
)

from helpers import path_graph, triangle


@st.composite
def graphs(draw, max_n=25):
    n = draw(st.integers(1, max_n))
    pairs = st.tuples(st.integers(0, n - 1), st.integers(0, n - 1))
    edges = draw(st.lists(pairs, max_size=3 * n))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return build_graph(edges if edges else np.empty((0, 2)), np.zeros((n, 1)))


# ---- build_graph


def test_triangle_counts():
    g = triangle()
    assert (g.n, g.m) == (3, 3)


def test_self_loop_dropped_with_warning():
    with pytest.warns(UserWarning, match="self-loop"):
        g = build_graph([(0, 1), (2, 2)], np.zeros((3, 1)))
    assert g.self_loops_dropped == 1
    assert g.m == 1


def test_duplicate_reverse_edge_dedup():
    g = build_graph([(0, 1), (1, 0)], np.zeros((2, 1)))
    assert g.m == 1


def test_dangling_id_rejected():
    with pytest.raises(GraphError, match="dangling"):
        build_graph([(0, 5)], np.zeros((3, 1)))


def test_feature_and_label_length_mismatch():
    with pytest.raises(GraphError):
        build_graph([(0, 1)], np.zeros((3, 1)), n=4)
    with pytest.raises(GraphError):
        build_graph([(0, 1)], np.zeros((3, 1)), labels=[0, 1])


@given(graphs())
@settings(max_examples=60, deadline=None)
def test_adjacency_symmetric_binary_no_loops(g):
    a = g.adjacency.toarray()
    assert np.array_equal(a, a.T)
    assert set(np.unique(a)) <= {0, 1}
    assert not np.any(np.diag(a))
    assert a.sum() == 2 * g.m


# ---- laplacian


def test_triangle_laplacian():
    L = laplacian(triangle()).toarray()
    assert np.array_equal(np.diag(L), [2, 2, 2])
    off = L[~np.eye(3, dtype=bool)]
    assert np.all(off == -1)
    np.testing.assert_allclose(np.linalg.eigvalsh(L), [0, 3, 3], atol=1e-12)


def test_empty_graph_laplacian_is_zero():
    g = build_graph(np.empty((0, 2)), np.zeros((3, 1)))
    assert not np.any(laplacian(g).toarray())


def test_path_p3_spectrum():
    np.testing.assert_allclose(np.linalg.eigvalsh(laplacian(path_graph(3)).toarray()), [0, 1, 3], atol=1e-12)


@given(graphs())
@settings(max_examples=60, deadline=None)
def test_laplacian_zero_row_sums_and_psd(g):
    lap = laplacian(g)
    assert lap.matrix.dtype.kind == "i"
    assert not np.any(np.asarray(lap.matrix.sum(axis=1)).ravel())
    rng = np.random.default_rng(g.n)
    L = lap.toarray()
    for _ in range(5):
        x = rng.standard_normal(g.n)
        assert x @ L @ x >= -1e-9


def test_connected_graph_null_vector_is_constant():
    g = sbm_generate([30, 30], 0.3, 0.05, seed=1)
    lam, U = np.linalg.eigh(laplacian(g).toarray())
    assert abs(lam[0]) < 1e-9
    u = U[:, 0]
    cos = abs(u.sum()) / (np.linalg.norm(u) * np.sqrt(g.n))
    assert cos > 1 - 1e-8


# ---- partition


def test_single_client_partition():
    g = sbm_generate([20, 20], 0.3, 0.05, seed=0)
    (v,) = partition(g, "random", 1, seed=0)
    assert v.interconnections.shape[0] == 0
    assert np.array_equal(v.internal_edges, g.edges)


def test_triangle_three_clients():
    views = partition(triangle(), "random", 3, seed=7)
    for v in views:
        assert v.n_i == 1
        assert v.interconnections.shape[0] == 2
        assert v.internal_edges.shape[0] == 0


def test_k_larger_than_n():
    with pytest.raises(GraphError):
        partition(triangle(), "random", 4, seed=0)


def test_bfs_community_cuts_fewer_edges():
    g = sbm_generate([50] * 4, 0.2, 0.01, seed=3)
    bfs = partition(g, "bfs-community", 4, seed=3)
    rnd = partition(g, "random", 4, seed=3)
    assert cut_fraction(g, bfs) < cut_fraction(g, rnd)


@given(graphs(), st.integers(1, 6), st.sampled_from(["random", "bfs-community"]), st.integers(0, 2**16))
@settings(max_examples=60, deadline=None)
def test_partition_invariants(g, K, scheme, seed):
    K = min(K, g.n)
    views = partition(g, scheme, K, seed=seed)
    allnodes = np.concatenate([v.internal_nodes for v in views])
    assert np.array_equal(np.sort(allnodes), np.arange(g.n))
    rec = reconstruct_edges(views)
    assert np.array_equal(rec, g.edges.reshape(-1, 2))
    # each cut edge is held by both owners
    owner = views[0].layout.owner
    for u, v in g.edges:
        if owner[u] != owner[v]:
            for a, b in ((u, v), (v, u)):
                inter = views[owner[a]].interconnections
                assert np.any((inter[:, 0] == a) & (inter[:, 1] == b))
    for v in views:
        assert v.features.shape[0] == v.n_i
        assert v.labels.shape[0] == v.n_i
    if scheme == "random":
        sizes = [v.n_i for v in views]
        assert max(sizes) - min(sizes) <= 1
    again = partition(g, scheme, K, seed=seed)
    assert all(np.array_equal(a.internal_nodes, b.internal_nodes) for a, b in zip(views, again))


def test_views_never_hold_foreign_features():
    g = sbm_generate([15, 15], 0.3, 0.1, seed=2, feature_dim=3)
    for v in partition(g, "random", 3, seed=2):
        np.testing.assert_array_equal(v.features, g.features[v.internal_nodes])


def test_label_split_schemes():
    g = sbm_generate([40, 40], 0.2, 0.02, seed=5)
    s = split_labels(g, 0.1, 0.1, seed=1)
    assert not np.any(s.train & s.val) and not np.any(s.train & s.test)
    for c in range(2):
        assert s.train[g.labels == c].sum() == 4
    owner = partition(g, "random", 4, seed=1)[0].layout.owner
    s2 = split_labels(g, 0.1, 0.1, seed=1, scheme="per-client", owner=owner)
    assert all(s2.train[owner == k].sum() == 2 for k in range(4))
    with pytest.raises(GraphError):
        split_labels(g, scheme="per-client")


# ---- homophily


def test_homophily_triangle():
    assert edge_homophily(triangle([0, 0, 0])) == 1.0
    assert edge_homophily(triangle([0, 0, 1])) == pytest.approx(1 / 3)
    with pytest.raises(GraphError):
        edge_homophily(triangle([0, -1, 1]))


def test_homophily_sbm():
    g = sbm_generate([50] * 4, 0.1, 0.01, seed=11)
    assert edge_homophily(g) >= 0.6


# ---- generators


def test_bernoulli_extremes():
    assert bernoulli_graph(30, 0.0, seed=1).m == 0
    assert bernoulli_graph(30, 1.0, seed=1).m == 30 * 29 // 2


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_bernoulli_edge_count_within_three_sigma(seed):
    n, p = 2000, 0.01
    pairs = n * (n - 1) // 2
    g = bernoulli_graph(n, p, seed=seed)
    assert abs(g.m - p * pairs) <= 3 * np.sqrt(pairs * p * (1 - p))


def test_generators_deterministic():
    a, b = sbm_generate([20, 30], 0.2, 0.05, seed=9), sbm_generate([20, 30], 0.2, 0.05, seed=9)
    assert np.array_equal(a.edges, b.edges) and np.array_equal(a.features, b.features)
    assert bernoulli_graph(100, 0.1, seed=4).fingerprint() == bernoulli_graph(100, 0.1, seed=4).fingerprint()


def test_sbm_pairs_are_within_or_across_blocks_only():
    g = sbm_generate([10, 10], 1.0, 0.0, seed=0)
    assert g.m == 2 * 45
    assert np.all(g.labels[g.edges[:, 0]] == g.labels[g.edges[:, 1]])
