"""Graph container, Laplacian, client partitioning and random graph generators."""

from __future__ import annotations

import hashlib
import heapq
import math
import warnings
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp


class GraphError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected, unweighted graph with node features and partial labels.

    ``edges`` holds each undirected edge once as a row ``(u, v)`` with ``u < v``,
    sorted lexicographically. ``labels`` uses ``-1`` for nodes without a label.
    """

    n: int
    edges: np.ndarray
    features: np.ndarray
    labels: Optional[np.ndarray] = None
    self_loops_dropped: int = 0

    @property
    def m(self) -> int:
        return int(self.edges.shape[0])

    @property
    def num_classes(self) -> int:
        if self.labels is None or not np.any(self.labels >= 0):
            return 0
        return int(self.labels.max()) + 1

    @cached_property
    def labeled_set(self) -> np.ndarray:
        if self.labels is None:
            return np.empty(0, dtype=np.int64)
        return np.flatnonzero(self.labels >= 0)

    @cached_property
    def adjacency(self) -> sp.csr_matrix:
        u, v = self.edges[:, 0], self.edges[:, 1]
        rows = np.concatenate([u, v])
        cols = np.concatenate([v, u])
        data = np.ones(rows.size, dtype=np.int64)
        a = sp.csr_matrix((data, (rows, cols)), shape=(self.n, self.n))
        a.sort_indices()
        return a

    @cached_property
    def degrees(self) -> np.ndarray:
        return np.asarray(self.adjacency.sum(axis=1)).ravel().astype(np.int64)

    def neighbors(self, v: int) -> np.ndarray:
        a = self.adjacency
        return a.indices[a.indptr[v]:a.indptr[v + 1]]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.int64(self.n).tobytes())
        h.update(np.ascontiguousarray(self.edges, dtype=np.int64).tobytes())
        return h.hexdigest()[:16]


def build_graph(edge_list, features, labels=None, n: Optional[int] = None) -> Graph:
    """Build a :class:`Graph` from an edge list, a feature matrix and optional labels.

    Edges are symmetrized and deduplicated; self-loops are dropped and counted.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features[:, None]
    if n is None:
        n = features.shape[0]
    if features.shape[0] != n:
        raise GraphError(f"feature matrix has {features.shape[0]} rows, expected {n}")

    e = np.asarray(edge_list, dtype=np.int64).reshape(-1, 2)
    if e.size and (e.min() < 0 or e.max() >= n):
        bad = e[(e < 0) | (e >= n)]
        raise GraphError(f"dangling node id {int(bad[0])} in edge list (n={n})")
    loops = e[:, 0] == e[:, 1]
    n_loops = int(loops.sum())
    if n_loops:
        warnings.warn(f"dropped {n_loops} self-loop(s)", stacklevel=2)
    e = np.sort(e[~loops], axis=1)
    e = np.unique(e, axis=0) if e.size else np.empty((0, 2), dtype=np.int64)

    lab = None
    if labels is not None:
        lab = np.asarray([(-1 if x is None else x) for x in labels], dtype=np.int64)
        if lab.shape[0] != n:
            raise GraphError(f"label vector has length {lab.shape[0]}, expected {n}")

    return Graph(n=int(n), edges=e, features=features, labels=lab, self_loops_dropped=n_loops)


@dataclass(frozen=True, eq=False)
class Laplacian:
    matrix: sp.csr_matrix
    degrees: np.ndarray

    def frobenius_norm(self) -> float:
        d = self.degrees.astype(np.float64)
        return float(np.sqrt(np.sum(d * d + d)))

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray().astype(np.float64)


def laplacian(g: Graph) -> Laplacian:
    """Unnormalized Laplacian ``D - A`` in exact integer arithmetic."""
    a = g.adjacency
    lap = (sp.diags(g.degrees, format="csr", dtype=np.int64) - a).tocsr()
    lap.sort_indices()
    return Laplacian(matrix=lap, degrees=g.degrees.copy())


def laplacian_operator(g: Graph):
    """Matvec callback ``q -> D q - A q`` over float64 vectors."""
    a = g.adjacency.astype(np.float64)
    deg = g.degrees.astype(np.float64)

    def apply(q: np.ndarray) -> np.ndarray:
        return deg * q - a @ q

    return apply


def edge_homophily(g: Graph) -> float:
    if g.labels is None:
        raise GraphError("graph has no labels")
    if g.m == 0:
        return 0.0
    lu = g.labels[g.edges[:, 0]]
    lv = g.labels[g.edges[:, 1]]
    if np.any(lu < 0) or np.any(lv < 0):
        raise GraphError("edge endpoint without label")
    return float(np.mean(lu == lv))


# --------------------------------------------------------------------------
# partitioning


@dataclass(frozen=True, eq=False)
class PartitionLayout:
    """Public index sets of all clients (who owns which node id)."""

    owner: np.ndarray
    blocks: tuple
    partition_id: str

    @property
    def K(self) -> int:
        return len(self.blocks)

    @property
    def n(self) -> int:
        return int(self.owner.size)

    def local_index(self) -> np.ndarray:
        """Position of every node inside its owner's sorted block."""
        pos = np.empty(self.n, dtype=np.int64)
        for nodes in self.blocks:
            pos[nodes] = np.arange(nodes.size)
        return pos


@dataclass(frozen=True, eq=False)
class PartitionedView:
    """Everything one client knows about the global graph.

    ``row_block`` is ``A[V_i, :]`` as a CSR matrix with global column ids; by
    symmetry it also carries the column knowledge ``A[:, V_i]``.
    """

    client_id: int
    internal_nodes: np.ndarray
    external_neighbors: np.ndarray
    internal_edges: np.ndarray
    interconnections: np.ndarray
    row_block: sp.csr_matrix
    features: np.ndarray
    labels: np.ndarray
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray
    layout: PartitionLayout = field(repr=False)

    @property
    def n_i(self) -> int:
        return int(self.internal_nodes.size)

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.row_block.indptr).astype(np.int64)

    @property
    def labeled_nodes(self) -> np.ndarray:
        """Global ids of the client's training-labeled nodes."""
        return self.internal_nodes[self.train_mask]

    @cached_property
    def local_adjacency(self) -> sp.csr_matrix:
        """``A[V_i, V_i]`` in local (sorted) coordinates."""
        a = self.row_block[:, self.internal_nodes]
        a = a.tocsr()
        a.sort_indices()
        return a

    def block_towards(self, other: int) -> sp.csr_matrix:
        """``A[V_other, V_i]`` in local coordinates of both clients."""
        rows = self.layout.blocks[other]
        a = self.row_block[:, rows].T.tocsr()
        a.sort_indices()
        return a

    def local_position(self, v: int) -> int:
        idx = np.searchsorted(self.internal_nodes, v)
        if idx >= self.internal_nodes.size or self.internal_nodes[idx] != v:
            raise KeyError(f"node {v} is not internal to client {self.client_id}")
        return int(idx)


@dataclass(frozen=True)
class LabelSplit:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


def split_labels(g: Graph, train_frac: float = 0.1, val_frac: float = 0.1, seed: int = 0,
                 scheme: str = "global-stratified", owner: Optional[np.ndarray] = None) -> LabelSplit:
    """Assign labeled nodes to train/val/test masks.

    ``global-stratified`` samples per class over the whole graph;
    ``per-client`` samples the same fraction inside each client (needs ``owner``).
    """
    rng = np.random.default_rng(seed)
    train = np.zeros(g.n, dtype=bool)
    val = np.zeros(g.n, dtype=bool)
    labeled = g.labeled_set
    if scheme == "global-stratified":
        groups = [labeled[g.labels[labeled] == c] for c in range(g.num_classes)]
    elif scheme == "per-client":
        if owner is None:
            raise GraphError("per-client label split needs a partition")
        groups = [labeled[owner[labeled] == k] for k in range(int(owner.max()) + 1)]
    else:
        raise GraphError(f"unknown label split scheme {scheme!r}")
    for grp in groups:
        if grp.size == 0:
            continue
        perm = rng.permutation(grp)
        n_tr = max(1, int(round(train_frac * grp.size)))
        n_va = int(round(val_frac * grp.size))
        train[perm[:n_tr]] = True
        val[perm[n_tr:n_tr + n_va]] = True
    test = np.zeros(g.n, dtype=bool)
    test[labeled] = True
    test &= ~(train | val)
    return LabelSplit(train=train, val=val, test=test)


def _balanced_sizes(n: int, K: int) -> np.ndarray:
    sizes = np.full(K, n // K, dtype=np.int64)
    sizes[: n % K] += 1
    return sizes


def _random_assignment(n: int, K: int, rng: np.random.Generator) -> np.ndarray:
    owner = rng.integers(0, K, size=n)
    target = _balanced_sizes(n, K)
    counts = np.bincount(owner, minlength=K)
    surplus = []
    for k in range(K):
        extra = counts[k] - target[k]
        if extra > 0:
            members = np.flatnonzero(owner == k)
            surplus.extend(rng.choice(members, size=extra, replace=False).tolist())
    it = iter(surplus)
    for k in range(K):
        for _ in range(max(0, target[k] - counts[k])):
            owner[next(it)] = k
    return owner


def _bfs_distances(g: Graph, sources: Sequence[int]) -> np.ndarray:
    dist = np.full(g.n, -1, dtype=np.int64)
    q = deque()
    for s in sources:
        dist[s] = 0
        q.append(s)
    while q:
        v = q.popleft()
        for u in g.neighbors(v):
            if dist[u] < 0:
                dist[u] = dist[v] + 1
                q.append(u)
    return dist


def _bfs_community_assignment(g: Graph, K: int, rng: np.random.Generator) -> np.ndarray:
    n = g.n
    cap = math.ceil(n / K)
    seeds = [int(rng.integers(n))]
    while len(seeds) < K:
        dist = _bfs_distances(g, seeds).astype(np.float64)
        dist[dist < 0] = np.inf
        dist[seeds] = -1
        far = np.flatnonzero(dist == dist.max())
        seeds.append(int(rng.choice(far)))

    owner = np.full(n, -1, dtype=np.int64)
    sizes = np.zeros(K, dtype=np.int64)
    # per-region max-heap on (links into region, -discovery order)
    heaps = [[] for _ in range(K)]
    links = [dict() for _ in range(K)]
    counter = 0

    def claim(v: int, k: int) -> None:
        nonlocal counter
        owner[v] = k
        sizes[k] += 1
        for u in g.neighbors(v):
            u = int(u)
            if owner[u] < 0:
                c = links[k].get(u, 0) + 1
                links[k][u] = c
                counter += 1
                heapq.heappush(heaps[k], (-c, counter, u))

    for k, s in enumerate(seeds):
        claim(s, k)
    active = True
    while active:
        active = False
        for k in range(K):
            if sizes[k] >= cap:
                continue
            h = heaps[k]
            while h:
                negc, _, u = heapq.heappop(h)
                if owner[u] < 0 and -negc == links[k].get(u, 0):
                    claim(u, k)
                    active = True
                    break
    rest = np.flatnonzero(owner < 0)
    for v in rest:
        # disconnected leftovers go to the currently smallest region
        k = int(np.argmin(sizes))
        owner[v] = k
        sizes[k] += 1
    return owner


def partition(g: Graph, scheme: str = "random", K: int = 2, seed: int = 0,
              splits: Optional[LabelSplit] = None) -> list[PartitionedView]:
    """Split ``g`` into ``K`` client views.

    ``random`` draws owners i.i.d. and rebalances to sizes that differ by at most
    one; ``bfs-community`` grows ``K`` regions greedily from far-apart seeds with
    a size cap of ``ceil(n / K)``.
    """
    if K < 1:
        raise GraphError("K must be >= 1")
    if K > g.n:
        raise GraphError(f"K={K} exceeds node count n={g.n}")
    rng = np.random.default_rng(seed)
    if K == 1:
        owner = np.zeros(g.n, dtype=np.int64)
    elif scheme == "random":
        owner = _random_assignment(g.n, K, rng)
    elif scheme == "bfs-community":
        owner = _bfs_community_assignment(g, K, rng)
    else:
        raise GraphError(f"unknown partition scheme {scheme!r}")
    return views_from_owner(g, owner, splits)


def views_from_owner(g: Graph, owner: np.ndarray, splits: Optional[LabelSplit] = None) -> list[PartitionedView]:
    owner = np.asarray(owner, dtype=np.int64)
    K = int(owner.max()) + 1 if owner.size else 1
    blocks = tuple(np.flatnonzero(owner == k) for k in range(K))
    pid = hashlib.sha256(g.fingerprint().encode() + owner.tobytes()).hexdigest()[:16]
    layout = PartitionLayout(owner=owner, blocks=blocks, partition_id=pid)
    if splits is None:
        splits = LabelSplit(train=np.zeros(g.n, bool), val=np.zeros(g.n, bool), test=np.zeros(g.n, bool))
    labels = g.labels if g.labels is not None else np.full(g.n, -1, dtype=np.int64)

    a = g.adjacency
    eu, ev = g.edges[:, 0], g.edges[:, 1]
    ou, ov = owner[eu], owner[ev]
    views = []
    for k, nodes in enumerate(blocks):
        rb = a[nodes].tocsr()
        rb.sort_indices()
        internal = g.edges[(ou == k) & (ov == k)]
        cross_a = (ou == k) & (ov != k)
        cross_b = (ov == k) & (ou != k)
        inter = np.concatenate([g.edges[cross_a], g.edges[cross_b][:, ::-1]], axis=0)
        inter = inter[np.lexsort((inter[:, 1], inter[:, 0]))] if inter.size else np.empty((0, 2), np.int64)
        ext = np.unique(inter[:, 1]) if inter.size else np.empty(0, np.int64)
        views.append(PartitionedView(
            client_id=k,
            internal_nodes=nodes,
            external_neighbors=ext,
            internal_edges=internal,
            interconnections=inter,
            row_block=rb,
            features=g.features[nodes].copy(),
            labels=labels[nodes].copy(),
            train_mask=splits.train[nodes].copy(),
            val_mask=splits.val[nodes].copy(),
            test_mask=splits.test[nodes].copy(),
            layout=layout,
        ))
    return views


def cut_fraction(g: Graph, views: Sequence[PartitionedView]) -> float:
    if g.m == 0:
        return 0.0
    owner = views[0].layout.owner
    return float(np.mean(owner[g.edges[:, 0]] != owner[g.edges[:, 1]]))


def reconstruct_edges(views: Sequence[PartitionedView]) -> np.ndarray:
    """Union of internal edges and deduplicated interconnections, as sorted pairs."""
    parts = [v.internal_edges for v in views]
    parts += [np.sort(v.interconnections, axis=1) for v in views]
    e = np.concatenate([p.reshape(-1, 2) for p in parts], axis=0)
    if e.size == 0:
        return np.empty((0, 2), dtype=np.int64)
    return np.unique(e, axis=0)


# --------------------------------------------------------------------------
# generators


def _triu_pairs(n: int, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Map linear indices over the strict upper triangle of an n x n matrix to (i, j)."""
    idx = idx.astype(np.int64)
    total = n * (n - 1) // 2
    # row i has n-1-i entries; find i from the reversed triangular index
    rev = total - 1 - idx
    k = np.floor((np.sqrt(8.0 * rev + 1.0) - 1.0) / 2.0).astype(np.int64)
    # guard float rounding on both sides
    k = np.where((k + 1) * (k + 2) // 2 <= rev, k + 1, k)
    k = np.where(k * (k + 1) // 2 > rev, k - 1, k)
    i = n - 2 - k
    start = i * (2 * n - i - 1) // 2
    j = idx - start + i + 1
    return i, j


def _sample_pairs(rng: np.random.Generator, total: int, p: float) -> np.ndarray:
    if total == 0 or p <= 0.0:
        return np.empty(0, dtype=np.int64)
    if p >= 1.0:
        return np.arange(total, dtype=np.int64)
    k = rng.binomial(total, p)
    return np.sort(rng.choice(total, size=k, replace=False))


def _block_features(labels: np.ndarray, d: int, signal: float, rng: np.random.Generator) -> np.ndarray:
    n = labels.size
    x = rng.standard_normal((n, d))
    if signal and d:
        n_cls = int(labels.max()) + 1
        centers = rng.standard_normal((n_cls, d))
        centers /= np.linalg.norm(centers, axis=1, keepdims=True)
        x += signal * centers[labels]
    return x


def sbm_generate(block_sizes: Sequence[int], p_in: float, p_out: float, seed: int = 0,
                 feature_dim: int = 8, feature_signal: float = 0.0) -> Graph:
    """Planted-partition SBM; node labels are block indices.

    Features are standard normal noise plus ``feature_signal`` times a random unit
    vector per block.
    """
    for p in (p_in, p_out):
        if not 0.0 <= p <= 1.0:
            raise GraphError("probabilities must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    sizes = np.asarray(block_sizes, dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    n = int(offsets[-1])
    chunks = []
    for a in range(sizes.size):
        na = int(sizes[a])
        idx = _sample_pairs(rng, na * (na - 1) // 2, p_in)
        i, j = _triu_pairs(na, idx)
        chunks.append(np.stack([i, j], axis=1) + offsets[a])
        for b in range(a + 1, sizes.size):
            nb = int(sizes[b])
            idx = _sample_pairs(rng, na * nb, p_out)
            chunks.append(np.stack([idx // nb + offsets[a], idx % nb + offsets[b]], axis=1))
    edges = np.concatenate(chunks, axis=0) if chunks else np.empty((0, 2), np.int64)
    labels = np.repeat(np.arange(sizes.size), sizes)
    x = _block_features(labels, feature_dim, feature_signal, rng)
    return build_graph(edges, x, labels)


def bernoulli_graph(n: int, p: float, seed: int = 0, feature_dim: int = 1) -> Graph:
    """Erdos-Renyi G(n, p): every unordered pair is an edge independently with prob. ``p``."""
    if not 0.0 <= p <= 1.0:
        raise GraphError("probability must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    idx = _sample_pairs(rng, n * (n - 1) // 2, p)
    i, j = _triu_pairs(n, idx)
    x = rng.standard_normal((n, feature_dim))
    return build_graph(np.stack([i, j], axis=1), x)
