"""Decentralized Arnoldi over the secure-aggregation fabric."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..graph import PartitionedView
from ..spectral import INVARIANT_TOL, ArnoldiFactorization, SpectralError, default_start_vector
from .transcript import SERVER, AggregationGroup, Fabric, ProtocolTranscript


class ProtocolError(RuntimeError):
    pass


def _check_views(views: Sequence[PartitionedView]) -> None:
    if not views:
        raise ProtocolError("no client views")
    pid = views[0].layout.partition_id
    for i, v in enumerate(views):
        if v.client_id != i or v.layout.partition_id != pid:
            raise ProtocolError("views do not come from one partition")


def cross_blocks(views: Sequence[PartitionedView]) -> dict:
    """``(i, k) -> A[V_i, V_k]`` as held by client ``k`` (from its column knowledge)."""
    K = len(views)
    return {(i, k): views[k].block_towards(i) for k in range(K) for i in range(K) if i != k}


def all_clients(K: int) -> AggregationGroup:
    return AggregationGroup("all", tuple(range(K)))


def distributed_matvec(views: Sequence[PartitionedView], q_blocks: Sequence[np.ndarray],
                       fabric: Optional[Fabric] = None, blocks: Optional[dict] = None) -> list:
    """Per-client blocks of ``L q``.

    Client ``i`` computes ``D_i q_i - A_ii q_i`` locally; every other client ``k``
    contributes ``A[V_i, V_k] q_k`` to a secure sum released only to ``i``.
    """
    _check_views(views)
    K = len(views)
    if len(q_blocks) != K or any(np.shape(q)[0] != v.n_i for q, v in zip(q_blocks, views)):
        raise ProtocolError("q blocks do not match the partition")
    fabric = fabric if fabric is not None else Fabric("mock")
    blocks = blocks if blocks is not None else cross_blocks(views)
    out = []
    for i, v in enumerate(views):
        qi = q_blocks[i]
        local = v.local_adjacency @ qi
        if K > 1:
            group = AggregationGroup(f"matvec->{i}", tuple(k for k in range(K) if k != i))
            contrib = {k: blocks[(i, k)] @ q_blocks[k] for k in group.members}
            tau = fabric.secure_sum(group, contrib, [i], "matvec")
            local = local + tau
        out.append(v.degrees.astype(np.float64) * qi - local)
    return out


def distributed_inner_product(x_blocks, y_blocks, fabric: Optional[Fabric] = None, kind: str = "dot"):
    """Global ``<x, y>``; each client contributes its partial product (scalar or vector)."""
    if len(x_blocks) != len(y_blocks):
        raise ProtocolError("block count mismatch")
    for x, y in zip(x_blocks, y_blocks):
        if np.shape(x)[0] != np.shape(y)[0]:
            raise ProtocolError("block length mismatch")
    fabric = fabric if fabric is not None else Fabric("mock")
    K = len(x_blocks)
    contrib = {i: np.atleast_1d(np.asarray(x).T @ np.asarray(y)) for i, (x, y) in enumerate(zip(x_blocks, y_blocks))}
    total = fabric.secure_sum(all_clients(K), contrib, list(range(K)), kind)
    return float(total[0]) if total.size == 1 and np.ndim(x_blocks[0]) == 1 else total


def distributed_norm(x_blocks, fabric: Optional[Fabric] = None, kind: str = "norm") -> float:
    return math.sqrt(distributed_inner_product(x_blocks, x_blocks, fabric, kind))


@dataclass(eq=False)
class DecentralizedArnoldi:
    """Per-client Arnoldi output plus the shared Hessenberg matrix."""

    Q_blocks: list
    H: np.ndarray
    residual_norm: float
    next_blocks: Optional[list]
    views: Sequence[PartitionedView] = field(repr=False)
    fabric: Fabric = field(repr=False)

    @property
    def transcript(self) -> ProtocolTranscript:
        return self.fabric.transcript

    @property
    def m(self) -> int:
        return int(self.H.shape[0])

    def client_factorization(self, i: int) -> ArnoldiFactorization:
        nxt = None if self.next_blocks is None else self.next_blocks[i]
        return ArnoldiFactorization(Q=self.Q_blocks[i], H=self.H, residual_norm=self.residual_norm, next_vector=nxt)

    def assemble(self) -> ArnoldiFactorization:
        """Stack the row blocks into a global factorization (test/oracle use only)."""
        n = self.views[0].layout.n
        Q = np.zeros((n, self.m), order="F")
        nxt = None if self.next_blocks is None else np.zeros(n)
        for v, qb in zip(self.views, self.Q_blocks):
            Q[v.internal_nodes] = qb
            if nxt is not None:
                nxt[v.internal_nodes] = self.next_blocks[v.client_id]
        return ArnoldiFactorization(Q=Q, H=self.H, residual_norm=self.residual_norm, next_vector=nxt)


def decentralized_arnoldi(views: Sequence[PartitionedView], r: int, seed: int = 0,
                          backend="mock", fabric: Optional[Fabric] = None,
                          start_vector: Optional[np.ndarray] = None,
                          tol: float = INVARIANT_TOL) -> DecentralizedArnoldi:
    """Run ``r`` Arnoldi steps where each client only ever holds its own rows of ``Q``.

    Shared scalars (norms and Gram-Schmidt coefficients) come out of secure sums
    and are released to every client; the server sees ciphertexts only.
    """
    _check_views(views)
    K = len(views)
    n = views[0].layout.n
    if r < 1 or r > n:
        raise SpectralError(f"need 1 <= r <= n, got r={r}, n={n}")
    fabric = fabric if fabric is not None else Fabric(backend, session_seed=seed)
    everyone = list(range(K))
    group = all_clients(K)
    blocks = cross_blocks(views)

    fabric.set_phase("offline")
    # every client draws the same seeded vector and keeps its own rows
    if start_vector is None:
        x_blocks = [default_start_vector(n, seed)[v.internal_nodes] for v in views]
    else:
        x = np.asarray(start_vector, dtype=np.float64)
        if x.shape != (n,):
            raise SpectralError(f"start vector has shape {x.shape}, expected ({n},)")
        x_blocks = [x[v.internal_nodes] for v in views]

    fro_parts = {}
    for v in views:
        d = v.degrees.astype(np.float64)
        fro_parts[v.client_id] = np.array([np.sum(d * d + d)])
    scale = math.sqrt(float(fabric.secure_sum(group, fro_parts, everyone, "lapnorm")[0]))
    scale = scale if scale > 0 else 1.0

    beta = distributed_norm(x_blocks, fabric)
    if beta == 0.0:
        raise SpectralError("start vector is zero")
    Qs = [np.zeros((v.n_i, r + 1), order="F") for v in views]
    for Qi, xi in zip(Qs, x_blocks):
        Qi[:, 0] = xi / beta
    H = np.zeros((r + 1, r))

    for j in range(r):
        w = distributed_matvec(views, [Qi[:, j] for Qi in Qs], fabric, blocks)
        cols = [Qi[:, : j + 1] for Qi in Qs]
        h1 = fabric.secure_sum(group, {i: cols[i].T @ w[i] for i in everyone}, everyone, "gs")
        w = [w[i] - cols[i] @ h1 for i in everyone]
        h2 = fabric.secure_sum(group, {i: cols[i].T @ w[i] for i in everyone}, everyone, "gs")
        w = [w[i] - cols[i] @ h2 for i in everyone]
        H[: j + 1, j] = h1 + h2
        res = distributed_norm(w, fabric)
        if res <= tol * scale:
            k = j + 1
            return DecentralizedArnoldi([np.asfortranarray(Qi[:, :k]) for Qi in Qs], H[:k, :k].copy(), 0.0,
                                        None, views, fabric)
        H[j + 1, j] = res
        for Qi, wi in zip(Qs, w):
            Qi[:, j + 1] = wi / res
    return DecentralizedArnoldi([np.asfortranarray(Qi[:, :r]) for Qi in Qs], H[:r, :r].copy(),
                                float(H[r, r - 1]), [Qi[:, r].copy() for Qi in Qs], views, fabric)


def _matches(values: np.ndarray, target: np.ndarray, tol: float) -> bool:
    if values.shape != target.shape or not np.any(target):
        return False
    return bool(np.allclose(values, target, atol=tol, rtol=0) or np.allclose(values, -target, atol=tol, rtol=0))


def knowledge_audit(transcript: ProtocolTranscript, views: Sequence[PartitionedView],
                    q_blocks: Optional[Sequence[np.ndarray]] = None, tol: float = 1e-12,
                    min_length: int = 2) -> list:
    """Return a list of confinement violations found in the parties' plaintext views.

    A violation is a decrypted vector equal (up to sign) to another client's
    ``Q`` column or to a row of its internal adjacency, or any plaintext the
    server obtained during the offline phase. Vectors shorter than
    ``min_length`` are skipped, since single scalars coincide trivially.
    """
    problems = []
    for rec in transcript.plaintext_view(SERVER):
        if rec.phase == "offline":
            problems.append(f"server decrypted {rec.kind} in round {rec.round}")
    secrets = {}
    for v in views:
        k = v.client_id
        items = []
        if v.n_i >= min_length:
            A = v.local_adjacency.toarray().astype(np.float64)
            items += [("adjacency row", A[a]) for a in range(v.n_i)]
            if q_blocks is not None:
                Qk = np.asarray(q_blocks[k])
                items += [("q column", Qk[:, c]) for c in range(Qk.shape[1])]
        secrets[k] = items
    for party in transcript.parties():
        for rec in transcript.plaintext_view(party):
            vals = np.asarray(rec.values, dtype=np.float64)
            if vals.size < min_length:
                continue
            for k, items in secrets.items():
                if party == k:
                    continue
                for what, target in items:
                    if _matches(vals, target, tol):
                        problems.append(f"party {party} holds client {k}'s {what} ({rec.kind}, round {rec.round})")
    return problems
