"""Prediction heads with hand-written backpropagation."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from ..graph import PartitionedView

MODES = ("fedlap", "fedlap-plus", "none")


class ModelError(ValueError):
    pass


def mlp_init(dims: Sequence[int], rng: np.random.Generator) -> list:
    """Glorot-uniform weights, zero biases. ``dims`` runs from input to output."""
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        layers.append((rng.uniform(-bound, bound, size=(fan_in, fan_out)), np.zeros(fan_out)))
    return layers


def mlp_forward(layers: Sequence[tuple], X: np.ndarray):
    """ReLU hidden layers, linear output. Returns ``(out, cache)``."""
    cache = [X]
    h = X
    for k, (W, b) in enumerate(layers):
        h = h @ W + b
        if k < len(layers) - 1:
            h = np.maximum(h, 0.0)
        cache.append(h)
    return h, cache


def mlp_backward(layers: Sequence[tuple], cache: list, dout: np.ndarray, need_input_grad: bool = False):
    grads = [None] * len(layers)
    d = dout
    for k in range(len(layers) - 1, -1, -1):
        W, _ = layers[k]
        if k < len(layers) - 1:
            d = d * (cache[k + 1] > 0.0)
        grads[k] = (cache[k].T @ d, d.sum(axis=0))
        if k > 0 or need_input_grad:
            d = d @ W.T
    return grads, (d if need_input_grad else None)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass(frozen=True, eq=False)
class ModelState:
    """Head parameters plus the structural parameters.

    ``struct`` is the full ``n x d_s`` NSF matrix ``S`` in ``fedlap`` mode (each
    client only reads and writes its own rows), the ``r x d_s`` matrix ``W`` in
    ``fedlap-plus`` mode and ``None`` when the structure head is removed.
    """

    theta_f: list
    theta_s: list
    struct: Optional[np.ndarray]
    mode: str

    def shared_vector(self) -> np.ndarray:
        """Parameters averaged by the server (everything except ``S``)."""
        parts = [a.ravel() for W, b in self.theta_f for a in (W, b)]
        parts += [a.ravel() for W, b in self.theta_s for a in (W, b)]
        if self.mode == "fedlap-plus":
            parts.append(self.struct.ravel())
        return np.concatenate(parts) if parts else np.zeros(0)

    def with_shared_vector(self, vec: np.ndarray) -> "ModelState":
        pos = 0

        def take(shape):
            nonlocal pos
            size = int(np.prod(shape))
            out = vec[pos:pos + size].reshape(shape).copy()
            pos += size
            return out

        tf = [(take(W.shape), take(b.shape)) for W, b in self.theta_f]
        ts = [(take(W.shape), take(b.shape)) for W, b in self.theta_s]
        struct = take(self.struct.shape) if self.mode == "fedlap-plus" else self.struct
        if pos != vec.size:
            raise ModelError("parameter vector has the wrong length")
        return replace(self, theta_f=tf, theta_s=ts, struct=struct)

    def full_vector(self) -> np.ndarray:
        v = self.shared_vector()
        if self.mode == "fedlap":
            v = np.concatenate([v, self.struct.ravel()])
        return v

    def with_full_vector(self, vec: np.ndarray) -> "ModelState":
        k = self.shared_vector().size
        st = self.with_shared_vector(vec[:k])
        if self.mode == "fedlap":
            st = replace(st, struct=vec[k:].reshape(self.struct.shape).copy())
        return st

    def shapes(self) -> dict:
        return {
            "theta_f": [[list(W.shape), list(b.shape)] for W, b in self.theta_f],
            "theta_s": [[list(W.shape), list(b.shape)] for W, b in self.theta_s],
            "struct": None if self.struct is None else list(self.struct.shape),
        }


def init_state(mode: str, d_in: int, n_classes: int, *, d_s: int = 16, r: Optional[int] = None,
               n: Optional[int] = None, hidden: Sequence[int] = (32,), struct_hidden: Sequence[int] = (32,),
               seed: int = 0) -> ModelState:
    if mode not in MODES:
        raise ModelError(f"unknown mode {mode!r}")
    tf = mlp_init([d_in, *hidden, n_classes], np.random.default_rng([seed, 0]))
    ts: list = []
    struct = None
    if mode != "none":
        ts = mlp_init([d_s, *struct_hidden, n_classes], np.random.default_rng([seed, 1]))
        rng = np.random.default_rng([seed, 2])
        if mode == "fedlap":
            if n is None:
                raise ModelError("fedlap mode needs the node count n")
            struct = rng.standard_normal((n, d_s)) / np.sqrt(d_s)
        else:
            if r is None:
                raise ModelError("fedlap-plus mode needs the rank r")
            struct = rng.standard_normal((r, d_s)) / np.sqrt(d_s)
            struct = struct / np.linalg.norm(struct)
    return ModelState(theta_f=tf, theta_s=ts, struct=struct, mode=mode)


def mean_aggregation(view: PartitionedView) -> sp.csr_matrix:
    """Row-normalized ``I + A_ii``: mean over the node and its internal neighbours."""
    M = (sp.identity(view.n_i, format="csr") + view.local_adjacency.astype(np.float64)).tocsr()
    deg = np.asarray(M.sum(axis=1)).ravel()
    return (sp.diags(1.0 / deg) @ M).tocsr()


def feature_inputs(view: PartitionedView, form: str = "mean") -> np.ndarray:
    if form == "mlp":
        return view.features.copy()
    if form == "mean":
        return mean_aggregation(view) @ view.features
    raise ModelError(f"unknown feature head form {form!r}")


def feature_head(view: PartitionedView, theta_f, v: int, form: str = "mean") -> np.ndarray:
    """Logits of the feature head for internal node ``v`` (global id)."""
    a = view.local_position(v)
    X = feature_inputs(view, form)
    return mlp_forward(theta_f, X[a:a + 1])[0][0]


def struct_input(state: ModelState, view: PartitionedView, struct_rows: Optional[np.ndarray]) -> Optional[np.ndarray]:
    """Rows fed to the structure head: ``S_i`` or ``U_i W``.

    ``struct_rows`` is the client's ``U`` block in ``fedlap-plus`` mode and is
    ignored otherwise.
    """
    if state.mode == "none":
        return None
    if state.mode == "fedlap":
        return state.struct[view.internal_nodes]
    if struct_rows is None or struct_rows.shape[0] != view.n_i:
        raise ModelError(f"client {view.client_id} has no spectral rows")
    return struct_rows @ state.struct


def predict(view: PartitionedView, state: ModelState, basis_or_nsf, v: int, form: str = "mean") -> np.ndarray:
    """Class probabilities for internal node ``v``.

    ``basis_or_nsf`` is the client's ``U`` block (``fedlap-plus``) or ``None``.
    """
    a = view.local_position(v)
    logits = feature_head(view, state.theta_f, v, form)
    Z = struct_input(state, view, basis_or_nsf)
    if Z is not None:
        logits = logits + mlp_forward(state.theta_s, Z[a:a + 1])[0][0]
    return softmax(logits)
