"""Classification loss plus Laplacian (spatial) or spectral regularizer, and their gradients."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from ..graph import PartitionedView
from ..spectral import SpectralBasis
from .model import ModelError, ModelState, feature_inputs, log_softmax, mlp_backward, mlp_forward, softmax

DENOM_FLOOR = 1e-12


class ObjectiveError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ClientData:
    """Everything a client needs to evaluate its local terms, precomputed once."""

    view: PartitionedView
    X: np.ndarray
    y: np.ndarray
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    U: Optional[np.ndarray]
    deg: np.ndarray
    A_local: sp.csr_matrix
    cross: sp.csr_matrix          # n_i x |V_i*| incidence towards external neighbours
    owned_cross: sp.coo_matrix    # cross edges this client counts in the regularizer

    @property
    def n_train(self) -> int:
        return int(self.train.size)


def client_data(view: PartitionedView, U_block: Optional[np.ndarray] = None, form: str = "mean") -> ClientData:
    ext = view.external_neighbors
    owner = view.layout.owner
    inter = view.interconnections
    if inter.size:
        a = np.searchsorted(view.internal_nodes, inter[:, 0])
        e = np.searchsorted(ext, inter[:, 1])
        cross = sp.csr_matrix((np.ones(a.size), (a, e)), shape=(view.n_i, ext.size))
        # each cut edge is counted once, by the owner with the lower client id
        keep = owner[inter[:, 1]] > view.client_id
        owned = sp.coo_matrix((np.ones(int(keep.sum())), (a[keep], e[keep])), shape=(view.n_i, ext.size))
    else:
        cross = sp.csr_matrix((view.n_i, 0))
        owned = sp.coo_matrix((view.n_i, 0))
    return ClientData(
        view=view,
        X=feature_inputs(view, form),
        y=view.labels.copy(),
        train=np.flatnonzero(view.train_mask),
        val=np.flatnonzero(view.val_mask),
        test=np.flatnonzero(view.test_mask),
        U=None if U_block is None else np.asarray(U_block, dtype=np.float64),
        deg=view.degrees.astype(np.float64),
        A_local=view.local_adjacency.astype(np.float64).tocsr(),
        cross=cross,
        owned_cross=owned,
    )


def u_blocks_from(views: Sequence[PartitionedView], basis) -> list:
    """Per-client ``U`` rows from a global basis or a list of client bases."""
    if basis is None:
        return [None] * len(views)
    if isinstance(basis, SpectralBasis):
        return [basis.U[v.internal_nodes] for v in views]
    out = []
    for v, b in zip(views, basis):
        if b.U.shape[0] != v.n_i:
            raise ObjectiveError(f"client {v.client_id}: basis has {b.U.shape[0]} rows, expected {v.n_i}")
        out.append(b.U)
    return out


@dataclass
class LocalResult:
    """Un-normalized classification terms of one client (sums over its labeled nodes)."""

    ce_sum: float
    grad_f: list
    grad_s: list
    dZ: Optional[np.ndarray]
    logits: np.ndarray


def local_classification(cd: ClientData, state: ModelState, S_local: Optional[np.ndarray] = None) -> LocalResult:
    """Summed cross-entropy over the client's training nodes and its gradient.

    In ``fedlap`` mode ``S_local`` holds the client's own NSF rows.
    """
    out_f, cache_f = mlp_forward(state.theta_f, cd.X)
    logits = out_f
    Z = None
    if state.mode == "fedlap":
        Z = S_local
    elif state.mode == "fedlap-plus":
        if cd.U is None:
            raise ModelError(f"client {cd.view.client_id} has no spectral rows")
        Z = cd.U @ state.struct
    if Z is not None:
        out_s, cache_s = mlp_forward(state.theta_s, Z)
        logits = out_f + out_s
    n_cls = logits.shape[1]
    tr = cd.train
    dlog = np.zeros_like(logits)
    ce = 0.0
    if tr.size:
        y = cd.y[tr]
        if np.any(y < 0) or np.any(y >= n_cls):
            raise ObjectiveError("training node without a valid label")
        lp = log_softmax(logits[tr])
        ce = float(-lp[np.arange(tr.size), y].sum())
        p = np.exp(lp)
        p[np.arange(tr.size), y] -= 1.0
        dlog[tr] = p
    grad_f, _ = mlp_backward(state.theta_f, cache_f, dlog)
    grad_s, dZ = [], None
    if Z is not None:
        grad_s, dZ = mlp_backward(state.theta_s, cache_s, dlog, need_input_grad=True)
    return LocalResult(ce, grad_f, grad_s, dZ, logits)


# --------------------------------------------------------------------------
# regularizers


def spectral_regularizer(W: np.ndarray, lambdas: np.ndarray) -> float:
    den = float(np.sum(W * W))
    if den == 0.0:
        raise ObjectiveError("W is zero; regularizer undefined")
    return float(np.sum(lambdas[:, None] * W * W)) / max(den, DENOM_FLOOR)


def spectral_regularizer_grad(W: np.ndarray, lambdas: np.ndarray) -> np.ndarray:
    """Euclidean gradient ``(2/||W||^2)(Lambda W - R(W) W)``."""
    den = max(float(np.sum(W * W)), DENOM_FLOOR)
    R = spectral_regularizer(W, lambdas)
    return (2.0 / den) * (lambdas[:, None] * W - R * W)


def sphere_gradient(W: np.ndarray, lambdas: np.ndarray) -> np.ndarray:
    """Closed form ``2(Lambda W - W Tr(W^T Lambda W))`` valid on the unit Frobenius sphere."""
    return 2.0 * (lambdas[:, None] * W - W * float(np.sum(lambdas[:, None] * W * W)))


def spatial_partials(cd: ClientData, S_local: np.ndarray, S_ext: np.ndarray) -> tuple[float, float]:
    """Client share of the edge sum and of ``sum ||s_v||^2``."""
    A = cd.A_local.tocoo()
    upper = A.row < A.col
    d_int = S_local[A.row[upper]] - S_local[A.col[upper]]
    num = float(np.sum(d_int * d_int))
    oc = cd.owned_cross
    if oc.nnz:
        d_cut = S_local[oc.row] - S_ext[oc.col]
        num += float(np.sum(d_cut * d_cut))
    return num, float(np.sum(S_local * S_local))


def spatial_grad_rows(cd: ClientData, S_local: np.ndarray, S_ext: np.ndarray, num: float, den: float) -> np.ndarray:
    """``(2/den)((L S)_v - R s_v)`` for the client's rows."""
    den = max(den, DENOM_FLOOR)
    R = num / den
    LS = cd.deg[:, None] * S_local - cd.A_local @ S_local
    if cd.cross.shape[1]:
        LS = LS - cd.cross @ S_ext
    return (2.0 / den) * (LS - R * S_local)


# --------------------------------------------------------------------------
# global evaluation (all clients at once, no fabric); used for checks and
# by the centralized reference trainer


@dataclass(frozen=True, eq=False)
class Problem:
    clients: list
    lambdas: Optional[np.ndarray]
    n_classes: int
    n: int

    @property
    def n_train(self) -> int:
        return sum(c.n_train for c in self.clients)

    def weights(self) -> list:
        tot = self.n_train
        return [c.n_train / tot for c in self.clients]


def build_problem(views: Sequence[PartitionedView], basis=None, n_classes: Optional[int] = None,
                  form: str = "mean", u_scale: float = 1.0) -> Problem:
    """Precompute per-client data.

    ``u_scale`` multiplies the spectral rows before they enter the structure head,
    so the head sees ``u_scale * U_v W``.
    """
    Us = [None if U is None else u_scale * U for U in u_blocks_from(views, basis)]
    clients = [client_data(v, U, form) for v, U in zip(views, Us)]
    lam = None
    if basis is not None:
        lam = basis.lambdas if isinstance(basis, SpectralBasis) else basis[0].lambdas
        lam = np.asarray(lam, dtype=np.float64)
    if n_classes is None:
        n_classes = int(max((c.y.max() for c in clients if c.y.size), default=-1)) + 1
    return Problem(clients=clients, lambdas=lam, n_classes=n_classes, n=views[0].layout.n)


def _ext_rows(cd: ClientData, S: np.ndarray) -> np.ndarray:
    return S[cd.view.external_neighbors]


def regularizer_value(problem: Problem, state: ModelState) -> float:
    if state.mode == "none":
        return 0.0
    if state.mode == "fedlap-plus":
        return spectral_regularizer(state.struct, problem.lambdas)
    num = den = 0.0
    for cd in problem.clients:
        a, b = spatial_partials(cd, state.struct[cd.view.internal_nodes], _ext_rows(cd, state.struct))
        num += a
        den += b
    if den == 0.0:
        raise ObjectiveError("S is zero; regularizer undefined")
    return num / max(den, DENOM_FLOOR)


def loss(problem: Problem, state: ModelState, lambda_reg: float) -> float:
    """``(1/|V~|) sum CE + lambda_reg * R``."""
    if problem.n_train == 0:
        raise ObjectiveError("no labeled training nodes")
    ce = 0.0
    for cd in problem.clients:
        S_loc = state.struct[cd.view.internal_nodes] if state.mode == "fedlap" else None
        ce += local_classification(cd, state, S_loc).ce_sum
    value = ce / problem.n_train
    if state.mode != "none" and lambda_reg:
        value += lambda_reg * regularizer_value(problem, state)
    return value


def _scale_layers(layers, c):
    return [(c * W, c * b) for W, b in layers]


def _add_layers(a, b):
    return [(Wa + Wb, ba + bb) for (Wa, ba), (Wb, bb) in zip(a, b)]


def gradients(problem: Problem, state: ModelState, lambda_reg: float) -> ModelState:
    """Exact gradient of :func:`loss`, returned in the shape of a :class:`ModelState`."""
    N = problem.n_train
    if N == 0:
        raise ObjectiveError("no labeled training nodes")
    gf = _scale_layers(state.theta_f, 0.0)
    gs = _scale_layers(state.theta_s, 0.0)
    gstruct = None if state.struct is None else np.zeros_like(state.struct)
    num = den = None
    if state.mode == "fedlap" and lambda_reg:
        num = den = 0.0
        for cd in problem.clients:
            a, b = spatial_partials(cd, state.struct[cd.view.internal_nodes], _ext_rows(cd, state.struct))
            num += a
            den += b
    for cd in problem.clients:
        rows = cd.view.internal_nodes
        S_loc = state.struct[rows] if state.mode == "fedlap" else None
        res = local_classification(cd, state, S_loc)
        gf = _add_layers(gf, _scale_layers(res.grad_f, 1.0 / N))
        if state.mode != "none":
            gs = _add_layers(gs, _scale_layers(res.grad_s, 1.0 / N))
        if state.mode == "fedlap":
            g = res.dZ * (1.0 / N)
            if lambda_reg:
                g = g + lambda_reg * spatial_grad_rows(cd, S_loc, _ext_rows(cd, state.struct), num, den)
            gstruct[rows] = g
        elif state.mode == "fedlap-plus":
            gstruct += (cd.U.T @ res.dZ) * (1.0 / N)
    if state.mode == "fedlap-plus" and lambda_reg:
        gstruct += lambda_reg * spectral_regularizer_grad(state.struct, problem.lambdas)
    return replace(state, theta_f=gf, theta_s=gs, struct=gstruct)


def accuracy(problem: Problem, state: ModelState) -> dict:
    counts = {"train": [0, 0], "val": [0, 0], "test": [0, 0]}
    for cd in problem.clients:
        S_loc = state.struct[cd.view.internal_nodes] if state.mode == "fedlap" else None
        pred = local_classification(cd, state, S_loc).logits.argmax(axis=1)
        for name, idx in (("train", cd.train), ("val", cd.val), ("test", cd.test)):
            counts[name][0] += int(np.sum(pred[idx] == cd.y[idx]))
            counts[name][1] += int(idx.size)
    return {k: (c / t if t else float("nan")) for k, (c, t) in counts.items()}


def probabilities(problem: Problem, state: ModelState) -> np.ndarray:
    """Softmax outputs for every node, in global node order."""
    out = np.zeros((problem.n, problem.n_classes))
    for cd in problem.clients:
        S_loc = state.struct[cd.view.internal_nodes] if state.mode == "fedlap" else None
        out[cd.view.internal_nodes] = softmax(local_classification(cd, state, S_loc).logits)
    return out
