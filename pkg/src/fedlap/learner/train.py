"""Federated gradient descent for FedLap / FedLap+ and reference trainers."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..fednet.transcript import SERVER, AggregationGroup, Fabric
from ..graph import PartitionedView
from ..npzio import save_npz
from .model import ModelState, init_state, mlp_backward, mlp_forward, log_softmax
from .objective import (
    Problem,
    build_problem,
    gradients,
    local_classification,
    loss,
    regularizer_value,
    spatial_grad_rows,
    spatial_partials,
    spectral_regularizer,
    spectral_regularizer_grad,
    sphere_gradient,
)


class DivergenceError(ArithmeticError):
    pass


@dataclass
class TrainConfig:
    mode: str = "fedlap-plus"
    learning_rate: float = 0.1
    weight_decay: float = 5e-4
    epochs: int = 300
    lambda_reg: float = 0.1
    d_s: int = 16
    r: int = 16
    seed: int = 0
    hidden: tuple = (32,)
    struct_hidden: tuple = (32,)
    feature_form: str = "mean"
    monotone_guard: bool = False
    u_scale: Optional[float] = None   # None: sqrt(n), giving spectral rows of unit average norm per column

    def resolved_u_scale(self, n: int) -> float:
        return math.sqrt(n) if self.u_scale is None else float(self.u_scale)

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.lambda_reg < 0:
            raise ValueError("lambda_reg must be non-negative")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.mode not in ("fedlap", "fedlap-plus", "none"):
            raise ValueError(f"unknown mode {self.mode!r}")
        self.hidden = tuple(self.hidden)
        self.struct_hidden = tuple(self.struct_hidden)


@dataclass
class TrainResult:
    state: ModelState
    metrics: list
    fabric: Optional[Fabric] = None


METRIC_FIELDS = ("epoch", "train_loss", "reg_value", "train_acc", "val_acc", "test_acc")


def initial_state(problem: Problem, cfg: TrainConfig) -> ModelState:
    d_in = problem.clients[0].X.shape[1]
    r = None if problem.lambdas is None else int(problem.lambdas.size)
    if cfg.mode == "fedlap-plus" and r is None:
        raise ValueError("fedlap-plus mode needs a spectral basis")
    return init_state(cfg.mode, d_in, problem.n_classes, d_s=cfg.d_s, r=r, n=problem.n,
                      hidden=cfg.hidden, struct_hidden=cfg.struct_hidden, seed=cfg.seed)


def decay_mask(state: ModelState) -> np.ndarray:
    """Weight decay applies to the head parameters, not to ``W``."""
    m = np.ones(state.shared_vector().size)
    if state.mode == "fedlap-plus":
        m[m.size - state.struct.size:] = 0.0
    return m


def _apply_step(state: ModelState, gvec: np.ndarray, gS: Optional[np.ndarray], lr: float, wd: float,
                mask: np.ndarray) -> ModelState:
    vec = state.shared_vector()
    new = state.with_shared_vector(vec - lr * (gvec + wd * mask * vec))
    if new.mode == "fedlap-plus":
        new = replace(new, struct=new.struct / np.linalg.norm(new.struct))
    elif new.mode == "fedlap":
        new = replace(new, struct=new.struct - lr * gS)
    return new


def boundary_nsf_exchange(views: Sequence[PartitionedView], S: np.ndarray, fabric: Optional[Fabric] = None) -> list:
    """Ship every client the NSF rows of its external neighbours through the server.

    Returns one array per client, aligned with ``view.external_neighbors``.
    """
    fabric = fabric if fabric is not None else Fabric("mock")
    owner = views[0].layout.owner
    d_s = S.shape[1]
    out = []
    for v in views:
        ext = v.external_neighbors
        rows = np.zeros((ext.size, d_s))
        for k in range(len(views)):
            if k == v.client_id:
                continue
            sel = np.flatnonzero(owner[ext] == k)
            if sel.size == 0:
                continue
            payload = S[ext[sel]].ravel()   # sender k reads only its own rows
            got = fabric.relay(k, v.client_id, payload, "nsf")
            rows[sel] = got.reshape(sel.size, d_s)
        out.append(rows)
    return out


def fedsgd_train(views: Sequence[PartitionedView], basis, config: TrainConfig, fabric: Optional[Fabric] = None,
                 n_classes: Optional[int] = None, problem: Optional[Problem] = None) -> TrainResult:
    """Federated gradient descent with server-side weighted averaging.

    ``basis`` is the spectral basis (global or per client) for ``fedlap-plus`` and
    is ignored otherwise. Metrics of epoch ``e`` are evaluated at the parameters
    used for that epoch's update.
    """
    cfg = config
    prob = problem if problem is not None else build_problem(
        views, basis if cfg.mode == "fedlap-plus" else None, n_classes, cfg.feature_form,
        cfg.resolved_u_scale(views[0].layout.n))
    fabric = fabric if fabric is not None else Fabric("mock", session_seed=cfg.seed)
    K = len(views)
    clients = list(range(K))
    group = AggregationGroup("all", tuple(clients))
    lam_reg = cfg.lambda_reg if cfg.mode != "none" else 0.0

    fabric.set_phase("online")
    counts = fabric.secure_sum(group, {i: np.array([float(c.n_train)]) for i, c in enumerate(prob.clients)},
                               clients, "count")
    N = int(counts[0])
    if N == 0:
        raise ValueError("no labeled training nodes in the federation")
    w = [c.n_train / N for c in prob.clients]

    state = initial_state(prob, cfg)
    fabric.broadcast(state.shared_vector(), clients, "params")
    mask = decay_mask(state)
    lr = cfg.learning_rate

    def evaluate(st: ModelState):
        # a diverging run overflows before the finiteness check; keep that quiet
        with np.errstate(over="ignore", invalid="ignore"):
            return _evaluate(st)

    def _evaluate(st: ModelState):
        """One round of local computation plus the aggregations it needs."""
        S_ext = None
        num = den = None
        if st.mode == "fedlap":
            S_ext = boundary_nsf_exchange(views, st.struct, fabric)
            parts = {i: np.array(spatial_partials(c, st.struct[c.view.internal_nodes], S_ext[i]))
                     for i, c in enumerate(prob.clients)}
            num, den = fabric.secure_sum(group, parts, clients, "regstat")
        contrib, metric_parts, gS = {}, {}, None
        if st.mode == "fedlap":
            gS = np.zeros_like(st.struct)
        for i, c in enumerate(prob.clients):
            rows = c.view.internal_nodes
            S_loc = st.struct[rows] if st.mode == "fedlap" else None
            res = local_classification(c, st, S_loc)
            inv = 1.0 / c.n_train if c.n_train else 0.0
            g_head = replace(st, theta_f=[(inv * a, inv * b) for a, b in res.grad_f],
                             theta_s=[(inv * a, inv * b) for a, b in res.grad_s])
            R = 0.0
            if st.mode == "fedlap-plus":
                gW = (c.U.T @ res.dZ) * inv
                R = spectral_regularizer(st.struct, prob.lambdas)
                if lam_reg:
                    gW = gW + lam_reg * spectral_regularizer_grad(st.struct, prob.lambdas)
                g_head = replace(g_head, struct=gW)
            elif st.mode == "fedlap":
                R = num / max(den, 1e-12)
                g = res.dZ * (1.0 / N)
                if lam_reg:
                    g = g + lam_reg * spatial_grad_rows(c, S_loc, S_ext[i], num, den)
                gS[rows] = g
            contrib[i] = w[i] * g_head.shared_vector()
            pred = res.logits.argmax(axis=1)
            metric_parts[i] = np.array([
                res.ce_sum, w[i] * R,
                np.sum(pred[c.train] == c.y[c.train]), c.train.size,
                np.sum(pred[c.val] == c.y[c.val]), c.val.size,
                np.sum(pred[c.test] == c.y[c.test]), c.test.size,
            ], dtype=np.float64)
        gvec = fabric.secure_sum(group, contrib, [SERVER], "grad")
        agg = fabric.secure_sum(group, metric_parts, [SERVER], "metrics")
        reg = float(agg[1])
        row = {
            "train_loss": float(agg[0]) / N + lam_reg * reg,
            "reg_value": reg,
            "train_acc": agg[2] / agg[3] if agg[3] else float("nan"),
            "val_acc": agg[4] / agg[5] if agg[5] else float("nan"),
            "test_acc": agg[6] / agg[7] if agg[7] else float("nan"),
        }
        if not math.isfinite(row["train_loss"]) or not np.all(np.isfinite(gvec)):
            raise DivergenceError("training loss became non-finite")
        return gvec, gS, row

    metrics = []
    prev_state, prev_grads, prev_loss = None, None, None
    for epoch in range(cfg.epochs):
        gvec, gS, row = evaluate(state)
        halvings = 0
        while (cfg.monotone_guard and prev_loss is not None and row["train_loss"] > prev_loss
               and halvings < 3):
            lr *= 0.5
            halvings += 1
            state = _apply_step(prev_state, prev_grads[0], prev_grads[1], lr, cfg.weight_decay, mask)
            fabric.broadcast(state.shared_vector(), clients, "params")
            gvec, gS, row = evaluate(state)
        row = {"epoch": epoch, **row}
        metrics.append(row)
        prev_state, prev_grads, prev_loss = state, (gvec, gS), row["train_loss"]
        state = _apply_step(state, gvec, gS, lr, cfg.weight_decay, mask)
        fabric.broadcast(state.shared_vector(), clients, "params")
        fabric.end_round()
    return TrainResult(state=state, metrics=metrics, fabric=fabric)


def centralized_gd(views: Sequence[PartitionedView], basis, config: TrainConfig,
                   n_classes: Optional[int] = None) -> TrainResult:
    """Plain gradient descent on the global objective with full access (oracle)."""
    cfg = config
    prob = build_problem(views, basis if cfg.mode == "fedlap-plus" else None, n_classes, cfg.feature_form,
                         cfg.resolved_u_scale(views[0].layout.n))
    lam_reg = cfg.lambda_reg if cfg.mode != "none" else 0.0
    state = initial_state(prob, cfg)
    mask = decay_mask(state)
    metrics = []
    for epoch in range(cfg.epochs):
        value = loss(prob, state, lam_reg)
        metrics.append({"epoch": epoch, "train_loss": value})
        g = gradients(prob, state, lam_reg)
        state = _apply_step(state, g.shared_vector(), g.struct if state.mode == "fedlap" else None,
                            cfg.learning_rate, cfg.weight_decay, mask)
    return TrainResult(state=state, metrics=metrics)


def reference_fedsgd(views: Sequence[PartitionedView], config: TrainConfig, n_classes: int) -> TrainResult:
    """Textbook FedSGD on the feature head alone (no structure machinery at all)."""
    cfg = config
    prob = build_problem(views, None, n_classes, cfg.feature_form)
    state = init_state("none", prob.clients[0].X.shape[1], n_classes, hidden=cfg.hidden, seed=cfg.seed)
    layers = state.theta_f
    N = prob.n_train
    losses = []
    for _ in range(cfg.epochs):
        total = None
        ce = 0.0
        for c in prob.clients:
            out, cache = mlp_forward(layers, c.X)
            d = np.zeros_like(out)
            if c.train.size:
                lp = log_softmax(out[c.train])
                y = c.y[c.train]
                ce += float(-lp[np.arange(y.size), y].sum())
                p = np.exp(lp)
                p[np.arange(y.size), y] -= 1.0
                d[c.train] = p
            grads, _ = mlp_backward(layers, cache, d)
            inv = 1.0 / c.n_train if c.n_train else 0.0
            flat = np.concatenate([a.ravel() for W, b in grads for a in (inv * W, inv * b)])
            part = (c.n_train / N) * flat
            total = part if total is None else total + part
        losses.append(ce / N)
        vec = np.concatenate([a.ravel() for W, b in layers for a in (W, b)])
        vec = vec - cfg.learning_rate * (total + cfg.weight_decay * 1.0 * vec)
        state = state.with_shared_vector(vec)
        layers = state.theta_f
    return TrainResult(state=state, metrics=[{"epoch": e, "train_loss": v} for e, v in enumerate(losses)])


# --------------------------------------------------------------------------


def lipschitz_probe(lambdas, trials: int = 1000, seed: int = 0, d_s: int = 4) -> float:
    """Largest observed ``||grad R(W1) - grad R(W2)|| / ||W1 - W2||`` over unit-norm pairs.

    Half of the pairs are independent draws, half are small perturbations of
    each other (which probe the local curvature).
    """
    if trials < 1:
        raise ValueError("trials must be positive")
    lam = np.atleast_1d(np.asarray(lambdas, dtype=np.float64))
    rng = np.random.default_rng(seed)
    best = 0.0
    for t in range(trials):
        W1 = rng.standard_normal((lam.size, d_s))
        W1 /= np.linalg.norm(W1)
        if t % 2 == 0:
            W2 = rng.standard_normal((lam.size, d_s))
        else:
            W2 = W1 + 10.0 ** rng.uniform(-6, -1) * rng.standard_normal((lam.size, d_s))
        W2 /= np.linalg.norm(W2)
        dist = np.linalg.norm(W1 - W2)
        if dist == 0.0:
            continue
        best = max(best, float(np.linalg.norm(sphere_gradient(W1, lam) - sphere_gradient(W2, lam)) / dist))
    return best


def save_checkpoint(state: ModelState, path, *, seed: int, config_hash: str = "") -> dict:
    path = Path(path)
    arrays = {}
    for k, (W, b) in enumerate(state.theta_f):
        arrays[f"f{k}_W"], arrays[f"f{k}_b"] = W, b
    for k, (W, b) in enumerate(state.theta_s):
        arrays[f"s{k}_W"], arrays[f"s{k}_b"] = W, b
    if state.struct is not None:
        arrays["struct"] = state.struct
    save_npz(path, **arrays)
    manifest = {"mode": state.mode, "shapes": state.shapes(), "seed": seed, "config_hash": config_hash}
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_checkpoint(path) -> ModelState:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    with np.load(path) as z:
        tf = [(z[f"f{k}_W"], z[f"f{k}_b"]) for k in range(len(manifest["shapes"]["theta_f"]))]
        ts = [(z[f"s{k}_W"], z[f"s{k}_b"]) for k in range(len(manifest["shapes"]["theta_s"]))]
        struct = z["struct"] if "struct" in z.files else None
    return ModelState(theta_f=tf, theta_s=ts, struct=struct, mode=manifest["mode"])
