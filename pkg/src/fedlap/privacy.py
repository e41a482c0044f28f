"""Edge membership-inference attack on the offline phase and its closed-form theory."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy import stats
from scipy.sparse.linalg import lsqr
from scipy.special import ndtr

from .graph import bernoulli_graph, views_from_owner

SIGMA_RIDGE = 1e-10


class PrivacyError(ValueError):
    pass


def Phi(x):
    """Standard normal CDF."""
    return ndtr(x)


@dataclass(frozen=True)
class AttackSetting:
    n: int
    p: float
    r: int
    gamma: float = 0.0
    sigma: float = 0.0
    n_attacker: Optional[int] = None
    p_assumed: Optional[float] = None   # attacker's belief about p; None means it knows p

    def __post_init__(self) -> None:
        if not 0.0 < self.p < 1.0:
            raise PrivacyError("p must lie in (0, 1)")
        if self.p_assumed is not None and not 0.0 < self.p_assumed < 1.0:
            raise PrivacyError("p_assumed must lie in (0, 1)")
        if not 1 <= self.r <= self.n:
            raise PrivacyError("need 1 <= r <= n")


@dataclass(frozen=True, eq=False)
class LlrTheory:
    Q: np.ndarray
    p: float
    mu: np.ndarray
    Sigma: np.ndarray
    Sigma_inv: np.ndarray
    alpha: np.ndarray       # alpha_v for every row v of Q

    @property
    def B(self) -> np.ndarray:
        return self.Q @ self.Sigma_inv


@dataclass(frozen=True)
class CurvePoint:
    gamma: float
    tpr: float
    fpr: float
    precision: float
    recall: float


def build_theory(Q_est: np.ndarray, p: float) -> LlrTheory:
    """Gaussian model of ``U_u``: mean ``p 1^T Q``, covariance ``p(1-p) Q^T Q``."""
    Q = np.asarray(Q_est, dtype=np.float64)
    if not 0.0 < p < 1.0:
        raise PrivacyError("p must lie in (0, 1)")
    mu = p * Q.sum(axis=0)
    Sigma = p * (1.0 - p) * (Q.T @ Q)
    Sigma = 0.5 * (Sigma + Sigma.T)
    w, V = np.linalg.eigh(Sigma)
    if w.min() < -1e-8 * max(1.0, abs(w.max())):
        raise PrivacyError("covariance is not positive semi-definite")
    w = np.maximum(w, 0.0) + SIGMA_RIDGE
    if w.max() / w.min() > 1e15:
        raise PrivacyError("covariance is singular beyond regularization")
    Sigma_inv = (V / w) @ V.T
    alpha = np.einsum("ij,jk,ik->i", Q, Sigma_inv, Q)
    return LlrTheory(Q=Q, p=p, mu=mu, Sigma=Sigma, Sigma_inv=Sigma_inv, alpha=np.maximum(alpha, 0.0))


def attacker_observable(A_block, Q_est: np.ndarray, *, mode: str = "direct", degrees=None, A_cross=None,
                        Q_other=None, H=None) -> np.ndarray:
    """Observation matrix ``U`` that the attacker treats as ``A_breve Q_breve``.

    ``direct`` multiplies the (secret) target block directly, the favourable
    assumption for the attacker. ``transcript`` rebuilds it from public Arnoldi
    outputs through the block rows of ``L Q = Q H``:
    ``U = D_1 Q_breve - A_12 Q_2 - Q_breve H``.
    """
    Q = np.asarray(Q_est, dtype=np.float64)
    if mode == "direct":
        A = A_block
        if A.shape[0] != A.shape[1] or A.shape[1] != Q.shape[0]:
            raise PrivacyError(f"shape mismatch: A {A.shape}, Q {Q.shape}")
        return np.asarray(A @ Q, dtype=np.float64)
    if mode == "transcript":
        d = np.asarray(degrees, dtype=np.float64)
        if d.shape[0] != Q.shape[0] or A_cross.shape != (Q.shape[0], Q_other.shape[0]) or H.shape[0] != Q.shape[1]:
            raise PrivacyError("shape mismatch in transcript-mode observable")
        return d[:, None] * Q - A_cross @ Q_other - Q @ H
    raise PrivacyError(f"unknown mode {mode!r}")


def _center(theory: LlrTheory, u, v, centering: str):
    Q = theory.Q
    if centering == "unconditional":
        return np.broadcast_to(theory.mu, (u.size, Q.shape[1]))
    if centering == "pair":
        # mean of U_u given A_uv = 1 when A_uu = 0: all other entries still Bernoulli(p)
        p = theory.p
        return theory.mu[None, :] - p * Q[u] + (1.0 - p) * Q[v]
    raise PrivacyError(f"unknown centering {centering!r}")


def llr(U: np.ndarray, theory: LlrTheory, u, v, centering: str = "pair"):
    """Log-likelihood ratio of ``A_uv = 1`` against ``A_uv = 0``; vectorized over pairs.

    ``unconditional`` centering uses the unconditional mean ``mu`` as the mean under
    ``H_1``. ``pair`` centering uses the exact conditional mean of ``U_u`` under
    ``H_1`` (it removes the ``v`` contribution already inside ``mu`` and the
    missing self-loop at ``u``), which makes the statistic symmetric around 0.
    """
    scalar = np.isscalar(u)
    u = np.atleast_1d(np.asarray(u))
    v = np.atleast_1d(np.asarray(v))
    Q = theory.Q
    m = _center(theory, u, v, centering)
    x = U[u] - m + 0.5 * Q[v]
    out = np.einsum("ij,ij->i", x, Q[v] @ theory.Sigma_inv)
    return float(out[0]) if scalar else out


# --------------------------------------------------------------------------
# closed-form theory


def alpha_approx(r: int, n: int, p: float) -> float:
    return r / (n * p * (1.0 - p))


def kl_gap(r: int, n: int, p: float) -> float:
    """Closed-form KL divergence between the two LLR laws, ``r / (2 n p (1-p))``."""
    if not 0.0 < p < 1.0:
        raise PrivacyError("p must lie in (0, 1)")
    return r / (2.0 * n * p * (1.0 - p))


def kl_exact(Q_est: np.ndarray, p: float) -> np.ndarray:
    """Per-node ``alpha_v / 2`` computed from a given basis estimate."""
    return build_theory(Q_est, p).alpha / 2.0


def gamma_grid(alpha: float, points: int = 201) -> np.ndarray:
    s = math.sqrt(alpha)
    return np.linspace(-alpha / 2 - 5 * s, alpha / 2 + 5 * s, points)


def _precision(p: float, tpr, fpr):
    tpr = np.asarray(tpr, dtype=np.float64)
    fpr = np.asarray(fpr, dtype=np.float64)
    num = p * tpr
    den = num + (1.0 - p) * fpr
    # nothing predicted positive: precision taken as 1 by convention
    return np.where(den > 0, num / np.where(den > 0, den, 1.0), 1.0)


def theory_rates(alpha: float, gammas, p: float):
    g = np.asarray(gammas, dtype=np.float64)
    s = math.sqrt(alpha)
    tpr = 1.0 - Phi((g - alpha / 2) / s)
    fpr = 1.0 - Phi((g + alpha / 2) / s)
    return tpr, fpr, _precision(p, tpr, fpr)


def theory_curves(setting: AttackSetting, gammas=None, alpha: Optional[float] = None) -> list:
    """TPR/FPR/precision/recall of the Gaussian LLR test over a threshold grid."""
    a = alpha_approx(setting.r, setting.n, setting.p) if alpha is None else alpha
    if not a > 0:
        raise PrivacyError("alpha must be positive")
    g = gamma_grid(a) if gammas is None else np.asarray(gammas, dtype=np.float64)
    tpr, fpr, prec = theory_rates(a, g, setting.p)
    return [CurvePoint(float(x), float(t), float(f), float(pr), float(t)) for x, t, f, pr in zip(g, tpr, fpr, prec)]


def max_precision_plus_recall(p: float, n: int, r: int, points: int = 201) -> float:
    a = alpha_approx(r, n, p)
    tpr, fpr, prec = theory_rates(a, gamma_grid(a, points), p)
    return float(np.max(prec + tpr))


def r_sweep(pairs: Sequence[tuple], r_grid: Sequence[int], mode: str = "theory", trials: int = 20000,
            seed: int = 0) -> list:
    """Rows ``{p, n, r, max_pr}`` of the best precision + recall at every rank."""
    rows = []
    for p, n in pairs:
        for r in r_grid:
            if r > n:
                continue
            if mode == "theory":
                best = max_precision_plus_recall(p, n, r)
            elif mode == "empirical":
                res = run_attack(AttackSetting(n=n, p=p, r=r), trials=trials, seed=seed, attacker="strong",
                                 basis="random")
                best = max(c.precision + c.recall for c in res.empirical)
            else:
                raise PrivacyError(f"unknown sweep mode {mode!r}")
            rows.append({"p": p, "n": n, "r": int(r), "max_pr": float(best)})
    return rows


def threshold_rank(p: float, n: int, r_grid: Sequence[int], level: float = 1.02) -> Optional[int]:
    """Smallest rank in ``r_grid`` whose best precision + recall exceeds ``level``."""
    for r in sorted(r_grid):
        if r <= n and max_precision_plus_recall(p, n, r) > level:
            return int(r)
    return None


# --------------------------------------------------------------------------
# Monte Carlo


def random_orthonormal(n: int, r: int, rng: np.random.Generator) -> np.ndarray:
    """Delocalized orthonormal columns (Haar-like)."""
    Q, R = np.linalg.qr(rng.standard_normal((n, r)))
    return Q * np.sign(np.diag(R))


def hadamard_basis(n: int, r: int) -> np.ndarray:
    """``r`` columns of a normalized Hadamard matrix: every row has squared norm ``r/n``."""
    from scipy.linalg import hadamard

    if n & (n - 1):
        raise PrivacyError("Hadamard basis needs n to be a power of two")
    return hadamard(n)[:, 1:r + 1].astype(np.float64) / math.sqrt(n)


def sample_pairs(A: sp.csr_matrix, rng: np.random.Generator, max_pos: Optional[int] = None):
    """All (or ``max_pos``) edges as ordered pairs plus the same number of non-edges."""
    upper = sp.triu(A, k=1).tocoo()
    pos = np.stack([upper.row, upper.col], axis=1)
    flip = rng.random(pos.shape[0]) < 0.5
    pos[flip] = pos[flip][:, ::-1]
    if max_pos is not None and pos.shape[0] > max_pos:
        pos = pos[rng.choice(pos.shape[0], size=max_pos, replace=False)]
    n = A.shape[0]
    k = pos.shape[0]
    neg = np.empty((0, 2), dtype=np.int64)
    while neg.shape[0] < k:
        cand = rng.integers(0, n, size=(2 * (k - neg.shape[0]) + 16, 2))
        cand = cand[cand[:, 0] != cand[:, 1]]
        hit = np.asarray(A[cand[:, 0], cand[:, 1]]).ravel() != 0
        neg = np.concatenate([neg, cand[~hit]], axis=0)
    return pos, neg[:k]


@dataclass
class LlrLawReport:
    samples_h1: int
    samples_h0: int
    mean_ratio_h1: float
    mean_ratio_h0: float
    var_ratio_h1: float
    var_ratio_h0: float
    ks_h1: float
    ks_h0: float
    alpha_mean: float

    @property
    def ks(self) -> float:
        return max(self.ks_h1, self.ks_h0)


def validate_llr_law(n: int, p: float, r: int, samples: int = 20000, seed: int = 0,
                      Q_est: Optional[np.ndarray] = None, centering: str = "pair") -> LlrLawReport:
    """Monte-Carlo check of the Gaussian LLR laws with a fixed delocalized basis.

    Bernoulli graphs are drawn until ``samples`` pairs per hypothesis are
    collected. Means are compared with ``+-alpha_v/2`` and variances with
    ``alpha_v`` averaged over the sampled pairs; KS distances use the
    standardized statistic ``(LLR -+ alpha_v/2)/sqrt(alpha_v)``.
    """
    rng = np.random.default_rng(seed)
    Q = random_orthonormal(n, r, rng) if Q_est is None else np.asarray(Q_est, dtype=np.float64)
    th = build_theory(Q, p)
    z1, z0, l1, l0, a1, a0 = [], [], [], [], [], []
    got = 0
    trial = 0
    while got < samples:
        g = bernoulli_graph(n, p, seed=int(rng.integers(2 ** 31)) + trial)
        trial += 1
        A = g.adjacency.astype(np.float64)
        U = attacker_observable(A, Q)
        pos, neg = sample_pairs(A, rng, max_pos=samples - got)
        if pos.shape[0] == 0:
            continue
        for pairs, ls, als in ((pos, l1, a1), (neg, l0, a0)):
            ls.append(llr(U, th, pairs[:, 0], pairs[:, 1], centering))
            als.append(th.alpha[pairs[:, 1]])
        got += pos.shape[0]
    l1, l0, a1, a0 = (np.concatenate(x) for x in (l1, l0, a1, a0))
    z1 = (l1 - a1 / 2) / np.sqrt(a1)
    z0 = (l0 + a0 / 2) / np.sqrt(a0)
    return LlrLawReport(
        samples_h1=int(l1.size), samples_h0=int(l0.size),
        mean_ratio_h1=float(l1.mean() / (a1.mean() / 2)),
        mean_ratio_h0=float(l0.mean() / (-a0.mean() / 2)),
        var_ratio_h1=float(np.var(l1 - a1 / 2) / a1.mean()),
        var_ratio_h0=float(np.var(l0 + a0 / 2) / a0.mean()),
        ks_h1=float(stats.kstest(z1, "norm").statistic),
        ks_h0=float(stats.kstest(z0, "norm").statistic),
        alpha_mean=float(th.alpha.mean()),
    )


def empirical_curve(llr_pos: np.ndarray, llr_neg: np.ndarray, gammas, p: float) -> list:
    g = np.asarray(gammas, dtype=np.float64)
    sp_ = np.sort(llr_pos)
    sn = np.sort(llr_neg)
    tpr = 1.0 - np.searchsorted(sp_, g, side="left") / max(sp_.size, 1)
    fpr = 1.0 - np.searchsorted(sn, g, side="left") / max(sn.size, 1)
    prec = _precision(p, tpr, fpr)
    return [CurvePoint(float(a), float(t), float(f), float(pr), float(t)) for a, t, f, pr in zip(g, tpr, fpr, prec)]


def matched_recall_gap(empirical: Sequence[CurvePoint], theory: Sequence[CurvePoint]) -> float:
    """Largest ``P_emp - P_theory`` at matched recall.

    For each theory point the empirical precision is the best one achieved at a
    recall at least as large (interpolated precision), so the gap is an upper
    bound on what the empirical attack attains.
    """
    er = np.array([c.recall for c in empirical])
    ep = np.array([c.precision for c in empirical])
    worst = -np.inf
    for c in theory:
        ok = er >= c.recall - 1e-12
        if not np.any(ok) or c.recall <= 0.0:
            continue
        worst = max(worst, float(ep[ok].max() - c.precision))
    return worst


@dataclass
class AttackResult:
    setting: AttackSetting
    attacker: str
    empirical: list
    theory: list
    llr_pos: np.ndarray
    llr_neg: np.ndarray
    pairs: int
    graphs: int
    alpha_empirical: float

    def dominance_gap(self) -> float:
        return matched_recall_gap(self.empirical, self.theory)


def _two_client_graph(n1: int, n2: int, p: float, seed: int):
    g = bernoulli_graph(n1 + n2, p, seed=seed)
    owner = np.concatenate([np.zeros(n1, dtype=np.int64), np.ones(n2, dtype=np.int64)])
    return g, views_from_owner(g, owner)


def least_norm_estimate(A_21: sp.spmatrix, tau: np.ndarray) -> np.ndarray:
    """Minimum-norm ``X`` with ``A_21 X = tau``, one column at a time."""
    A = sp.csr_matrix(A_21, dtype=np.float64)
    cols = [lsqr(A, tau[:, j], atol=1e-12, btol=1e-12, iter_lim=10 * sum(A.shape))[0] for j in range(tau.shape[1])]
    return np.stack(cols, axis=1)


def run_attack(setting: AttackSetting, trials: int = 10000, seed: int = 0, attacker: str = "realistic",
               basis: str = "arnoldi", centering: str = "pair", gammas=None, backend: str = "mock") -> AttackResult:
    """Sample graphs and run the LLR attack against the target client's block.

    ``attacker``: ``strong`` uses the true target rows of the basis and the
    direct observable; ``realistic`` only uses what the attacking client sees
    during decentralized Arnoldi (the aggregated vectors ``A_21 q_1``), solves for
    a least-norm basis estimate and builds the observable from the transcript.
    ``basis``: ``arnoldi`` (two-client decentralized run), ``eigen`` (dense
    eigenvectors of the whole graph) or ``random`` (a delocalized orthonormal
    basis independent of the graph; the setting of the Gaussian LLR law, strong attacker only).
    """
    from .fednet import decentralized_arnoldi
    from .spectral import dense_basis

    if trials < 1:
        raise PrivacyError("trials must be positive")
    if attacker not in ("strong", "realistic"):
        raise PrivacyError(f"unknown attacker {attacker!r}")
    if attacker == "realistic" and basis != "arnoldi":
        raise PrivacyError("the realistic attacker needs a decentralized Arnoldi transcript")
    n1 = setting.n
    n2 = setting.n_attacker if setting.n_attacker is not None else setting.n
    p, r = setting.p, setting.r
    rng = np.random.default_rng(seed)
    pos_all, neg_all, alphas = [], [], []
    pairs = graphs = 0
    Q_fixed = random_orthonormal(n1, r, rng) if basis == "random" else None
    while pairs < trials:
        gseed = int(rng.integers(2 ** 31))
        graphs += 1
        if basis == "random":
            g = bernoulli_graph(n1, p, seed=gseed)
            A11 = g.adjacency.astype(np.float64)
            Qh, U = Q_fixed, attacker_observable(A11, Q_fixed)
        else:
            g, views = _two_client_graph(n1, n2, p, gseed)
            A11 = views[0].local_adjacency.astype(np.float64)
            if basis == "eigen":
                Qh = dense_basis(g, r).U[:n1]
                U = attacker_observable(A11, Qh)
            elif basis == "arnoldi":
                run = decentralized_arnoldi(views, r, seed=gseed, backend=backend)
                if attacker == "strong":
                    Qh = run.Q_blocks[0]
                    U = attacker_observable(A11, Qh)
                else:
                    att = views[1]
                    taus = [rec.values for rec in run.transcript.plaintext_view(1) if rec.kind == "matvec"]
                    tau = np.stack(taus[: run.m], axis=1)
                    A21 = att.row_block[:, views[0].internal_nodes].astype(np.float64)
                    Qh = least_norm_estimate(A21, tau)
                    U = attacker_observable(None, Qh, mode="transcript", degrees=views[0].degrees,
                                            A_cross=A21.T.tocsr(), Q_other=run.Q_blocks[1], H=run.H)
            else:
                raise PrivacyError(f"unknown basis {basis!r}")
        th = build_theory(Qh, p if setting.p_assumed is None else setting.p_assumed)
        pos, neg = sample_pairs(sp.csr_matrix(A11), rng, max_pos=max(1, (trials - pairs + 1) // 2))
        if pos.shape[0] == 0:
            if graphs > 50:
                raise PrivacyError("degenerate sampling: no positive pairs; increase n or p")
            continue
        pos_all.append(llr(U, th, pos[:, 0], pos[:, 1], centering))
        neg_all.append(llr(U, th, neg[:, 0], neg[:, 1], centering))
        alphas.append(th.alpha.mean())
        pairs += 2 * pos.shape[0]
    lp, ln_ = np.concatenate(pos_all), np.concatenate(neg_all)
    a = alpha_approx(r, n1, p)
    g = gamma_grid(a) if gammas is None else np.asarray(gammas, dtype=np.float64)
    return AttackResult(setting=setting, attacker=attacker, empirical=empirical_curve(lp, ln_, g, p),
                        theory=theory_curves(setting, g), llr_pos=lp, llr_neg=ln_, pairs=pairs, graphs=graphs,
                        alpha_empirical=float(np.mean(alphas)))


def curves_csv(rows: Sequence[dict], header: str = "") -> str:
    buf = io.StringIO()
    if header:
        buf.write(header)
    fields = ["p", "n", "r", "gamma", "tpr", "fpr", "precision", "recall", "source"]
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: row[k] for k in fields})
    return buf.getvalue()


def curve_rows(setting: AttackSetting, points: Sequence[CurvePoint], source: str) -> list:
    return [{"p": setting.p, "n": setting.n, "r": setting.r, "source": source, **asdict(c)} for c in points]
