"""Arnoldi iteration, symmetric tridiagonal eigensolver and spectral bases."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from .graph import Graph, Laplacian, laplacian, laplacian_operator

INVARIANT_TOL = 1e-10


class SpectralError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ArnoldiFactorization:
    """Output of ``m`` Arnoldi steps: ``L Q = Q H + h q_next e_m^T``.

    ``Q`` may be a row block of the global basis when produced by a client.
    """

    Q: np.ndarray
    H: np.ndarray
    residual_norm: float
    next_vector: Optional[np.ndarray]

    @property
    def m(self) -> int:
        return int(self.H.shape[0])

    @property
    def breakdown(self) -> bool:
        return self.next_vector is None


@dataclass(frozen=True, eq=False)
class SpectralBasis:
    U: np.ndarray
    lambdas: np.ndarray
    node_ids: Optional[np.ndarray] = None
    client_id: Optional[int] = None

    @property
    def r(self) -> int:
        return int(self.lambdas.size)

    @property
    def n(self) -> int:
        return int(self.U.shape[0])


def _norm(x: np.ndarray) -> float:
    # sqrt of a dot product, so that block-wise sums reproduce it exactly for one block
    return math.sqrt(float(x @ x))


def default_start_vector(n: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(n)


def arnoldi(apply_operator: Callable[[np.ndarray], np.ndarray], n: int, m: int,
            start_vector: Optional[np.ndarray] = None, *, seed: int = 0,
            scale: Optional[float] = None, tol: float = INVARIANT_TOL) -> ArnoldiFactorization:
    """Run ``m`` Arnoldi steps with classical Gram-Schmidt applied twice.

    Stops early with ``residual_norm = 0`` once the new residual drops below
    ``tol * scale``. ``scale`` should be a norm of the operator (the Frobenius norm
    of L for graphs); when omitted, the largest ``||A q||`` seen so far is used.
    """
    if m < 1 or m > n:
        raise SpectralError(f"need 1 <= m <= n, got m={m}, n={n}")
    x = default_start_vector(n, seed) if start_vector is None else np.asarray(start_vector, dtype=np.float64)
    if x.shape != (n,):
        raise SpectralError(f"start vector has shape {x.shape}, expected ({n},)")
    beta = _norm(x)
    if beta == 0.0:
        raise SpectralError("start vector is zero")

    Q = np.zeros((n, m + 1), order="F")
    H = np.zeros((m + 1, m))
    Q[:, 0] = x / beta
    running = 0.0
    for j in range(m):
        w = apply_operator(Q[:, j])
        if scale is None:
            running = max(running, _norm(w))
        Qj = Q[:, : j + 1]
        h1 = Qj.T @ w
        w = w - Qj @ h1
        h2 = Qj.T @ w
        w = w - Qj @ h2
        H[: j + 1, j] = h1 + h2
        res = _norm(w)
        thresh = tol * (scale if scale is not None else running)
        if res <= thresh:
            k = j + 1
            return ArnoldiFactorization(Q=np.asfortranarray(Q[:, :k]), H=H[:k, :k].copy(),
                                        residual_norm=0.0, next_vector=None)
        H[j + 1, j] = res
        Q[:, j + 1] = w / res
    return ArnoldiFactorization(Q=np.asfortranarray(Q[:, :m]), H=H[:m, :m].copy(),
                                residual_norm=float(H[m, m - 1]), next_vector=Q[:, m].copy())


def arnoldi_graph(g: Graph, m: int, start_vector: Optional[np.ndarray] = None, *, seed: int = 0,
                  tol: float = INVARIANT_TOL) -> ArnoldiFactorization:
    """Centralized reference run on the Laplacian of ``g``."""
    scale = laplacian(g).frobenius_norm()
    return arnoldi(laplacian_operator(g), g.n, m, start_vector, seed=seed,
                   scale=scale if scale > 0 else 1.0, tol=tol)


# --------------------------------------------------------------------------
# symmetric tridiagonal eigensolver


def _householder_tridiagonal(A: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Reduce symmetric ``A`` to tridiagonal form ``T = P^T A P``. Returns (diag, offdiag, P)."""
    A = A.copy()
    m = A.shape[0]
    P = np.eye(m)
    for k in range(m - 2):
        x = A[k + 1:, k]
        alpha = -math.copysign(_norm(x), x[0]) if x[0] != 0 else -_norm(x)
        v = x.copy()
        v[0] -= alpha
        vn = _norm(v)
        if vn == 0.0:
            continue
        v /= vn
        # A <- H A H with H = I - 2 v v^T on the trailing block
        sub = A[k + 1:, k:]
        sub -= 2.0 * np.outer(v, v @ sub)
        sub = A[k:, k + 1:]
        sub -= 2.0 * np.outer(sub @ v, v)
        Pk = P[:, k + 1:]
        Pk -= 2.0 * np.outer(Pk @ v, v)
    return np.diag(A).copy(), np.diag(A, -1).copy(), P


def _tql_implicit(d: list, e: list, Z: Optional[np.ndarray], max_iter: int = 60) -> None:
    """In-place implicit-shift QL on a symmetric tridiagonal matrix.

    ``d`` is the diagonal, ``e[i]`` couples rows ``i`` and ``i+1`` (``e[-1]`` unused).
    Rotations are accumulated into the columns of ``Z`` when given.
    """
    m = len(d)
    eps = np.finfo(float).eps
    for l in range(m):
        it = 0
        while True:
            mm = l
            while mm < m - 1:
                dd = abs(d[mm]) + abs(d[mm + 1])
                if abs(e[mm]) <= eps * dd:
                    break
                mm += 1
            if mm == l:
                break
            it += 1
            if it > max_iter:
                raise SpectralError("tridiagonal QL failed to converge")
            g = (d[l + 1] - d[l]) / (2.0 * e[l])
            r = math.hypot(g, 1.0)
            g = d[mm] - d[l] + e[l] / (g + math.copysign(r, g))
            s = c = 1.0
            p = 0.0
            i = mm - 1
            deflated = False
            while i >= l:
                f = s * e[i]
                b = c * e[i]
                r = math.hypot(f, g)
                e[i + 1] = r
                if r == 0.0:
                    d[i + 1] -= p
                    e[mm] = 0.0
                    deflated = True
                    break
                s = f / r
                c = g / r
                g = d[i + 1] - p
                r = (d[i] - g) * s + 2.0 * c * b
                p = s * r
                d[i + 1] = g + p
                g = c * r - b
                if Z is not None:
                    zi = Z[:, i].copy()
                    zj = Z[:, i + 1]
                    Z[:, i] = c * zi - s * zj
                    Z[:, i + 1] = s * zi + c * zj
                i -= 1
            if deflated:
                continue
            d[l] -= p
            e[l] = g
            e[mm] = 0.0


def hessenberg_eig(H: np.ndarray, compute_vectors: bool = True, sym_tol: float = 1e-8):
    """Eigen-decomposition of a symmetric (tridiagonal) Hessenberg matrix.

    Returns ``(V, sigma)`` with ``sigma`` ascending; ties keep solver order. Each
    eigenvector is signed so that its largest-magnitude entry is positive. With
    ``compute_vectors=False`` the first element is ``None``.
    """
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise SpectralError("H must be square")
    m = H.shape[0]
    hnorm = float(np.linalg.norm(H))
    asym = float(np.max(np.abs(H - H.T))) if m else 0.0
    if asym > sym_tol * max(1.0, hnorm):
        raise SpectralError(f"H is not symmetric (max asymmetry {asym:.3e})")
    Hs = 0.5 * (H + H.T)
    band = np.triu(np.abs(Hs), 2)
    if m > 2 and band.max() > sym_tol * max(1.0, hnorm):
        d, off, P = _householder_tridiagonal(Hs)
    else:
        d, off, P = np.diag(Hs).copy(), np.diag(Hs, -1).copy(), None

    dl = [float(x) for x in d]
    el = [float(x) for x in off] + [0.0]
    Z = None
    if compute_vectors:
        Z = np.asfortranarray(np.eye(m)) if P is None else np.asfortranarray(P)
    _tql_implicit(dl, el, Z)
    sigma = np.asarray(dl)
    order = np.argsort(sigma, kind="stable")
    sigma = sigma[order]
    if not compute_vectors:
        return None, sigma
    V = Z[:, order]
    if m:
        pivot = np.argmax(np.abs(V), axis=0)
        signs = np.sign(V[pivot, np.arange(m)])
        signs[signs == 0] = 1.0
        V = V * signs
    return np.ascontiguousarray(V), sigma


def ritz_values(f: ArnoldiFactorization) -> np.ndarray:
    return hessenberg_eig(f.H, compute_vectors=False)[1]


def spectral_basis(f: ArnoldiFactorization, r: int, node_ids: Optional[np.ndarray] = None,
                   client_id: Optional[int] = None, eig=None) -> SpectralBasis:
    """Keep the ``r`` smallest Ritz pairs: ``U_r = Q V[:, :r]``.

    ``eig`` may pass a precomputed ``(V, sigma)`` of ``f.H`` so clients sharing the
    same ``H`` need not decompose it again.
    """
    if r < 1:
        raise SpectralError("r must be >= 1")
    if r > f.m:
        raise SpectralError(f"requested r={r} but only m={f.m} Arnoldi vectors are available")
    V, sigma = hessenberg_eig(f.H) if eig is None else eig
    U = f.Q @ V[:, :r]
    lam = np.maximum(sigma[:r], 0.0)
    return SpectralBasis(U=np.ascontiguousarray(U), lambdas=lam, node_ids=node_ids, client_id=client_id)


def dense_basis(g: Graph, r: Optional[int] = None) -> SpectralBasis:
    """Oracle basis from a dense symmetric eigensolver (for tests and small graphs)."""
    lam, U = np.linalg.eigh(laplacian(g).toarray())
    r = g.n if r is None else r
    return SpectralBasis(U=U[:, :r].copy(), lambdas=np.maximum(lam[:r], 0.0))


def concat_bases(parts) -> SpectralBasis:
    """Stack per-client bases into one global basis ordered by node id."""
    n = sum(p.n for p in parts)
    r = parts[0].r
    U = np.zeros((n, r))
    for p in parts:
        U[p.node_ids] = p.U
    return SpectralBasis(U=U, lambdas=parts[0].lambdas.copy(), node_ids=np.arange(n))


def reconstruct_adjacency(basis: SpectralBasis, degrees, rule: str = "projected") -> np.ndarray:
    """Approximate ``A`` from a truncated basis.

    ``degree-shift`` returns ``D - U Lambda U^T``. ``projected`` returns the
    projection of ``A`` onto the span of ``U``:
    ``U (U^T D U - Lambda) U^T``. Both are exact at full rank.
    """
    deg = np.asarray(degrees, dtype=np.float64)
    U, lam = basis.U, basis.lambdas
    if deg.shape != (U.shape[0],):
        raise SpectralError(f"degree vector of length {deg.size} does not match basis with n={U.shape[0]}")
    if rule == "degree-shift":
        out = np.diag(deg) - (U * lam) @ U.T
    elif rule == "projected":
        core = (U.T * deg) @ U - np.diag(lam)
        out = U @ core @ U.T
    else:
        raise SpectralError(f"unknown reconstruction rule {rule!r}")
    return 0.5 * (out + out.T)


def _as_sparse_laplacian(L) -> sp.csr_matrix:
    if isinstance(L, Laplacian):
        return L.matrix.astype(np.float64)
    if sp.issparse(L):
        return sp.csr_matrix(L, dtype=np.float64)
    return sp.csr_matrix(np.asarray(L, dtype=np.float64))


def rayleigh_trace_form(L, S) -> float:
    Lm = _as_sparse_laplacian(L)
    S = np.asarray(S, dtype=np.float64).reshape(Lm.shape[0], -1)
    den = float(np.sum(S * S))
    if den == 0.0:
        raise SpectralError("S is zero; Rayleigh quotient undefined")
    return float(np.sum(S * (Lm @ S))) / den


def rayleigh_edge_form(L, S) -> float:
    Lm = sp.triu(_as_sparse_laplacian(L), k=1).tocoo()
    S = np.asarray(S, dtype=np.float64).reshape(Lm.shape[0], -1)
    den = float(np.sum(S * S))
    if den == 0.0:
        raise SpectralError("S is zero; Rayleigh quotient undefined")
    diff = S[Lm.row] - S[Lm.col]
    # off-diagonal entries of L are -1 on edges
    return float(np.sum(-Lm.data[:, None] * diff * diff)) / den


def rayleigh_quotient(L, S, check_tol: float = 1e-9) -> float:
    """``Tr(S^T L S) / Tr(S^T S)``, cross-checked against the sum over edges."""
    t = rayleigh_trace_form(L, S)
    e = rayleigh_edge_form(L, S)
    if abs(t - e) > check_tol * max(1.0, abs(t)):
        raise SpectralError(f"trace and edge forms disagree: {t!r} vs {e!r}")
    return t


# --------------------------------------------------------------------------
# serialization

_MAGIC = b"SPB1"


def basis_to_bytes(basis: SpectralBasis) -> bytes:
    header = _MAGIC + b"<\x00\x00\x00" + struct.pack("<QQ", basis.n, basis.r)
    body = np.ascontiguousarray(basis.U, dtype="<f8").tobytes(order="C")
    lam = np.ascontiguousarray(basis.lambdas, dtype="<f8").tobytes()
    return header + body + lam


def basis_from_bytes(blob: bytes) -> SpectralBasis:
    if blob[:4] != _MAGIC:
        raise SpectralError("not a spectral basis file")
    tag = blob[4:5]
    if tag not in (b"<", b">"):
        raise SpectralError("bad endianness tag")
    n, r = struct.unpack(tag.decode() + "QQ", blob[8:24])
    dt = np.dtype(tag.decode() + "f8")
    need = 24 + 8 * (n * r + r)
    if len(blob) != need:
        raise SpectralError(f"basis file has {len(blob)} bytes, expected {need}")
    U = np.frombuffer(blob, dtype=dt, count=n * r, offset=24).reshape(n, r).astype(np.float64)
    lam = np.frombuffer(blob, dtype=dt, count=r, offset=24 + 8 * n * r).astype(np.float64)
    return SpectralBasis(U=U, lambdas=lam)


def save_basis(basis: SpectralBasis, path, extra: Optional[dict] = None) -> dict:
    """Write the binary basis and a ``.json`` sidecar; returns the sidecar dict."""
    path = Path(path)
    blob = basis_to_bytes(basis)
    path.write_bytes(blob)
    meta = {
        "n": basis.n,
        "r": basis.r,
        "endianness": "little",
        "sha256": hashlib.sha256(blob).hexdigest(),
        "sha256_U": hashlib.sha256(blob[24:24 + 8 * basis.n * basis.r]).hexdigest(),
        "sha256_lambdas": hashlib.sha256(blob[24 + 8 * basis.n * basis.r:]).hexdigest(),
        "client_id": basis.client_id,
        "node_ids": None if basis.node_ids is None else [int(v) for v in basis.node_ids],
    }
    if extra:
        meta.update(extra)
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return meta


def load_basis(path, verify: bool = True) -> SpectralBasis:
    path = Path(path)
    blob = path.read_bytes()
    side = path.with_suffix(path.suffix + ".json")
    meta = json.loads(side.read_text()) if side.exists() else {}
    if verify and meta and hashlib.sha256(blob).hexdigest() != meta["sha256"]:
        raise SpectralError(f"checksum mismatch for {path}")
    b = basis_from_bytes(blob)
    ids = meta.get("node_ids")
    return SpectralBasis(U=b.U, lambdas=b.lambdas,
                         node_ids=None if ids is None else np.asarray(ids, dtype=np.int64),
                         client_id=meta.get("client_id"))
