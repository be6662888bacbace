"""Block-Toeplitz sparse Gaussian cluster models.

A cluster is a Gaussian over stacked windows of ``omega`` consecutive logit
rows. Its precision matrix is constrained to be block-Toeplitz (the C x C
block between window positions r and s depends only on s - r) and is fit by
an l1-penalised maximum-likelihood problem solved with ADMM.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Union

import numpy as np

from .core import InputError, NumericalError, write_matrix

RIDGE = 1e-6
SUPPORT_TOL = 1e-4
LOG_2PI = math.log(2.0 * math.pi)


class EmptyCluster(Exception):
    """A cluster has no windows assigned to it."""


@dataclass(frozen=True)
class GlassoConfig:
    """ADMM settings.

    ``lam`` is a scalar or an ``(omega*C) x (omega*C)`` mask. A scalar is
    broadcast to every entry except the main diagonal unless
    ``penalize_diagonal`` is set.
    """
    lam: Union[float, np.ndarray] = 0.0
    rho: float = 1.0
    max_iter: int = 1000
    eps_abs: float = 1e-5
    eps_rel: float = 1e-4
    penalize_diagonal: bool = False

    def __post_init__(self):
        if not self.rho > 0:
            raise InputError(f"rho must be positive, got {self.rho}")
        if not (self.eps_abs > 0 and self.eps_rel > 0):
            raise InputError("ADMM tolerances must be positive")
        if self.max_iter < 1:
            raise InputError("max_iter must be >= 1")
        if np.any(np.asarray(self.lam) < 0):
            raise InputError("lambda must be non-negative")

    def mask(self, n: int) -> np.ndarray:
        lam = np.asarray(self.lam, dtype=float)
        if lam.ndim == 0:
            m = np.full((n, n), float(lam))
            if not self.penalize_diagonal:
                np.fill_diagonal(m, 0.0)
            return m
        if lam.shape != (n, n):
            raise InputError(f"lambda mask has shape {lam.shape}, expected {(n, n)}")
        return lam


@dataclass
class ClusterModel:
    theta: np.ndarray
    mean: np.ndarray
    logdet: float
    n_assigned: int
    omega: int
    C: int
    converged: bool = True
    n_iter: int = 0
    objective_trace: list = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.theta.shape[0]

    def block(self, offset: int) -> np.ndarray:
        """The C x C block ``A^(offset)`` (rows at position ``offset``, columns at 0)."""
        C = self.C
        return self.theta[offset * C:(offset + 1) * C, :C]


# ------------------------------------------------------------------ windows

def stack_windows(logits, omega: int) -> np.ndarray:
    """Concatenate ``omega`` consecutive rows; row t covers epochs t..t+omega-1.

    The window's assignment is attributed to its last epoch, ``t + omega - 1``.
    """
    z = np.asarray(getattr(logits, "probs", logits), dtype=float)
    if z.ndim != 2:
        raise InputError("logits must be a P x C matrix")
    P, C = z.shape
    if not 1 <= omega <= P:
        raise InputError(f"omega must be in [1, P={P}], got {omega}")
    return np.stack([z[t:t + omega].ravel() for t in range(P - omega + 1)])


def unstack_windows(windows, omega: int, C: int) -> np.ndarray:
    W = np.asarray(windows)
    rows = [W[0, k * C:(k + 1) * C] for k in range(omega)]
    rows.extend(W[t, (omega - 1) * C:] for t in range(1, W.shape[0]))
    return np.stack(rows)


def empirical_stats(windows, ridge: float = RIDGE) -> tuple[np.ndarray, np.ndarray]:
    """Sample mean and biased sample covariance plus ``ridge * I``."""
    W = np.asarray(windows, dtype=float)
    if W.ndim != 2 or W.shape[0] == 0:
        raise EmptyCluster("no windows assigned")
    mu = W.mean(axis=0)
    D = W - mu
    S = D.T @ D / W.shape[0]
    return mu, S + ridge * np.eye(W.shape[1])


# --------------------------------------------------------------------- ADMM

def soft_threshold(a, t):
    return np.sign(a) * np.maximum(np.abs(a) - t, 0.0)


def theta_update(S, Zc, U, rho: float) -> np.ndarray:
    """Minimiser of ``-logdet T + tr(S T) + rho/2 ||T - Zc + U||_F^2``."""
    M = rho * (np.asarray(Zc) - np.asarray(U)) - np.asarray(S)
    if not np.allclose(M, M.T, atol=1e-10 * max(1.0, np.abs(M).max())):
        raise NumericalError("theta_update needs symmetric inputs")
    d, Q = np.linalg.eigh(0.5 * (M + M.T))
    x = (d + np.sqrt(d * d + 4.0 * rho)) / (2.0 * rho)
    T = (Q * x) @ Q.T
    return 0.5 * (T + T.T)


@lru_cache(maxsize=64)
def toeplitz_classes(omega: int, C: int) -> tuple[np.ndarray, int]:
    """Integer class id for every entry of an (omega*C)^2 block-Toeplitz matrix.

    Entries sharing an id are tied: same block offset, same within-block
    position, plus the symmetric mirror.
    """
    n = omega * C
    a = np.arange(n)
    r, i = (a // C)[:, None], (a % C)[:, None]
    s, j = (a // C)[None, :], (a % C)[None, :]
    d = s - r
    ii = np.where(d > 0, i, np.where(d < 0, j, np.minimum(i, j)))
    jj = np.where(d > 0, j, np.where(d < 0, i, np.maximum(i, j)))
    ids = np.abs(d) * C * C + ii * C + jj
    ids = np.broadcast_to(ids, (n, n)).copy()
    ids.setflags(write=False)
    return ids, omega * C * C


def toeplitz_prox(A, lam, rho: float, omega: int, C: int) -> np.ndarray:
    """Block-Toeplitz projection followed by class-wise soft-thresholding.

    Each class of tied entries is replaced by
    ``soft_threshold(mean(a), mean(lam) / rho)``, the exact minimiser of
    ``sum_m lam_m |z| + rho/2 sum_m (z - a_m)^2``.
    """
    A = np.asarray(A, dtype=float)
    n = omega * C
    if A.shape != (n, n):
        raise InputError(f"matrix shape {A.shape} does not match omega*C = {n}")
    lam = np.broadcast_to(np.asarray(lam, dtype=float), (n, n))
    ids, n_cls = toeplitz_classes(omega, C)
    flat = ids.ravel()
    counts = np.bincount(flat, minlength=n_cls)
    used = counts > 0
    sums = np.bincount(flat, weights=A.ravel(), minlength=n_cls)
    lsum = np.bincount(flat, weights=lam.ravel(), minlength=n_cls)
    z = np.zeros(n_cls)
    z[used] = soft_threshold(sums[used] / counts[used], lsum[used] / counts[used] / rho)
    return z[ids]


def glasso_objective(S, T, lam_mask) -> float:
    """``-logdet T + tr(S T) + ||lam o T||_1``; ``inf`` when T is not PD."""
    try:
        L = np.linalg.cholesky(T)
    except np.linalg.LinAlgError:
        return math.inf
    logdet = 2.0 * float(np.log(np.diag(L)).sum())
    return -logdet + float(np.sum(S * T)) + float(np.sum(lam_mask * np.abs(T)))


def _cholesky_logdet(T) -> tuple[np.ndarray, float]:
    """Cholesky log-determinant, retrying up to 3 times with 1e-8 * I jitter."""
    eye = np.eye(T.shape[0])
    for attempt in range(4):
        Tj = T + attempt * 1e-8 * eye
        try:
            L = np.linalg.cholesky(Tj)
        except np.linalg.LinAlgError:
            continue
        return Tj, 2.0 * float(np.log(np.diag(L)).sum())
    raise NumericalError("precision matrix is not positive definite after jitter")


def solve_toeplitz_glasso(S, cfg: GlassoConfig, omega: int, C: int, init=None):
    """ADMM for the block-Toeplitz graphical lasso.

    Returns ``(Z, converged, n_iter, objective_trace)`` where ``Z`` is the
    constrained (Toeplitz, thresholded) iterate.
    """
    S = np.asarray(S, dtype=float)
    n = omega * C
    if S.shape != (n, n):
        raise InputError(f"covariance shape {S.shape} does not match omega*C = {n}")
    lam = cfg.mask(n)
    rho = cfg.rho
    Z = np.eye(n) if init is None else np.array(init, dtype=float)
    U = np.zeros((n, n))
    trace = []
    converged = False
    it = 0
    for it in range(1, cfg.max_iter + 1):
        T = theta_update(S, Z, U, rho)
        Z_prev = Z
        Z = toeplitz_prox(T + U, lam, rho, omega, C)
        U = U + T - Z
        trace.append(glasso_objective(S, Z, lam))
        r = np.linalg.norm(T - Z)
        s = rho * np.linalg.norm(Z - Z_prev)
        eps_pri = n * cfg.eps_abs + cfg.eps_rel * max(np.linalg.norm(T), np.linalg.norm(Z))
        eps_dual = n * cfg.eps_abs + cfg.eps_rel * rho * np.linalg.norm(U)
        if r <= eps_pri and s <= eps_dual:
            converged = True
            break
    return Z, converged, it, trace


def fit_cluster(windows, cfg: GlassoConfig, omega: int, C: int, init=None) -> ClusterModel:
    """Fit mean and block-Toeplitz sparse precision to the windows of one cluster."""
    W = np.asarray(windows, dtype=float)
    if W.ndim != 2 or W.shape[0] == 0:
        raise EmptyCluster("no windows assigned")
    if W.shape[1] != omega * C:
        raise InputError(f"windows have {W.shape[1]} columns, expected omega*C = {omega * C}")
    mu, S = empirical_stats(W)
    return _model_from_cov(mu, S, W.shape[0], cfg, omega, C, init)


def _model_from_cov(mu, S, n_assigned, cfg, omega, C, init=None) -> ClusterModel:
    Z, converged, n_iter, trace = solve_toeplitz_glasso(S, cfg, omega, C, init)
    Z, logdet = _cholesky_logdet(Z)
    return ClusterModel(Z, mu, logdet, int(n_assigned), omega, C, converged, n_iter, trace)


def log_likelihood(w, m: ClusterModel) -> float:
    """Gaussian log-density of one stacked window under a cluster model."""
    return float(log_likelihoods(np.atleast_2d(w), m)[0])


def log_likelihoods(W, m: ClusterModel) -> np.ndarray:
    D = np.atleast_2d(np.asarray(W, dtype=float)) - m.mean
    quad = np.einsum("ni,ij,nj->n", D, m.theta, D)
    return -0.5 * quad + 0.5 * m.logdet - 0.5 * m.dim * LOG_2PI


# ------------------------------------------------------------------ exports

def is_block_toeplitz(theta, omega: int, C: int, tol: float = 1e-8) -> bool:
    T = np.asarray(theta)
    for r in range(omega - 1):
        for s in range(omega - 1):
            a = T[r * C:(r + 1) * C, s * C:(s + 1) * C]
            b = T[(r + 1) * C:(r + 2) * C, (s + 1) * C:(s + 2) * C]
            if np.max(np.abs(a - b)) > tol:
                return False
    return True


def support_adjacency(m: ClusterModel, tol: float = SUPPORT_TOL) -> list[list[int]]:
    """Binarised off-diagonal support of the same-time block ``A^(0)``."""
    A0 = m.block(0)
    adj = (np.abs(A0) > tol).astype(int)
    np.fill_diagonal(adj, 0)
    return adj.tolist()


def save_model(m: ClusterModel, path, lam, channel_names=None) -> dict:
    path = Path(path)
    write_matrix(path, m.theta, "cluster.theta", omega=m.omega, C=m.C)
    write_matrix(path.with_name(path.stem + "_mean.bin"), m.mean, "cluster.mean")
    lam_arr = np.asarray(lam)
    manifest = {
        "omega": m.omega, "C": m.C,
        "lambda": float(lam_arr) if lam_arr.ndim == 0 else "mask",
        "converged": bool(m.converged), "n_assigned": int(m.n_assigned),
        "n_iter": int(m.n_iter), "logdet": m.logdet,
        "theta_file": path.name,
    }
    path.with_name(path.stem + "_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    adj = {"channels": list(channel_names) if channel_names else list(range(m.C)),
           "adjacency": support_adjacency(m), "threshold": SUPPORT_TOL}
    path.with_name(path.stem + "_A0_adjacency.json").write_text(json.dumps(adj, indent=2) + "\n")
    return manifest
