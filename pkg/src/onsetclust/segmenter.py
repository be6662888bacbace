"""Temporally consistent subsequence clustering and onset extraction.

EM alternates block-Toeplitz cluster fits (M-step) with an exact
minimum-cost Viterbi assignment under a flat switching penalty (E-step).
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from sklearn.cluster import KMeans

from .core import InputError
from .ticc import (SUPPORT_TOL, ClusterModel, EmptyCluster, GlassoConfig,
                   empirical_stats, log_likelihoods, save_model, solve_toeplitz_glasso,
                   _cholesky_logdet)

log = logging.getLogger(__name__)

DEFAULT_BETA = 10.0
NORMAL, SEIZURE, PREICTAL = "normal", "seizure", "preictal"


@dataclass(frozen=True)
class Assignment:
    labels: np.ndarray
    switch_cost_beta: float = 0.0
    iteration: int = 0

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64).ravel()
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    @property
    def n_switches(self) -> int:
        return int(np.count_nonzero(np.diff(self.labels)))


@dataclass
class Segmentation:
    subsequences: list  # (cluster_id, start_epoch, end_epoch) inclusive
    onsets: list  # dicts: type, from, to, epoch, time_s
    models: list
    converged: bool
    n_iterations: int
    assignment: Optional[Assignment] = None
    epoch_labels: Optional[np.ndarray] = None
    semantics: dict = field(default_factory=dict)
    objective_trace: list = field(default_factory=list)
    k_reduced: bool = False
    omega: int = 1
    stride_s: float = 1.0
    reseeds: list = field(default_factory=list)  # EM iterations that reseeded or dropped a cluster


# ------------------------------------------------------------------ Viterbi

def viterbi_path(costs, beta: float) -> np.ndarray:
    """Exact minimiser of ``sum_p costs[p, y_p] + beta * #{p: y_p != y_(p-1)}``.

    Ties prefer staying in the previous cluster, then the lower cluster id.
    """
    costs = np.asarray(costs, dtype=float)
    if costs.ndim != 2 or costs.shape[0] == 0 or costs.shape[1] == 0:
        raise InputError("cost matrix must be N x K with N, K >= 1")
    if beta < 0:
        raise InputError("beta must be non-negative")
    N, K = costs.shape
    V = costs[0].copy()
    back = np.zeros((N, K), dtype=np.int64)
    ks = np.arange(K)
    for p in range(1, N):
        # best predecessor other than k: lowest-cost cluster, second lowest when it is k itself
        order = np.argsort(V, kind="stable")
        best, second = order[0], order[1] if K > 1 else order[0]
        other = np.where(ks == best, second, best)
        switch = V[other] + beta
        stay = V <= switch if K > 1 else np.ones(K, dtype=bool)
        back[p] = np.where(stay, ks, other)
        V = costs[p] + np.where(stay, V, switch)
    path = np.empty(N, dtype=np.int64)
    path[-1] = int(np.argmin(V))
    for p in range(N - 1, 0, -1):
        path[p - 1] = back[p, path[p]]
    return path


def path_cost(costs, path, beta: float) -> float:
    costs = np.asarray(costs, dtype=float)
    path = np.asarray(path)
    return float(costs[np.arange(len(path)), path].sum() + beta * np.count_nonzero(np.diff(path)))


def cost_matrix(windows, models: Sequence[ClusterModel]) -> np.ndarray:
    """Negative log-likelihood of every window under every cluster."""
    return -np.column_stack([log_likelihoods(windows, m) for m in models])


def viterbi_assign(windows, models: Sequence[ClusterModel], beta: float, iteration: int = 0) -> Assignment:
    if not models:
        raise InputError("need at least one cluster model")
    return Assignment(viterbi_path(cost_matrix(windows, models), beta), beta, iteration)


# ---------------------------------------------------------------------- EM

def initialize_assignment(windows, K: int, seed: int = 0) -> Assignment:
    """k-means on the stacked windows, best of 20 restarts."""
    W = np.asarray(windows, dtype=float)
    if K < 1 or K > W.shape[0]:
        raise InputError(f"K={K} clusters for {W.shape[0]} windows")
    if K == 1:
        return Assignment(np.zeros(W.shape[0], dtype=np.int64))
    km = KMeans(n_clusters=K, n_init=20, random_state=seed).fit(W)
    return Assignment(km.labels_.astype(np.int64))


def _penalty(theta, lam_mask) -> float:
    return float(np.sum(lam_mask * np.abs(theta)))


def _fit_one(W, cfg: GlassoConfig, omega: int, C: int, lam_mask, previous: Optional[ClusterModel]):
    """M-step for one cluster.

    The glasso weight is rescaled by ``2 / n`` so the solve minimises
    ``-sum loglik + ||lam o Theta||_1`` for this cluster's windows. The
    previous precision is kept if it still scores better (keeps EM monotone
    despite the inexact inner solve).
    """
    n = W.shape[0]
    mu, S = empirical_stats(W)
    local = replace(cfg, lam=lam_mask * (2.0 / n))
    init = previous.theta if previous is not None else None
    Z, converged, n_iter, trace = solve_toeplitz_glasso(S, local, omega, C, init)
    Z, logdet = _cholesky_logdet(Z)
    model = ClusterModel(Z, mu, logdet, n, omega, C, converged, n_iter, trace)
    if previous is not None:
        kept = ClusterModel(previous.theta, mu, previous.logdet, n, omega, C,
                            previous.converged, 0, [])
        f_new = -log_likelihoods(W, model).sum() + _penalty(model.theta, lam_mask)
        f_old = -log_likelihoods(W, kept).sum() + _penalty(kept.theta, lam_mask)
        if f_old < f_new:
            return kept
    return model


def _m_step(W, labels, K, cfg, omega, C, lam_mask, models, n_jobs):
    groups = [W[labels == k] for k in range(K)]
    for k, g in enumerate(groups):
        if g.shape[0] == 0:
            raise EmptyCluster(k)

    def fit(k):
        return _fit_one(groups[k], cfg, omega, C, lam_mask, models[k] if models else None)

    if n_jobs > 1 and K > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            return list(pool.map(fit, range(K)))
    return [fit(k) for k in range(K)]


def em_objective(costs, labels, beta, models, lam_mask) -> float:
    """Total cost: negative log-likelihood + switching penalty + l1 sparsity."""
    return path_cost(costs, labels, beta) + sum(_penalty(m.theta, lam_mask) for m in models)


def em_fit(windows, K: int, beta: float = DEFAULT_BETA, cfg: Optional[GlassoConfig] = None,
           omega: int = 1, C: Optional[int] = None, max_em_iter: int = 100, seed: int = 0,
           stride_s: float = 1.0, semantics: Optional[Mapping[int, str]] = None,
           n_jobs: int = 1) -> Segmentation:
    """Fit K block-Toeplitz clusters with temporally consistent assignments.

    Iterates until the assignment is unchanged between successive E-steps
    or ``max_em_iter`` is reached. An emptied cluster is reseeded with the
    ``ceil(n/K)`` windows that fit their current clusters worst; after three
    consecutive E-steps that leave a cluster empty, the empty cluster is
    dropped and ``k_reduced`` is set.
    """
    W = np.asarray(windows, dtype=float)
    if W.ndim != 2 or W.shape[0] == 0:
        raise InputError("windows must be a non-empty N x (omega*C) matrix")
    if K < 1:
        raise InputError("K must be >= 1")
    if max_em_iter < 1:
        raise InputError("max_em_iter must be >= 1")
    cfg = cfg or GlassoConfig()
    C = C if C is not None else W.shape[1] // omega
    if omega * C != W.shape[1]:
        raise InputError(f"window width {W.shape[1]} != omega*C = {omega}*{C}")
    lam_mask = cfg.mask(omega * C)
    labels = initialize_assignment(W, K, seed).labels.copy()
    models: list = []
    trace: list = []
    # Cluster ids are exchangeable after a reseed (the emptied id can move),
    # so the streak counts consecutive E-steps that leave any cluster empty.
    empty_streak = 0
    reseeds: list = []
    k_reduced = False
    converged = False
    it = 0
    for it in range(1, max_em_iter + 1):
        models = _m_step(W, labels, K, cfg, omega, C, lam_mask, models, n_jobs)
        costs = cost_matrix(W, models)
        new = viterbi_path(costs, beta)
        trace.append(em_objective(costs, new, beta, models, lam_mask))
        counts = np.bincount(new, minlength=K)
        empty = np.flatnonzero(counts == 0)
        if empty.size == 0:
            empty_streak = 0
            if np.array_equal(new, labels):
                converged = True
                break
            labels = new
            continue
        empty_streak += 1
        reseeds.append(it)
        if empty_streak >= 3:
            log.warning("dropping cluster(s) %s after repeated emptying", empty.tolist())
            keep = [k for k in range(K) if counts[k] > 0]
            models = [models[k] for k in keep]
            K = len(keep)
            k_reduced = True
            empty_streak = 0
            # relabel onto the surviving ids; the next M-step refits them
            labels = np.searchsorted(keep, new).astype(np.int64)
            continue
        labels = _reseed(new, costs, empty, K)
    assignment = Assignment(labels, beta, it)
    seg = build_segmentation(assignment, models, omega, stride_s, semantics)
    seg.converged = converged
    seg.n_iterations = it
    seg.objective_trace = trace
    seg.k_reduced = k_reduced
    seg.reseeds = reseeds
    return seg


def _reseed(labels, costs, empty, K):
    """Move the ceil(n/K) worst-fitting windows into each empty cluster."""
    labels = labels.copy()
    n = labels.size
    m = math.ceil(n / K)
    nll = costs[np.arange(n), labels]
    taken = np.zeros(n, dtype=bool)
    # highest negative log-likelihood first; stable on index for determinism
    order = np.argsort(-nll, kind="stable")
    for k in empty:
        pick = [i for i in order if not taken[i]][:m]
        taken[pick] = True
        labels[pick] = k
    return labels


# --------------------------------------------------------------------- BIC

def n_free_parameters(m: ClusterModel, tol: float = SUPPORT_TOL) -> int:
    """Distinct non-zero precision entries plus the mean vector length."""
    C, omega = m.C, m.omega
    count = int(np.count_nonzero(np.abs(np.triu(m.block(0))) > tol))
    for d in range(1, omega):
        count += int(np.count_nonzero(np.abs(m.block(d)) > tol))
    return count + omega * C


def bic_select(windows, K_candidates: Sequence[int], beta: float = DEFAULT_BETA,
               cfg: Optional[GlassoConfig] = None, omega: int = 1, seed: int = 0,
               max_em_iter: int = 100) -> tuple[Optional[int], list, list]:
    """Fit every candidate K and return ``(best_K, table, failures)``.

    ``BIC = -2 * loglik + n_params * log(n_windows)``.
    """
    if not K_candidates:
        raise InputError("K_candidates must be non-empty")
    W = np.asarray(windows, dtype=float)
    n = W.shape[0]
    table, failures = [], []
    for K in K_candidates:
        try:
            seg = em_fit(W, K, beta, cfg, omega=omega, max_em_iter=max_em_iter, seed=seed)
        except (InputError, EmptyCluster, ArithmeticError, np.linalg.LinAlgError) as exc:
            failures.append({"K": int(K), "error": str(exc)})
            continue
        costs = cost_matrix(W, seg.models)
        ll = -float(costs[np.arange(n), seg.assignment.labels].sum())
        kappa = sum(n_free_parameters(m) for m in seg.models)
        table.append({"K": int(K), "K_fitted": len(seg.models), "loglik": ll, "n_params": kappa,
                      "bic": -2.0 * ll + kappa * math.log(n)})
    # A candidate whose EM dropped clusters is the smaller model, so report
    # K_fitted; near-ties (relative 1e-9) go to the fewest clusters.
    best = None
    if table:
        low = min(r["bic"] for r in table)
        best = min(r["K_fitted"] for r in table if r["bic"] - low <= 1e-9 * abs(low))
    return best, table, failures


# ------------------------------------------------------------------- onsets

def default_semantics(models: Sequence[ClusterModel]) -> dict:
    """Rank clusters by mean logit: lowest is normal, highest seizure, middle preictal."""
    K = len(models)
    order = sorted(range(K), key=lambda k: (float(np.mean(models[k].mean)), k))
    if K == 1:
        return {order[0]: NORMAL}
    names = {order[0]: NORMAL, order[-1]: SEIZURE}
    for k in order[1:-1]:
        names[k] = PREICTAL if K == 3 else "other"
    return names


def window_to_epoch_labels(labels, omega: int) -> np.ndarray:
    """Window t labels epoch t+omega-1; the first omega-1 epochs copy window 0."""
    labels = np.asarray(labels, dtype=np.int64)
    return np.concatenate([np.full(omega - 1, labels[0], dtype=np.int64), labels])


def run_lengths(epoch_labels) -> list[tuple[int, int, int]]:
    y = np.asarray(epoch_labels)
    bounds = np.flatnonzero(np.diff(y)) + 1
    starts = np.concatenate([[0], bounds])
    ends = np.concatenate([bounds - 1, [y.size - 1]])
    return [(int(y[s]), int(s), int(e)) for s, e in zip(starts, ends)]


def _transition_type(a: str, b: str) -> str:
    if b == SEIZURE:
        return "SO" if a == NORMAL else "seizure_start"
    if a == NORMAL and b == PREICTAL:
        return "SPO"
    if a == SEIZURE:
        return "offset"
    return "transition"


def extract_onsets(labels, omega: int, stride_s: float, state_semantics: Mapping[int, str],
                   windows: bool = True) -> tuple[list, list]:
    """Run-length encode the epoch labels and tag every boundary.

    Returns ``(subsequences, transitions)``. With ``windows=False`` the
    labels are taken to be per-epoch already.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size < 1:
        raise InputError("assignment is empty")
    y = window_to_epoch_labels(labels, omega) if windows else labels
    unknown = sorted(set(int(v) for v in np.unique(y)) - set(int(k) for k in state_semantics))
    if unknown:
        raise InputError(f"cluster id(s) {unknown} missing from the semantics map")
    subs = run_lengths(y)
    events = []
    for (a, _, _), (b, start, _) in zip(subs, subs[1:]):
        sa, sb = state_semantics[a], state_semantics[b]
        events.append({"type": _transition_type(sa, sb), "from": sa, "to": sb,
                       "from_cluster": a, "to_cluster": b,
                       "epoch": start, "time_s": start * stride_s})
    return subs, events


def build_segmentation(assignment: Assignment, models, omega: int, stride_s: float,
                       semantics: Optional[Mapping[int, str]] = None) -> Segmentation:
    sem = dict(semantics) if semantics is not None else default_semantics(models)
    subs, events = extract_onsets(assignment.labels, omega, stride_s, sem)
    return Segmentation(subs, events, list(models), False, assignment.iteration, assignment,
                        window_to_epoch_labels(assignment.labels, omega), sem, omega=omega,
                        stride_s=stride_s)


def segmentation_to_json(seg: Segmentation, theta_files: Optional[Sequence[str]] = None) -> dict:
    counts = np.bincount(seg.assignment.labels, minlength=len(seg.models))
    clusters = []
    for k, m in enumerate(seg.models):
        clusters.append({"id": k, "semantics": seg.semantics.get(k, "other"),
                         "n_assigned": int(counts[k]),
                         "mean_logit": float(np.mean(m.mean)),
                         "theta_file": theta_files[k] if theta_files else None})
    return {
        "stride_s": seg.stride_s,
        "clusters": clusters,
        "subsequences": [{"cluster": c, "start_epoch": s, "end_epoch": e} for c, s, e in seg.subsequences],
        "onsets": [{"type": o["type"], "from": o["from"], "to": o["to"], "epoch": o["epoch"],
                    "time_s": o["time_s"]} for o in seg.onsets],
        "epoch_labels": [int(v) for v in seg.epoch_labels],
        "em": {"iterations": seg.n_iterations, "objective_trace": [float(v) for v in seg.objective_trace],
               "converged": bool(seg.converged), "k_reduced": bool(seg.k_reduced), "omega": seg.omega,
               "reseed_iterations": [int(i) for i in seg.reseeds]},
    }


def save_segmentation(seg: Segmentation, out_dir, lam, channel_names=None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = []
    for k, m in enumerate(seg.models):
        name = f"cluster_{k}_theta.bin"
        save_model(m, out_dir / name, lam, channel_names)
        files.append(name)
    path = out_dir / "segmentation.json"
    path.write_text(json.dumps(segmentation_to_json(seg, files), indent=2) + "\n")
    return path
