"""Clustering agreement metrics and synthetic ground-truth generators."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import InputError, Recording


@dataclass(frozen=True)
class MetricsReport:
    nmi: float
    ari: float
    acc: float
    confusion: np.ndarray

    def to_json(self) -> dict:
        return {"nmi": self.nmi, "ari": self.ari, "acc": self.acc,
                "confusion": self.confusion.astype(int).tolist(),
                "n": int(self.confusion.sum())}


def _check_pair(truth, pred, min_len=1):
    t = np.asarray(truth, dtype=np.int64).ravel()
    p = np.asarray(pred, dtype=np.int64).ravel()
    if t.size != p.size:
        raise InputError(f"label sequences differ in length: {t.size} vs {p.size}")
    if t.size < min_len:
        raise InputError(f"need at least {min_len} labels")
    return t, p


def contingency(truth, pred) -> np.ndarray:
    t, p = _check_pair(truth, pred)
    _, ti = np.unique(t, return_inverse=True)
    _, pi = np.unique(p, return_inverse=True)
    table = np.zeros((ti.max() + 1, pi.max() + 1), dtype=np.int64)
    np.add.at(table, (ti, pi), 1)
    return table


def _entropy(counts) -> float:
    c = counts[counts > 0].astype(float)
    q = c / c.sum()
    return float(-(q * np.log(q)).sum())


def nmi(truth, pred) -> float:
    """Mutual information over the geometric mean of the two entropies (natural log)."""
    table = contingency(truth, pred)
    n = table.sum()
    hu = _entropy(table.sum(axis=1))
    hv = _entropy(table.sum(axis=0))
    if hu == 0.0 and hv == 0.0:
        return 1.0
    if hu == 0.0 or hv == 0.0:
        return 0.0
    pij = table / n
    outer = np.outer(table.sum(axis=1), table.sum(axis=0)) / (n * n)
    nz = pij > 0
    mi = float((pij[nz] * np.log(pij[nz] / outer[nz])).sum())
    return min(1.0, max(0.0, mi / math.sqrt(hu * hv)))


def _comb2(x):
    x = np.asarray(x, dtype=float)
    return x * (x - 1) / 2.0


def ari(truth, pred) -> float:
    """Hubert-Arabie adjusted Rand index from the contingency table."""
    t, _ = _check_pair(truth, pred, min_len=2)
    table = contingency(truth, pred)
    n = t.size
    sum_ij = _comb2(table).sum()
    sum_a = _comb2(table.sum(axis=1)).sum()
    sum_b = _comb2(table.sum(axis=0)).sum()
    expected = sum_a * sum_b / _comb2(n)
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        # both partitions trivial in the same way
        return 1.0
    return float((sum_ij - expected) / (max_index - expected))


def confusion_matrix(truth, pred, K: int) -> np.ndarray:
    t, p = _check_pair(truth, pred)
    for name, v in (("truth", t), ("pred", p)):
        if v.size and (v.min() < 0 or v.max() >= K):
            raise InputError(f"{name} label outside [0, {K})")
    m = np.zeros((K, K), dtype=np.int64)
    np.add.at(m, (t, p), 1)
    return m


def acc_matched(truth, pred, K: int) -> float:
    """Best accuracy over relabelings of ``pred``.

    Exhaustive over permutations for K <= 4, Hungarian assignment above.
    """
    m = confusion_matrix(truth, pred, K)
    n = m.sum()
    if K <= 4:
        best = max(sum(m[perm[j], j] for j in range(K)) for perm in itertools.permutations(range(K)))
    else:
        rows, cols = linear_sum_assignment(-m)
        best = m[rows, cols].sum()
    return float(best) / float(n)


def evaluate(truth, pred, K=None) -> MetricsReport:
    t, p = _check_pair(truth, pred)
    K = K or int(max(t.max(), p.max()) + 1)
    return MetricsReport(nmi(t, p), ari(t, p) if t.size >= 2 else 1.0, acc_matched(t, p, K),
                         confusion_matrix(t, p, K))


# ---------------------------------------------------------------- synthetic

@dataclass
class SyntheticSpec:
    K: int
    omega_true: int
    C: int
    precisions: list
    segment_lengths: list  # (state, length)
    seed: int = 0
    means: list = field(default_factory=list)

    def __post_init__(self):
        dim = self.omega_true * self.C
        if len(self.precisions) != self.K:
            raise InputError(f"{len(self.precisions)} precisions for K={self.K}")
        for k, P in enumerate(self.precisions):
            P = np.asarray(P, dtype=float)
            if P.shape != (dim, dim):
                raise InputError(f"precision {k} has shape {P.shape}, expected {(dim, dim)}")
            if not np.allclose(P, P.T, atol=1e-9):
                raise InputError(f"precision {k} is not symmetric")
            try:
                np.linalg.cholesky(P)
            except np.linalg.LinAlgError:
                raise InputError(f"precision {k} is not positive definite") from None
        for state, length in self.segment_lengths:
            if not 0 <= state < self.K or length < 1:
                raise InputError(f"bad segment ({state}, {length})")


def generate_synthetic(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray, list[int]]:
    """Sample a P x C series whose segments are i.i.d. draws of their state's Gaussian.

    With ``omega_true > 1`` each draw is an ``omega_true * C`` vector laid out
    as consecutive rows. Returns ``(series, truth_labels, change_points)``.
    """
    rng = np.random.default_rng(spec.seed)
    factors = [np.linalg.cholesky(np.linalg.inv(np.asarray(P, dtype=float))) for P in spec.precisions]
    means = spec.means or [np.zeros(spec.omega_true * spec.C)] * spec.K
    rows, labels, cps = [], [], []
    for state, length in spec.segment_lengths:
        if rows:
            cps.append(len(labels))
        n_draws = math.ceil(length / spec.omega_true)
        draws = rng.standard_normal((n_draws, spec.omega_true * spec.C)) @ factors[state].T
        draws += np.asarray(means[state])
        block = draws.reshape(-1, spec.C)[:length]
        rows.append(block)
        labels.extend([state] * length)
    return np.vstack(rows), np.asarray(labels, dtype=np.int64), cps


def tridiagonal(C: int, diag: float, off: float) -> np.ndarray:
    return diag * np.eye(C) + off * (np.eye(C, k=1) + np.eye(C, k=-1))


def make_scenario_a(seed: int = 0) -> SyntheticSpec:
    """Two zero-mean states in 4 dimensions: identity vs. tridiagonal precision."""
    return SyntheticSpec(
        K=2, omega_true=1, C=4,
        precisions=[np.eye(4), tridiagonal(4, 2.0, 0.9)],
        segment_lengths=[(0, 300), (1, 150), (0, 300), (1, 150), (0, 100)],
        seed=seed)


def make_single_state(seed: int = 0, length: int = 1000) -> SyntheticSpec:
    return SyntheticSpec(K=1, omega_true=1, C=4, precisions=[tridiagonal(4, 2.0, 0.5)],
                         segment_lengths=[(0, length)], seed=seed)


def gaussian_kl(prec_p, prec_q) -> float:
    """KL(N(0, P^-1) || N(0, Q^-1)) for precisions P, Q."""
    P = np.asarray(prec_p, dtype=float)
    Q = np.asarray(prec_q, dtype=float)
    k = P.shape[0]
    cov_p = np.linalg.inv(P)
    _, ld_p = np.linalg.slogdet(P)
    _, ld_q = np.linalg.slogdet(Q)
    return 0.5 * (np.trace(Q @ cov_p) - k + ld_p - ld_q)


def change_points(labels) -> list[int]:
    y = np.asarray(labels)
    return [int(i) for i in np.flatnonzero(np.diff(y)) + 1]


def synthetic_recording(seed: int = 0, sample_rate_hz: float = 64.0, epoch_len_s: float = 2.0,
                        n_channels: int = 4,
                        segments: Sequence[tuple[int, int]] = ((0, 40), (1, 20), (0, 40), (1, 20), (0, 30)),
                        ) -> tuple[Recording, np.ndarray]:
    """Fake multichannel recording with rhythmic bursts in seizure segments.

    Normal epochs are white noise; seizure epochs add a 3 Hz oscillation to the
    first half of the channels. Segment lengths are in epochs. Returns the
    recording and the per-epoch truth labels.
    """
    rng = np.random.default_rng(seed)
    L = int(round(epoch_len_s * sample_rate_hz))
    chunks, labels = [], []
    t = np.arange(L) / sample_rate_hz
    for state, n_epochs in segments:
        for _ in range(n_epochs):
            x = rng.standard_normal((n_channels, L))
            if state == 1:
                phase = rng.uniform(0, 2 * np.pi)
                x[: max(1, n_channels // 2)] += 3.0 * np.sin(2 * np.pi * 3.0 * t + phase)
            chunks.append(x)
            labels.append(state)
    names = tuple(f"ch{i}" for i in range(n_channels))
    return Recording(np.hstack(chunks), sample_rate_hz, names), np.asarray(labels, dtype=np.int64)
