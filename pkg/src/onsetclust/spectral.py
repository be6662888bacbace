"""Spectral node features and the top-k correlation graph of an epoch."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Epoch, InputError, normalize_epoch

DEFAULT_TOP_K = 3


@dataclass(frozen=True)
class NodeFeatures:
    features: np.ndarray  # C x F, magnitudes

    def __post_init__(self):
        f = np.asarray(self.features, dtype=float)
        if f.ndim != 2:
            raise InputError(f"node features must be C x F, got {f.shape}")
        if np.any(f < 0):
            raise InputError("node features must be non-negative")
        f.setflags(write=False)
        object.__setattr__(self, "features", f)


@dataclass(frozen=True)
class EpochGraph:
    nodes: NodeFeatures
    adjacency: np.ndarray  # C x C, symmetric, unit diagonal
    top_k: int

    @property
    def transition(self) -> np.ndarray:
        """Row-normalised adjacency ``D^-1 V``."""
        return self.adjacency / self.adjacency.sum(axis=1, keepdims=True)


def fft_magnitude(window_row) -> np.ndarray:
    """One-sided magnitude of the unnormalised DFT, bins ``0..L//2``."""
    x = np.asarray(window_row, dtype=float)
    if x.ndim != 1 or x.size < 2:
        raise InputError("fft_magnitude needs a 1-D signal of length >= 2")
    return np.abs(np.fft.rfft(x))


def node_features(epoch: Epoch, normalize: bool = True) -> NodeFeatures:
    e = normalize_epoch(epoch) if normalize else epoch
    return NodeFeatures(np.abs(np.fft.rfft(e.window, axis=1)))


def normalized_cross_correlation(a, b) -> float:
    """Absolute Pearson-style correlation at zero lag; 0 if either input is constant."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise InputError("NCC inputs must be equal-length vectors of length >= 2")
    da = a - a.mean()
    db = b - b.mean()
    na = np.sqrt(da @ da)
    nb = np.sqrt(db @ db)
    if na <= 1e-12 * max(1.0, np.abs(a).max()) or nb <= 1e-12 * max(1.0, np.abs(b).max()):
        return 0.0
    return float(min(1.0, abs(da @ db) / (na * nb)))


def ncc_matrix(features) -> np.ndarray:
    """All pairwise NCC scores of the rows of ``features``."""
    x = np.asarray(features, dtype=float)
    d = x - x.mean(axis=1, keepdims=True)
    norms = np.sqrt((d * d).sum(axis=1))
    scale = np.maximum(1.0, np.abs(x).max(axis=1))
    flat = norms <= 1e-12 * scale
    norms[flat] = 1.0
    u = d / norms[:, None]
    u[flat] = 0.0
    return np.clip(np.abs(u @ u.T), 0.0, 1.0)


def build_graph(nf: NodeFeatures, top_k: int = DEFAULT_TOP_K) -> EpochGraph:
    """Keep each node's ``top_k`` strongest correlates, symmetrise by max, add unit self-loops.

    Ties in the ranking go to the lower channel index.
    """
    C = nf.features.shape[0]
    if not 1 <= top_k < C:
        raise InputError(f"top_k must be in [1, C) = [1, {C}), got {top_k}")
    scores = ncc_matrix(nf.features)
    keep = np.zeros((C, C))
    for i in range(C):
        others = np.array([j for j in range(C) if j != i])
        # stable sort on negated score: equal scores keep index order
        order = others[np.argsort(-scores[i, others], kind="stable")][:top_k]
        keep[i, order] = scores[i, order]
    adj = np.maximum(keep, keep.T)
    np.fill_diagonal(adj, 1.0)
    return EpochGraph(nf, adj, top_k)


def epoch_graphs(epochs, top_k: int = DEFAULT_TOP_K) -> list[EpochGraph]:
    return [build_graph(node_features(e), top_k) for e in epochs]


def stack_graphs(graphs) -> tuple[np.ndarray, np.ndarray]:
    """(P x C x F features, P x C x C adjacency) tensors for persistence."""
    feats = np.stack([g.nodes.features for g in graphs])
    adj = np.stack([g.adjacency for g in graphs])
    return feats, adj


def unstack_graphs(feats, adj, top_k: int) -> list[EpochGraph]:
    return [EpochGraph(NodeFeatures(f), np.asarray(a, dtype=float), top_k) for f, a in zip(feats, adj)]
