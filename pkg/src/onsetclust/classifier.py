"""Per-epoch channel-logit classifier.

Diffusion over the epoch graph, a per-node linear map with ReLU, then a
scalar-input GRU run independently for every channel over the S embedding
steps. Each channel ends in a two-way softmax (normal, seizure); training
max-pools the seizure probability over channels and applies binary
cross-entropy. Gradients are computed by hand so the whole model stays in
numpy.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import InputError, read_matrix, write_matrix
from .spectral import EpochGraph

LOGIT_CLAMP = 1e-6

# Names of the trainable arrays in ClassifierParams, in a fixed order.
PARAM_NAMES = ("theta", "W_conv", "b_conv", "W_z", "b_z", "W_r", "b_r",
               "W_n", "b_n", "W_out", "b_out")


@dataclass
class ClassifierParams:
    """Trainable weights.

    GRU gate blocks ``W_z``, ``W_r``, ``W_n`` are ``(1 + H) x H``: row 0 maps
    the scalar input, rows ``1..H`` map the previous hidden state.
    """
    theta: np.ndarray
    W_conv: np.ndarray
    b_conv: np.ndarray
    W_z: np.ndarray
    b_z: np.ndarray
    W_r: np.ndarray
    b_r: np.ndarray
    W_n: np.ndarray
    b_n: np.ndarray
    W_out: np.ndarray
    b_out: np.ndarray
    hyper: dict = field(default_factory=dict)

    @property
    def K_diff(self) -> int:
        return self.theta.size - 1

    @property
    def S(self) -> int:
        return self.W_conv.shape[1]

    @property
    def H(self) -> int:
        return self.W_out.shape[0]

    @property
    def F(self) -> int:
        return self.W_conv.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in PARAM_NAMES}

    def copy(self) -> "ClassifierParams":
        return replace(self, **{n: a.copy() for n, a in self.arrays().items()}, hyper=dict(self.hyper))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays().values())


def zero_params(F: int, S: int = 8, H: int = 16, K_diff: int = 2) -> ClassifierParams:
    return ClassifierParams(
        theta=np.zeros(K_diff + 1), W_conv=np.zeros((F, S)), b_conv=np.zeros(S),
        W_z=np.zeros((1 + H, H)), b_z=np.zeros(H), W_r=np.zeros((1 + H, H)), b_r=np.zeros(H),
        W_n=np.zeros((1 + H, H)), b_n=np.zeros(H), W_out=np.zeros((H, 2)), b_out=np.zeros(2),
        hyper={"F": F, "S": S, "H": H, "K_diff": K_diff})


def init_params(F: int, S: int = 8, H: int = 16, K_diff: int = 2, seed: int = 0,
                feature_scale: float = 1.0) -> ClassifierParams:
    """Random initialisation; ``feature_scale`` is the RMS of the node features."""
    rng = np.random.default_rng(seed)
    p = zero_params(F, S, H, K_diff)
    p.theta[0] = 1.0
    p.theta[1:] = 0.1 * rng.standard_normal(K_diff)
    p.W_conv = rng.standard_normal((F, S)) / (np.sqrt(F) * max(feature_scale, 1e-12))
    p.b_conv = 0.1 * rng.standard_normal(S)
    for name in ("W_z", "W_r", "W_n"):
        setattr(p, name, rng.standard_normal((1 + H, H)) / np.sqrt(1 + H))
    p.W_out = rng.standard_normal((H, 2)) / np.sqrt(H)
    return p


# ------------------------------------------------------------------ forward

def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _as_batch(graphs):
    if isinstance(graphs, EpochGraph):
        graphs = [graphs]
    X = np.stack([g.nodes.features for g in graphs])
    T = np.stack([g.transition for g in graphs])
    return X, T


def diffusion_propagate(g: EpochGraph, window, theta, K_diff: int) -> np.ndarray:
    """``sum_k theta_k (D^-1 V)^k window`` for k = 0..K_diff."""
    theta = np.asarray(theta, dtype=float)
    if theta.size != K_diff + 1:
        raise InputError(f"theta has {theta.size} entries, expected K_diff + 1 = {K_diff + 1}")
    T = g.transition
    y = np.asarray(window, dtype=float)
    out = theta[0] * y
    for k in range(1, K_diff + 1):
        y = T @ y
        out = out + theta[k] * y
    return out


def spatial_encode(g: EpochGraph, window, params: ClassifierParams) -> np.ndarray:
    """``ReLU(diffused @ W_conv + b_conv)``, one S-vector per channel."""
    d = diffusion_propagate(g, window, params.theta, params.K_diff)
    return np.maximum(d @ params.W_conv + params.b_conv, 0.0)


def temporal_encode(z_spatial, params: ClassifierParams) -> np.ndarray:
    """Run the GRU over each channel's S scalar steps; return C x 2 softmax rows."""
    z_spatial = np.asarray(z_spatial, dtype=float)
    h, _ = _gru_forward(z_spatial[None], params)
    return _softmax(h[0] @ params.W_out + params.b_out)


def _gru_forward(Z, p: ClassifierParams):
    """Z is B x C x S. Returns final hidden state and per-step caches."""
    B, C, S = Z.shape
    H = p.H
    h = np.zeros((B, C, H))
    cache = []
    for t in range(S):
        x = Z[:, :, t, None]
        z = _sigmoid(x * p.W_z[0] + h @ p.W_z[1:] + p.b_z)
        r = _sigmoid(x * p.W_r[0] + h @ p.W_r[1:] + p.b_r)
        n = np.tanh(x * p.W_n[0] + (r * h) @ p.W_n[1:] + p.b_n)
        cache.append((x, h, z, r, n))
        h = (1.0 - z) * n + z * h
    return h, cache


def _forward(X, T, p: ClassifierParams):
    powers = [X]
    for _ in range(p.K_diff):
        powers.append(T @ powers[-1])
    D = sum(th * Y for th, Y in zip(p.theta, powers))
    pre = D @ p.W_conv + p.b_conv
    Z = np.maximum(pre, 0.0)
    h, cache = _gru_forward(Z, p)
    probs = _softmax(h @ p.W_out + p.b_out)
    return probs, (powers, D, pre, Z, h, cache)


def channel_probabilities(graphs, params: ClassifierParams) -> np.ndarray:
    """B x C x 2 softmax outputs for a list of epoch graphs."""
    X, T = _as_batch(graphs)
    return _forward(X, T, params)[0]


# --------------------------------------------------------------------- loss

def maxpool_index(channel_logits) -> int:
    """Channel with the largest seizure probability; ties go to the lowest index."""
    return int(np.argmax(np.asarray(channel_logits)[:, 1]))


def maxpool_bce_loss(channel_logits, label: int) -> float:
    q = np.asarray(channel_logits, dtype=float)[:, 1]
    zmax = float(q.max())
    return -(label * np.log(zmax) + (1 - label) * np.log1p(-zmax))


def loss_and_grad(graphs, labels, params: ClassifierParams):
    """Mean max-pool BCE over a batch and its gradient for every parameter."""
    X, T = _as_batch(graphs)
    y = np.asarray(labels, dtype=float)
    p = params
    probs, (powers, D, pre, Z, h, cache) = _forward(X, T, p)
    B, C, _ = probs.shape
    idx = np.argmax(probs[:, :, 1], axis=1)
    zmax = probs[np.arange(B), idx, 1]
    loss = float(np.mean(-(y * np.log(zmax) + (1 - y) * np.log1p(-zmax))))

    # d loss / d logits: only the argmax channel receives gradient
    dlogits = np.zeros((B, C, 2))
    g1 = (zmax - y) / B
    dlogits[np.arange(B), idx, 1] = g1
    dlogits[np.arange(B), idx, 0] = -g1

    grads = {}
    grads["W_out"] = np.einsum("bch,bck->hk", h, dlogits)
    grads["b_out"] = dlogits.sum(axis=(0, 1))
    dh = dlogits @ p.W_out.T

    H = p.H
    gz = np.zeros_like(p.W_z); gr = np.zeros_like(p.W_r); gn = np.zeros_like(p.W_n)
    bz = np.zeros(H); br = np.zeros(H); bn = np.zeros(H)
    dZ = np.zeros_like(Z)
    for t in range(Z.shape[2] - 1, -1, -1):
        x, hp, z, r, n = cache[t]
        dn = dh * (1.0 - z)
        dzg = dh * (hp - n)
        dh_prev = dh * z
        dan = dn * (1.0 - n * n)
        gn[0] += np.sum(x * dan, axis=(0, 1))
        gn[1:] += np.einsum("bci,bcj->ij", r * hp, dan)
        bn += dan.sum(axis=(0, 1))
        drh = dan @ p.W_n[1:].T
        dr = drh * hp
        dh_prev += drh * r
        dar = dr * r * (1.0 - r)
        daz = dzg * z * (1.0 - z)
        gz[0] += np.sum(x * daz, axis=(0, 1))
        gz[1:] += np.einsum("bci,bcj->ij", hp, daz)
        bz += daz.sum(axis=(0, 1))
        gr[0] += np.sum(x * dar, axis=(0, 1))
        gr[1:] += np.einsum("bci,bcj->ij", hp, dar)
        br += dar.sum(axis=(0, 1))
        dh_prev += daz @ p.W_z[1:].T + dar @ p.W_r[1:].T
        dZ[:, :, t] = daz @ p.W_z[0] + dar @ p.W_r[0] + dan @ p.W_n[0]
        dh = dh_prev
    grads.update(W_z=gz, b_z=bz, W_r=gr, b_r=br, W_n=gn, b_n=bn)

    dpre = dZ * (pre > 0)
    grads["W_conv"] = np.einsum("bcf,bcs->fs", D, dpre)
    grads["b_conv"] = dpre.sum(axis=(0, 1))
    dD = dpre @ p.W_conv.T
    grads["theta"] = np.array([np.sum(Y * dD) for Y in powers])
    return loss, grads


# ----------------------------------------------------------------- training

@dataclass
class TrainResult:
    params: ClassifierParams
    loss_history: list
    n_epochs: int


def train(graphs: Sequence[EpochGraph], labels, lr: float = 0.05, batch_size: int = 32,
          max_epochs: int = 200, seed: int = 0, S: int = 8, H: int = 16, K_diff: int = 2,
          patience: int = 10, init: Optional[ClassifierParams] = None) -> TrainResult:
    """Mini-batch gradient descent on the mean max-pool BCE.

    Stops early once the full-set loss has not improved for ``patience``
    consecutive evaluations. The run is a pure function of its inputs and
    ``seed``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if len(graphs) != labels.size:
        raise InputError(f"{len(graphs)} graphs for {labels.size} labels")
    if not np.all((labels == 0) | (labels == 1)):
        raise InputError("classifier labels must be binary")
    if labels.min() == labels.max():
        raise InputError("training set contains a single class; BCE is degenerate")
    if lr < 0 or batch_size < 1 or max_epochs < 0:
        raise InputError("lr >= 0, batch_size >= 1, max_epochs >= 0 required")
    F = graphs[0].nodes.features.shape[1]
    if init is None:
        rms = float(np.sqrt(np.mean([np.mean(g.nodes.features ** 2) for g in graphs])))
        params = init_params(F, S, H, K_diff, seed=seed, feature_scale=rms)
    else:
        params = init.copy()
    params.hyper.update(lr=lr, batch_size=batch_size, max_epochs=max_epochs, seed=seed)
    rng = np.random.default_rng(seed + 1)
    n = labels.size
    history = [loss_and_grad(graphs, labels, params)[0]]
    best, stale, epoch = history[0], 0, 0
    for epoch in range(1, max_epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            sel = order[start:start + batch_size]
            _, grads = loss_and_grad([graphs[i] for i in sel], labels[sel], params)
            for name, g in grads.items():
                setattr(params, name, getattr(params, name) - lr * g)
        loss = loss_and_grad(graphs, labels, params)[0]
        history.append(loss)
        if loss < best - 1e-12:
            best, stale = loss, 0
        else:
            stale += 1
            if stale >= patience:
                break
    return TrainResult(params, history, epoch)


def predict(graphs, params: ClassifierParams, threshold: float = 0.5) -> np.ndarray:
    probs = channel_probabilities(graphs, params)
    return (probs[:, :, 1].max(axis=1) > threshold).astype(np.int64)


# ------------------------------------------------------------------- logits

@dataclass(frozen=True)
class LogitSeries:
    """P x C seizure-class probabilities, strictly inside (0, 1)."""
    probs: np.ndarray
    label_set: tuple = (0, 1)

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if p.ndim != 2 or p.shape[0] < 1:
            raise InputError(f"logit series must be P x C, got shape {p.shape}")
        if not np.all(np.isfinite(p)):
            raise InputError("logit series has non-finite entries")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @property
    def P(self) -> int:
        return self.probs.shape[0]

    @property
    def C(self) -> int:
        return self.probs.shape[1]


def emit_logits(params: ClassifierParams, graphs) -> LogitSeries:
    probs = channel_probabilities(graphs, params)[:, :, 1]
    return LogitSeries(np.clip(probs, LOGIT_CLAMP, 1.0 - LOGIT_CLAMP))


def complement_covariance(probs) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel ``cov(z, 1 - z)`` and ``var(z)``; the first is ``-var`` exactly in theory."""
    z = np.asarray(probs, dtype=float)
    zc = z - z.mean(axis=0)
    w = 1.0 - z
    wc = w - w.mean(axis=0)
    return (zc * wc).mean(axis=0), (zc * zc).mean(axis=0)


# -------------------------------------------------------------- persistence

def save_params(params: ClassifierParams, out_dir) -> Path:
    out_dir = Path(out_dir)
    shapes = {}
    for name, arr in params.arrays().items():
        write_matrix(out_dir / f"{name}.bin", arr, f"classifier.{name}")
        shapes[name] = list(arr.shape)
    manifest = {"shapes": shapes, "hyper": params.hyper}
    path = out_dir / "classifier_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_params(out_dir) -> ClassifierParams:
    out_dir = Path(out_dir)
    try:
        manifest = json.loads((out_dir / "classifier_manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read classifier manifest in {out_dir}: {exc}") from exc
    arrays = {name: read_matrix(out_dir / f"{name}.bin") for name in PARAM_NAMES}
    for name, arr in arrays.items():
        if list(arr.shape) != manifest["shapes"][name]:
            raise InputError(f"{name}: shape {arr.shape} disagrees with manifest")
    return ClassifierParams(**arrays, hyper=manifest.get("hyper", {}))
