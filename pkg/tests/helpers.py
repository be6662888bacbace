"""Shared fixtures-as-functions for the module tests and the acceptance suite."""
import numpy as np

from onsetclust import classifier
from onsetclust.core import Epoch
from onsetclust.spectral import NodeFeatures, build_graph, epoch_graphs


def random_graphs(rng, n, C, F, top_k=2):
    return [build_graph(NodeFeatures(rng.random((C, F)) * 2), top_k) for _ in range(n)]


def gradient_check_worst(n_instances=20, C=3, S=4, H=3, F=5, step=1e-5, seed=1):
    """Worst relative error between analytic and central-difference gradients."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for inst in range(n_instances):
        graphs = random_graphs(rng, 3, C, F)
        labels = rng.integers(0, 2, 3)
        p = classifier.init_params(F, S, H, 2, seed=inst)
        for name, a in p.arrays().items():
            setattr(p, name, a + 0.3 * rng.standard_normal(a.shape))
        _, grads = classifier.loss_and_grad(graphs, labels, p)
        for name, a in p.arrays().items():
            fd = np.zeros_like(a)
            for idx in np.ndindex(a.shape):
                old = a[idx]
                a[idx] = old + step
                up = classifier.loss_and_grad(graphs, labels, p)[0]
                a[idx] = old - step
                down = classifier.loss_and_grad(graphs, labels, p)[0]
                a[idx] = old
                fd[idx] = (up - down) / (2 * step)
            denom = np.linalg.norm(fd) + np.linalg.norm(grads[name])
            if denom > 0:
                worst = max(worst, float(np.linalg.norm(fd - grads[name]) / denom))
    return worst


def toy_spectral_dataset(n=200, C=2, L=32, seed=0):
    """Two classes separated by a narrow-band tone in class-1 epochs.

    Every epoch is white noise; class 1 adds a sinusoid at bin 4 to every
    channel, which after per-epoch normalisation shifts energy into that bin.
    """
    rng = np.random.default_rng(seed)
    y = np.tile([0, 1], n // 2)
    t = np.arange(L)
    epochs = []
    for p, lab in enumerate(y):
        x = rng.standard_normal((C, L))
        if lab:
            x += 2.0 * np.sin(2 * np.pi * 4 * t / L + rng.uniform(0, 2 * np.pi, (C, 1)))
        epochs.append(Epoch(x, p, float(p)))
    return epoch_graphs(epochs, top_k=1), y
