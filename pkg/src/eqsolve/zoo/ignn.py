"""Implicit graph network ``Z = relu(A Z W + X U^T)`` on a toy two-community graph."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..core import DEQModel
from ..nn import Module, param, scaled_to_norm


@dataclass
class ToyGraph:
    A: np.ndarray
    X: np.ndarray
    labels: np.ndarray
    train_idx: np.ndarray
    test_idx: np.ndarray
    normalization: str = "symmetric"

    @property
    def n(self):
        return self.A.shape[0]


def normalize_adjacency(adj):
    """``D^-1/2 (adj + I) D^-1/2``; its spectral norm is exactly 1."""
    a = adj + np.eye(adj.shape[0])
    d = 1.0 / np.sqrt(a.sum(axis=1))
    return a * d[:, None] * d[None, :]


def two_community_graph(rng, n=60, p_in=0.25, p_out=0.02, d_feat=8, signal=0.5, train_frac=0.5):
    """Stochastic block model with two equal communities and weakly informative features."""
    labels = np.repeat([0, 1], [n - n // 2, n // 2])
    same = labels[:, None] == labels[None, :]
    p = np.where(same, p_in, p_out)
    upper = np.triu(rng.random((n, n)) < p, k=1)
    adj = (upper | upper.T).astype(float)
    centers = rng.standard_normal((2, d_feat))
    X = signal * centers[labels] + rng.standard_normal((n, d_feat))
    perm = rng.permutation(n)
    k = int(round(train_frac * n))
    return ToyGraph(normalize_adjacency(adj), X, labels, np.sort(perm[:k]), np.sort(perm[k:]))


def ignn_layer(Z, A, W, u):
    """One propagation step ``relu(A Z W + u)``."""
    return ad.relu(ad.as_tensor(A) @ Z @ W + u)


class IGNN(Module, DEQModel):
    """``W`` starts at spectral norm ``w_norm``; above 1 the plain iteration can blow up."""

    NORM_SKIP = ("U", "V")

    def __init__(self, graph, d_hidden, rng, w_norm=0.9, n_classes=2):
        self.A = ad.Tensor(graph.A)
        self.W = param(scaled_to_norm(rng, (d_hidden, d_hidden), w_norm))
        d_feat = graph.X.shape[1]
        self.U = param(rng.standard_normal((d_hidden, d_feat)) / np.sqrt(d_feat))
        self.V = param(rng.standard_normal((n_classes, d_hidden)) / np.sqrt(d_hidden))

    def inject(self, x):
        return ad.as_tensor(x) @ self.U.T

    def layer(self, z, u):
        return ignn_layer(z, self.A, self.W, u)

    def decode(self, z):
        return z @ self.V.T

    def loss(self, y, pred):
        """Cross-entropy over the labelled nodes; ``y = (node_idx, labels)``."""
        idx, labels = y
        logp = ad.log_softmax(pred, axis=1)
        picked = logp[np.asarray(idx), np.asarray(labels)[np.asarray(idx)]]
        return -picked.mean()

    def state_shape(self, x):
        return (np.shape(x)[0], self.W.shape[0])


def accuracy(logits, labels, idx):
    pred = np.argmax(np.asarray(logits)[idx], axis=1)
    return float(np.mean(pred == np.asarray(labels)[idx]))
