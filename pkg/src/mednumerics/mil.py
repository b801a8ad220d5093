"""Multi-instance learning heads for whole-image classification.

A shared logistic regression scores every spatial position of a feature map;
the bag-level losses below act on those patch probabilities ``r``.
"""

from dataclasses import dataclass

import numpy as np

from .losses import PROB_FLOOR, LossOutput
from .tensor import sigmoid

K_GRID = (1, 2, 4, 6, 8)


@dataclass
class PatchScores:
    r: np.ndarray
    features: np.ndarray
    a: np.ndarray

    def backward(self, grad_r):
        """Gradients of a scalar with upstream ``grad_r = dL/dr`` w.r.t. (features, a, b)."""
        g = np.asarray(grad_r, dtype=np.float64).reshape(self.r.shape)
        dz = g * self.r * (1.0 - self.r)
        d_features = dz[..., None] * self.a
        d_a = np.einsum("ij,ijc->c", dz, self.features)
        d_b = float(dz.sum())
        return d_features, d_a, d_b


def patch_scores(features, a, b):
    """r[i, j] = sigmoid(a . F[i, j, :] + b) for an ``[H, W, C]`` feature map."""
    f = np.asarray(features, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    if f.ndim != 3 or f.shape[2] != a.shape[0]:
        raise ValueError(f"features {f.shape} incompatible with weights of length {a.shape[0]}")
    r = sigmoid(f @ a + float(b))
    return PatchScores(r=r, features=f, a=a)


def rank_scores(r):
    """Stable descending sort; ``perm[k]`` is the original index of the k-th largest."""
    r = np.asarray(r, dtype=np.float64).reshape(-1)
    if r.size == 0:
        raise ValueError("cannot rank an empty score vector")
    perm = np.argsort(-r, kind="stable")
    return r[perm], perm


def _log_prob(q):
    return np.log(max(q, PROB_FLOOR))


def _check_label(y):
    if y not in (0, 1):
        raise ValueError("bag label must be 0 or 1")
    return int(y)


def max_pool_mil_loss(r, y):
    """-log p(y | bag) with p(y=1 | bag) = max(r). Ties send the gradient to the lowest index."""
    y = _check_label(y)
    r = np.asarray(r, dtype=np.float64)
    flat = r.reshape(-1)
    if flat.size == 0:
        raise ValueError("empty bag")
    idx = int(np.argmax(flat))
    q = flat[idx] if y == 1 else 1.0 - flat[idx]
    grad = np.zeros_like(flat)
    if q >= PROB_FLOOR:
        grad[idx] = -1.0 / q if y == 1 else 1.0 / q
    return LossOutput(float(-_log_prob(q)), grad.reshape(r.shape))


def label_assign_mil_loss(r, y, k):
    """Top-k ranked patches take the bag label, the rest take label 0; mean patch NLL."""
    y = _check_label(y)
    r = np.asarray(r, dtype=np.float64)
    flat = r.reshape(-1)
    m = flat.size
    if not 1 <= k <= m:
        raise ValueError(f"k={k} outside [1, {m}]")
    ranked, perm = rank_scores(flat)
    targets = np.zeros(m)
    targets[:k] = y
    q = np.where(targets == 1.0, ranked, 1.0 - ranked)
    qc = np.maximum(q, PROB_FLOOR)
    value = -np.sum(np.log(qc)) / m
    g_ranked = np.where(targets == 1.0, -1.0 / qc, 1.0 / qc) / m
    g_ranked[q < PROB_FLOOR] = 0.0
    grad = np.empty(m)
    grad[perm] = g_ranked
    return LossOutput(float(value), grad.reshape(r.shape))


def sparse_mil_loss(r, y, mu):
    """Max-pooling loss plus ``mu`` times the L1 norm of the patch scores."""
    if mu < 0:
        raise ValueError("mu must be non-negative")
    base = max_pool_mil_loss(r, y)
    r = np.asarray(r, dtype=np.float64)
    return LossOutput(base.value + mu * float(np.sum(np.abs(r))), base.grad + mu * np.sign(r))


def label_assign_k_grid(r, y, ks=K_GRID):
    """Label-assignment loss for every admissible k of the grid (k <= number of patches)."""
    m = np.size(r)
    return {k: label_assign_mil_loss(r, y, k).value for k in ks if k <= m}
