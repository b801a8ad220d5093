"""Segmentation and detection losses with analytic gradients.

Probability maps are ``[C, ...]`` arrays (class axis first) and labels are
one-hot arrays of the same shape. Every loss returns a :class:`LossOutput`
whose ``grad`` is taken with respect to the first argument.
"""

from dataclasses import dataclass

import numpy as np

PROB_FLOOR = 1e-7
FOCAL_EXPONENT = 2
DEFAULT_DICE_EPS = 1e-5


@dataclass
class LossOutput:
    value: float
    grad: np.ndarray


@dataclass
class ClassStats:
    tp: np.ndarray
    fn: np.ndarray
    fp: np.ndarray


def _pair(probs, labels):
    p = np.asarray(probs, dtype=np.float64)
    g = np.asarray(labels, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: probs {p.shape} vs labels {g.shape}")
    if p.ndim < 1:
        raise ValueError("probabilities need a class axis")
    c = p.shape[0]
    return p.reshape(c, -1), g.reshape(c, -1)


def one_hot(indices, num_classes):
    """``[...]`` integer labels to a ``[C, ...]`` one-hot array."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= num_classes):
        raise ValueError("label index out of range")
    return (np.arange(num_classes).reshape((-1,) + (1,) * idx.ndim) == idx[None]).astype(np.float64)


def class_stats(probs, labels):
    p, g = _pair(probs, labels)
    return ClassStats(
        tp=np.sum(p * g, axis=1),
        fn=np.sum((1.0 - p) * g, axis=1),
        fp=np.sum(p * (1.0 - g), axis=1),
    )


def _check_coef(name, v, c):
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.shape != (c,):
        raise ValueError(f"{name} must have one entry per class ({c}), got {v.shape}")
    return v


def _dice(probs, labels, alpha, beta, eps, coef):
    if alpha <= 0 or beta <= 0:
        raise ValueError("alpha and beta must be positive")
    if eps < 0:
        raise ValueError("eps must be non-negative")
    shape = np.shape(probs)
    p, g = _pair(probs, labels)
    st = class_stats(p, g)
    num = st.tp + eps
    den = st.tp + alpha * st.fn + beta * st.fp + eps
    empty = den == 0.0
    safe = np.where(empty, 1.0, den)
    term = np.where(empty, 1.0, num / safe)
    # d den / d p_n(c) = g - alpha g + beta (1 - g)
    dden = g - alpha * g + beta * (1.0 - g)
    dterm = (g * safe[:, None] - num[:, None] * dden) / (safe[:, None] ** 2)
    dterm[empty] = 0.0
    if coef is None:
        value = p.shape[0] - np.sum(term)
        grad = -dterm
    else:
        value = p.shape[0] - np.sum(coef * term)
        grad = -coef[:, None] * dterm
    return LossOutput(float(value), grad.reshape(shape))


def dice_loss(probs, labels, alpha=0.5, beta=0.5, eps=DEFAULT_DICE_EPS):
    """C minus the sum of per-class soft Tversky ratios TP / (TP + a FN + b FP).

    With ``eps == 0`` a class absent from both prediction and ground truth
    contributes a ratio of exactly 1.
    """
    return _dice(probs, labels, alpha, beta, eps, None)


def masked_weighted_dice(probs, labels, mask, weights, alpha=0.5, beta=0.5, eps=DEFAULT_DICE_EPS):
    c = np.shape(probs)[0]
    m = _check_mask(mask, c)
    w = _check_coef("weights", weights, c)
    return _dice(probs, labels, alpha, beta, eps, m * w)


def _focal(probs, labels, coef):
    gamma = FOCAL_EXPONENT
    shape = np.shape(probs)
    p, g = _pair(probs, labels)
    n = p.shape[1]
    pc = np.clip(p, PROB_FLOOR, 1.0)
    one_m = 1.0 - pc
    logp = np.log(pc)
    mod = one_m**gamma
    per = g * mod * logp
    # d/dp [(1-p)^gamma log p] inside the clamp; zero outside it
    dper = g * (-gamma * one_m ** (gamma - 1) * logp + mod / pc)
    dper[(p < PROB_FLOOR) | (p > 1.0)] = 0.0
    if coef is None:
        value = -np.sum(np.sum(per, axis=1)) / n
        grad = -dper / n
    else:
        value = -np.sum(coef * np.sum(per, axis=1)) / n
        grad = -coef[:, None] * dper / n
    return LossOutput(float(value), grad.reshape(shape))


def focal_loss(probs, labels):
    """-(1/N) sum_c sum_n g (1 - p)^2 log p, with p clamped to [1e-7, 1]."""
    return _focal(probs, labels, None)


def masked_weighted_focal(probs, labels, mask, weights):
    c = np.shape(probs)[0]
    return _focal(probs, labels, _check_mask(mask, c) * _check_coef("weights", weights, c))


def hybrid_loss(probs, labels, lam, alpha=0.5, beta=0.5, eps=DEFAULT_DICE_EPS, mask=None, weights=None):
    """Dice loss plus ``lam`` times focal loss; masked variants when a mask is given."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if mask is None:
        d = dice_loss(probs, labels, alpha, beta, eps)
        f = focal_loss(probs, labels)
    else:
        if weights is None:
            weights = np.ones(np.shape(probs)[0])
        d = masked_weighted_dice(probs, labels, mask, weights, alpha, beta, eps)
        f = masked_weighted_focal(probs, labels, mask, weights)
    return LossOutput(d.value + lam * f.value, d.grad + lam * f.grad)


def make_annotation_mask(annotated):
    """Mask vector from per-anatomy flags (classes 1..C-1); background is 1 iff all are annotated."""
    flags = np.asarray(annotated, dtype=bool).reshape(-1)
    return np.concatenate([[1.0 if flags.all() else 0.0], flags.astype(np.float64)])


def _check_mask(mask, c):
    m = _check_coef("mask", mask, c)
    if not np.all((m == 0.0) | (m == 1.0)):
        raise ValueError("annotation mask entries must be 0 or 1")
    return m


def annotation_weights(masks, classes=None):
    """w(c) = 1 / (number of cases annotating class c).

    ``classes`` restricts which classes must be annotated at least once; the
    others get weight 0.
    """
    m = np.asarray(masks, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("masks must be a [cases, classes] array")
    counts = m.sum(axis=0)
    used = range(m.shape[1]) if classes is None else classes
    w = np.zeros(m.shape[1])
    for c in used:
        if counts[c] == 0:
            raise ValueError(f"class {c} is never annotated")
        w[c] = 1.0 / counts[c]
    return w


def fcn_nll(probs, labels):
    """Mean negative log-probability of the true class over all pixels of all images."""
    shape = np.shape(probs)
    p, g = _pair(probs, labels)
    count = p.shape[1]
    pc = np.clip(p, PROB_FLOOR, None)
    value = -np.sum(g * np.log(pc)) / count
    grad = -g / pc / count
    grad[p < PROB_FLOOR] = 0.0
    return LossOutput(float(value), grad.reshape(shape))


def bce(p, y):
    """Mean binary cross entropy with p clamped to [1e-7, 1 - 1e-7]."""
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {y.shape}")
    n = max(p.size, 1)
    pc = np.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR)
    value = -np.sum(y * np.log(pc) + (1.0 - y) * np.log1p(-pc)) / n
    grad = (-y / pc + (1.0 - y) / (1.0 - pc)) / n
    grad = np.where((p < PROB_FLOOR) | (p > 1.0 - PROB_FLOOR), 0.0, grad)
    return LossOutput(float(value), grad)


def smooth_l1(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    n = max(pred.size, 1)
    x = pred - target
    ax = np.abs(x)
    small = ax < 1.0
    value = np.sum(np.where(small, 0.5 * x * x, ax - 0.5)) / n
    grad = np.where(small, x, np.sign(x)) / n
    return LossOutput(float(value), grad)


def l2_regularizer(theta, lam):
    """(lam / 2) ||theta||^2 and its gradient; kept apart from the data terms."""
    t = np.asarray(theta, dtype=np.float64)
    return LossOutput(float(0.5 * lam * np.sum(t * t)), lam * t)
