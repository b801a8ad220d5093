"""Registry of analytic-vs-finite-difference gradient checks over random instances.

Each check builds a random instance from a SplitMix64 stream and returns
``(f, grad, x)``: a scalar function of ``x`` and its analytic gradient at
``x``. Instances keep probabilities inside (0.05, 0.95) and away from kinks so
that central differences are accurate.
"""

from dataclasses import dataclass

import numpy as np

from . import adversarial, blocks, detection, losses, mil
from .rng import as_generator
from .tensor import grad_check

REL_TOL = 1e-4


def _probs(rng, shape):
    return 0.05 + 0.9 * rng.random(shape)


def _labels(rng, c, n):
    return losses.one_hot(rng.integers(0, c, size=n), c)


def _seg_instance(rng):
    c, n = 3, 12
    return _probs(rng, (c, n)), _labels(rng, c, n)


def _dice(rng):
    p, g = _seg_instance(rng)
    a, b = rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8)
    return (lambda x: losses.dice_loss(x, g, a, b).value), losses.dice_loss(p, g, a, b).grad, p


def _masked_dice(rng):
    p, g = _seg_instance(rng)
    mask = np.array([1.0, 0.0, 1.0])
    w = rng.uniform(0.5, 2.0, size=3)
    f = lambda x: losses.masked_weighted_dice(x, g, mask, w).value  # noqa: E731
    return f, losses.masked_weighted_dice(p, g, mask, w).grad, p


def _focal(rng):
    p, g = _seg_instance(rng)
    return (lambda x: losses.focal_loss(x, g).value), losses.focal_loss(p, g).grad, p


def _masked_focal(rng):
    p, g = _seg_instance(rng)
    mask = np.array([0.0, 1.0, 1.0])
    w = rng.uniform(0.5, 2.0, size=3)
    f = lambda x: losses.masked_weighted_focal(x, g, mask, w).value  # noqa: E731
    return f, losses.masked_weighted_focal(p, g, mask, w).grad, p


def _hybrid(rng):
    p, g = _seg_instance(rng)
    lam = rng.uniform(0.1, 2.0)
    return (lambda x: losses.hybrid_loss(x, g, lam).value), losses.hybrid_loss(p, g, lam).grad, p


def _fcn_nll(rng):
    p, g = _seg_instance(rng)
    return (lambda x: losses.fcn_nll(x, g).value), losses.fcn_nll(p, g).grad, p


def _bce(rng):
    p = _probs(rng, 10)
    y = (rng.random(10) < 0.5).astype(np.float64)
    return (lambda x: losses.bce(x, y).value), losses.bce(p, y).grad, p


def _smooth_l1(rng):
    t = rng.normal(size=8)
    # keep |pred - target| away from the kink at 1
    off = rng.uniform(0.1, 0.8, size=8) * np.where(rng.random(8) < 0.5, 1.0, 3.0) * np.where(rng.random(8) < 0.5, -1.0, 1.0)
    p = t + off
    return (lambda x: losses.smooth_l1(x, t).value), losses.smooth_l1(p, t).grad, p


def _l2(rng):
    th = rng.normal(size=6)
    lam = rng.uniform(0.01, 1.0)
    return (lambda x: losses.l2_regularizer(x, lam).value), losses.l2_regularizer(th, lam).grad, th


def _spread_scores(rng, m):
    # distinct scores with gaps far above the difference step, so rankings are locally constant
    base = (rng.permutation(m) + rng.uniform(0.1, 0.9, size=m)) / m
    return 0.05 + 0.9 * base


def _mil_max(rng):
    r = _spread_scores(rng, 9)
    y = int(rng.random() < 0.5)
    return (lambda x: mil.max_pool_mil_loss(x, y).value), mil.max_pool_mil_loss(r, y).grad, r


def _mil_assign(rng):
    r = _spread_scores(rng, 9)
    y = int(rng.random() < 0.5)
    k = int(rng.integers(1, 10))
    return (lambda x: mil.label_assign_mil_loss(x, y, k).value), mil.label_assign_mil_loss(r, y, k).grad, r


def _mil_sparse(rng):
    r = _spread_scores(rng, 9)
    y = int(rng.random() < 0.5)
    mu = rng.uniform(0.0, 0.5)
    return (lambda x: mil.sparse_mil_loss(x, y, mu).value), mil.sparse_mil_loss(r, y, mu).grad, r


def _mil_patch_features(rng):
    f = rng.normal(size=(3, 3, 4))
    a = rng.normal(size=4)
    b = rng.normal()
    y = 1

    def loss(feat):
        r = mil.patch_scores(feat, a, b).r
        return mil.label_assign_mil_loss(r, y, 3).value

    ps = mil.patch_scores(f, a, b)
    g_r = mil.label_assign_mil_loss(ps.r, y, 3).grad
    return loss, ps.backward(g_r)[0], f


def _detection(rng):
    n = 6
    preds = rng.normal(size=(n, 5))
    labels = np.array([1, 1, 0, 0, -1, 0])
    targets = rng.normal(size=(n, 4))
    # keep regression residuals off the smooth-L1 kink
    gap = rng.uniform(0.1, 0.8, size=(n, 4)) * np.where(rng.random((n, 4)) < 0.5, 1.0, 3.0)
    preds[:, 1:] = targets + gap * np.where(rng.random((n, 4)) < 0.5, -1.0, 1.0)
    lam = rng.uniform(0.2, 2.0)
    f = lambda x: detection.detection_loss(x, labels, targets, lam).value  # noqa: E731
    return f, detection.detection_loss(preds, labels, targets, lam).grad, preds


def _se_block(rng):
    k = 4
    w = blocks.SeWeights.random(k, 2, rng=int(rng.integers(0, 2**31)))
    mix = 0.5 * rng.normal(size=(k, k))
    x = rng.normal(size=(k, 2, 2, 2))
    gy = rng.normal(size=x.shape)

    def residual(v):
        return np.tanh(np.einsum("kl,l...->k...", mix, v))

    def residual_vjp(v, g):
        t = np.tanh(np.einsum("kl,l...->k...", mix, v))
        return np.einsum("kl,k...->l...", mix, g * (1.0 - t * t))

    f = lambda v: float(np.sum(gy * blocks.se_block_forward(v, residual, w)))  # noqa: E731
    return f, blocks.se_block_vjp(x, residual, residual_vjp, w, gy), x


def _adversarial(rng):
    d = 4
    batch = [(rng.normal(size=d), int(rng.random() < 0.5)) for _ in range(3)]
    cfg = adversarial.PerturbationConfig(epsilon=rng.uniform(0.01, 0.5), reg_lambda=rng.uniform(0.0, 0.5))
    theta = rng.normal(size=d)
    model = adversarial.LogisticModel(theta)
    out, perts = adversarial.adversarial_objective(model, batch, cfg)

    def f(t):
        # R held fixed at its value for the current parameters
        m = adversarial.LogisticModel(t)
        value = sum((m.loss(x + r, y) + m.loss(x, y)) / len(batch) for (x, y), r in zip(batch, perts))
        return value + 0.5 * cfg.reg_lambda * float(np.sum(t * t))

    return f, out.grad, theta


@dataclass(frozen=True)
class Check:
    name: str
    module: str
    build: object


CHECKS = (
    Check("dice_loss", "losses", _dice),
    Check("masked_weighted_dice", "losses", _masked_dice),
    Check("focal_loss", "losses", _focal),
    Check("masked_weighted_focal", "losses", _masked_focal),
    Check("hybrid_loss", "losses", _hybrid),
    Check("fcn_nll", "losses", _fcn_nll),
    Check("bce", "losses", _bce),
    Check("smooth_l1", "losses", _smooth_l1),
    Check("l2_regularizer", "losses", _l2),
    Check("max_pool_mil_loss", "mil-heads", _mil_max),
    Check("label_assign_mil_loss", "mil-heads", _mil_assign),
    Check("sparse_mil_loss", "mil-heads", _mil_sparse),
    Check("patch_scores_backward", "mil-heads", _mil_patch_features),
    Check("detection_loss", "detection", _detection),
    Check("se_block_vjp", "blocks", _se_block),
    Check("adversarial_objective", "adversarial", _adversarial),
)
MODULES = tuple(sorted({c.module for c in CHECKS}))


@dataclass
class CheckResult:
    name: str
    module: str
    trials: int
    max_rel_err: float
    max_abs_err: float

    def passed(self, rel_tol=REL_TOL):
        return self.max_rel_err < rel_tol


def select(module=None):
    if module in (None, "all"):
        return CHECKS
    if module not in MODULES:
        raise ValueError(f"unknown module filter {module!r}; choose from {', '.join(MODULES)}")
    return tuple(c for c in CHECKS if c.module == module)


def run_suite(module=None, trials=100, seed=0, corrupt=False):
    """Run ``trials`` random instances of every selected check.

    ``corrupt`` scales every analytic gradient by 1.01, a negative control
    that the suite must reject.
    """
    if trials < 0:
        raise ValueError("trials must be non-negative")
    rng = as_generator(seed)
    out = []
    for check in select(module):
        rel = absolute = 0.0
        for _ in range(trials):
            f, grad, x = check.build(rng)
            if corrupt:
                grad = np.asarray(grad) * 1.01
            rep = grad_check(f, grad, x)
            rel = max(rel, rep.max_rel_err)
            absolute = max(absolute, rep.max_abs_err)
        if trials:
            out.append(CheckResult(check.name, check.module, trials, rel, absolute))
    return out
