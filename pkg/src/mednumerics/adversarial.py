"""Worst-case L2 input perturbations and the adversarial training objective.

A model is any object with

* ``loss(x, y)``            negative log-likelihood -log p(y | x)
* ``input_gradient(x, y)``  gradient of ``loss`` with respect to ``x``

and optionally ``params`` plus ``param_gradient(x, y)`` for the parameter
gradient of the objective.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .losses import LossOutput, l2_regularizer

log = logging.getLogger(__name__)

ZERO_GRAD_TOL = 1e-12


class ZeroGradientError(ValueError):
    pass


@dataclass
class PerturbationConfig:
    epsilon: float
    reg_lambda: float = 0.0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.reg_lambda < 0:
            raise ValueError("reg_lambda must be non-negative")


def adversarial_perturbation(g, epsilon):
    """R = -epsilon g / ||g||_2 for g = grad_x log p(y | x)."""
    g = np.asarray(g, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise ValueError("gradient must be finite")
    norm = float(np.sqrt(np.sum(g * g)))
    if norm < ZERO_GRAD_TOL:
        raise ZeroGradientError("zero gradient, perturbation undefined")
    return -epsilon * g / norm


def _perturbations(model, batch, epsilon):
    out = []
    for n, (x, y) in enumerate(batch):
        # grad of log p is minus grad of the NLL
        g = -np.asarray(model.input_gradient(x, y), dtype=np.float64)
        try:
            out.append(adversarial_perturbation(g, epsilon))
        except ZeroGradientError:
            log.warning("example %d has a zero input gradient; using R = 0", n)
            out.append(np.zeros_like(g))
    return out


def adversarial_total_loss(model, batch, config, theta=None):
    """Mean adversarial NLL + mean clean NLL + (lambda / 2) ||theta||^2."""
    batch = list(batch)
    if not batch:
        raise ValueError("empty batch")
    perts = _perturbations(model, batch, config.epsilon)
    adv = sum(model.loss(np.asarray(x) + r, y) for (x, y), r in zip(batch, perts)) / len(batch)
    emp = sum(model.loss(x, y) for x, y in batch) / len(batch)
    if theta is None:
        theta = getattr(model, "params", np.zeros(0))
    return float(adv + emp + l2_regularizer(theta, config.reg_lambda).value)


def adversarial_objective(model, batch, config):
    """Objective value and its gradient w.r.t. ``model.params``.

    The perturbations are computed once and held fixed, so no derivative flows
    through R (no Hessian terms).
    """
    batch = list(batch)
    perts = _perturbations(model, batch, config.epsilon)
    n = len(batch)
    value = 0.0
    grad = np.zeros_like(np.asarray(model.params, dtype=np.float64))
    for (x, y), r in zip(batch, perts):
        xa = np.asarray(x) + r
        value += (model.loss(xa, y) + model.loss(x, y)) / n
        grad += (model.param_gradient(xa, y) + model.param_gradient(x, y)) / n
    reg = l2_regularizer(model.params, config.reg_lambda)
    return LossOutput(float(value + reg.value), grad + reg.grad), perts


class LogisticModel:
    """p(y = 1 | x) = sigmoid(theta . x); a smooth toy model for the adversarial checks."""

    def __init__(self, params):
        self.params = np.asarray(params, dtype=np.float64)

    def _z(self, x):
        return float(np.dot(self.params, np.asarray(x, dtype=np.float64).reshape(-1)))

    def loss(self, x, y):
        z = self._z(x)
        s = z if y == 0 else -z
        return float(np.logaddexp(0.0, s))

    def _dz(self, x, y):
        z = self._z(x)
        p = 1.0 / (1.0 + np.exp(-z))
        return p - y

    def input_gradient(self, x, y):
        return self._dz(x, y) * self.params.reshape(np.shape(x))

    def param_gradient(self, x, y):
        return self._dz(x, y) * np.asarray(x, dtype=np.float64).reshape(-1)


class QuadraticModel:
    """loss(x, y) = 0.5 ||x - y||^2 + params . x, with closed-form perturbed losses."""

    def __init__(self, params):
        self.params = np.asarray(params, dtype=np.float64)

    def loss(self, x, y):
        d = np.asarray(x, dtype=np.float64) - y
        return float(0.5 * np.sum(d * d) + np.dot(self.params, np.asarray(x).reshape(-1)))

    def input_gradient(self, x, y):
        return np.asarray(x, dtype=np.float64) - y + self.params.reshape(np.shape(x))

    def param_gradient(self, x, y):
        return np.asarray(x, dtype=np.float64).reshape(-1)


class ConstantModel:
    """Input-independent model: every perturbation is undefined."""

    params = np.zeros(0)

    def __init__(self, value=1.0):
        self.value = float(value)

    def loss(self, x, y):
        return self.value

    def input_gradient(self, x, y):
        return np.zeros(np.shape(x))
