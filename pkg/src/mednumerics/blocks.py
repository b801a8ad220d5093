"""Forward algebra of the squeeze-and-excitation residual block and the dual-path connection.

Feature volumes are ``[K, S, H, W]`` arrays. Residual and path functions are
caller-supplied callables; no convolution engine lives here.
"""

from dataclasses import dataclass

import numpy as np

from .tensor import sigmoid

DEFAULT_SLOPE = 0.01
DEFAULT_REDUCTION = 4


def leaky_relu(x, slope=DEFAULT_SLOPE):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, x, slope * x)


def _leaky_grad(x, slope):
    return np.where(x >= 0, 1.0, slope)


def relu(x):
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def identity(x):
    return np.asarray(x, dtype=np.float64)


@dataclass
class SeWeights:
    w1: np.ndarray  # [K / r, K]
    w2: np.ndarray  # [K, K / r]
    leaky_slope: float = DEFAULT_SLOPE

    def __post_init__(self):
        self.w1 = np.asarray(self.w1, dtype=np.float64)
        self.w2 = np.asarray(self.w2, dtype=np.float64)
        hidden, k = self.w1.shape
        if self.w2.shape != (k, hidden):
            raise ValueError(f"w2 must be {(k, hidden)}, got {self.w2.shape}")
        if hidden < 1 or k % hidden:
            raise ValueError("channel count must be divisible by the reduction ratio")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ValueError("leaky slope must lie in (0, 1)")

    @property
    def channels(self):
        return self.w1.shape[1]

    @property
    def reduction(self):
        return self.w1.shape[1] // self.w1.shape[0]

    @classmethod
    def random(cls, channels, reduction=DEFAULT_REDUCTION, rng=None, scale=0.5, leaky_slope=DEFAULT_SLOPE):
        if channels % reduction:
            raise ValueError("channel count must be divisible by the reduction ratio")
        rng = np.random.default_rng(rng)
        hidden = channels // reduction
        return cls(
            scale * rng.standard_normal((hidden, channels)),
            scale * rng.standard_normal((channels, hidden)),
            leaky_slope,
        )


def squeeze(xr):
    """Global average pool: one value per channel."""
    x = np.asarray(xr, dtype=np.float64)
    return x.reshape(x.shape[0], -1).mean(axis=1)


def excite(z, w):
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    if z.shape[0] != w.channels:
        raise ValueError(f"{z.shape[0]} channels but weights expect {w.channels}")
    return sigmoid(w.w2 @ leaky_relu(w.w1 @ z, w.leaky_slope))


def _check_volume(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or min(x.shape) < 1:
        raise ValueError(f"expected a [K, S, H, W] volume, got shape {x.shape}")
    return x


def se_block_forward(x, residual, w):
    """Y = LeakyReLU(s * F(x) + x) with s = excite(squeeze(F(x)))."""
    x = _check_volume(x)
    xr = np.asarray(residual(x), dtype=np.float64)
    if xr.shape != x.shape:
        raise ValueError(f"residual changed the shape from {x.shape} to {xr.shape}")
    s = excite(squeeze(xr), w)
    return leaky_relu(s[:, None, None, None] * xr + x, w.leaky_slope)


def se_block_vjp(x, residual, residual_vjp, w, grad_y):
    """Vector-Jacobian product of :func:`se_block_forward` with respect to ``x``.

    ``residual_vjp(x, g)`` must return the pullback of ``g`` through the residual.
    """
    x = _check_volume(x)
    xr = np.asarray(residual(x), dtype=np.float64)
    k = x.shape[0]
    z = squeeze(xr)
    u = w.w1 @ z
    h = leaky_relu(u, w.leaky_slope)
    s = sigmoid(w.w2 @ h)
    pre = s[:, None, None, None] * xr + x
    g_pre = np.asarray(grad_y, dtype=np.float64) * _leaky_grad(pre, w.leaky_slope)
    g_xr = g_pre * s[:, None, None, None]
    g_s = np.sum((g_pre * xr).reshape(k, -1), axis=1)
    g_a = g_s * s * (1.0 - s)
    g_u = (w.w2.T @ g_a) * _leaky_grad(u, w.leaky_slope)
    g_z = w.w1.T @ g_u
    g_xr = g_xr + (g_z / xr[0].size)[:, None, None, None]
    return g_pre + np.asarray(residual_vjp(x, g_xr), dtype=np.float64)


def dual_path_forward(x, fx, d, activation=relu):
    """activation(concat(x[:d], F(x)[:d], F(x)[d:] + x[d:])) with C + d output channels."""
    x = np.asarray(x, dtype=np.float64)
    fx = np.asarray(fx, dtype=np.float64)
    c, k = x.shape[0], fx.shape[0]
    if k != c or x.shape[1:] != fx.shape[1:]:
        raise ValueError(f"path output {fx.shape} must match input {x.shape} (K = C)")
    if not 0 <= d <= c:
        raise ValueError(f"d={d} outside [0, {c}]")
    return activation(np.concatenate([x[:d], fx[:d], fx[d:] + x[d:]], axis=0))
