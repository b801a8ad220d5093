"""Fully connected pairwise CRF with Gaussian kernels and mean-field inference.

Label fields are ``[L, N]`` arrays: one column per pixel. Kernels are dense
``[M, N, N]`` stacks (appearance first, spatial second); at N = 1600 this is
about 41 MB and a few tens of milliseconds to build.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels as _k
from .tensor import softmax

STANDARD = "standard"
PAPER_LITERAL = "paper-literal"
MODES = (STANDARD, PAPER_LITERAL)
SIMPLEX_TOL = 1e-6


def potts(num_labels):
    return 1.0 - np.eye(num_labels)


@dataclass
class CrfParams:
    kernel_weights: tuple = (1.0, 1.0)
    compatibility: np.ndarray = field(default_factory=lambda: potts(2))
    appearance_bandwidth: float = 1.0
    spatial_bandwidth: float = 1.0
    iterations_train: int = 5
    iterations_test: int = 10

    def __post_init__(self):
        self.kernel_weights = tuple(float(w) for w in self.kernel_weights)
        self.compatibility = np.asarray(self.compatibility, dtype=np.float64)
        if self.appearance_bandwidth <= 0 or self.spatial_bandwidth <= 0:
            raise ValueError("kernel bandwidths must be positive")
        if self.iterations_train < 1 or self.iterations_test < 1:
            raise ValueError("iteration counts must be at least 1")
        c = self.compatibility
        if c.ndim != 2 or c.shape[0] != c.shape[1] or not np.all(np.isfinite(c)):
            raise ValueError("compatibility must be a finite square matrix")


def grid_positions(shape):
    """Row-major pixel coordinates of an image of the given shape, ``[N, ndim]``."""
    grids = np.meshgrid(*[np.arange(s, dtype=np.float64) for s in shape], indexing="ij")
    return np.stack([g.reshape(-1) for g in grids], axis=1)


def gaussian_kernels(intensities, positions, params):
    """Appearance and spatial kernel matrices, stacked as ``[2, N, N]``.

    The diagonal is stored (it equals 1) but message passing skips it.
    """
    i = np.asarray(intensities, dtype=np.float64).reshape(-1, 1)
    p = np.asarray(positions, dtype=np.float64)
    p = p.reshape(i.shape[0], -1)
    k_app = _k.pairwise_gaussian(i, params.appearance_bandwidth)
    k_sp = _k.pairwise_gaussian(p, params.spatial_bandwidth)
    return np.stack([k_app, k_sp])


def estimate_position_prior(masks, smoothing=1.0):
    """Laplace-smoothed foreground frequency per pixel: (hits + s) / (count + 2 s)."""
    masks = [np.asarray(m, dtype=np.float64) for m in masks]
    if not masks:
        raise ValueError("need at least one mask to estimate a prior")
    shape = masks[0].shape
    if any(m.shape != shape for m in masks):
        raise ValueError("all masks must share one shape")
    hits = np.sum(masks, axis=0)
    return (hits + smoothing) / (len(masks) + 2.0 * smoothing)


def apply_position_prior(p_fcn, prior):
    """Scale foreground (channel 1) by w and background by 1 - w, then renormalise."""
    p = np.asarray(p_fcn, dtype=np.float64)
    if p.shape[0] != 2:
        raise ValueError("position prior applies to binary label fields only")
    w = np.asarray(prior, dtype=np.float64).reshape(p.shape[1:])
    scaled = np.stack([(1.0 - w) * p[0], w * p[1]])
    return scaled / scaled.sum(axis=0, keepdims=True)


def unary_from_probs(p):
    return -np.log(np.clip(np.asarray(p, dtype=np.float64), 1e-7, None))


def combine_unaries(unaries, weights):
    unaries = [np.asarray(u, dtype=np.float64) for u in unaries]
    weights = list(weights)
    if not unaries or len(unaries) != len(weights):
        raise ValueError("need one weight per unary field")
    if any(u.shape != unaries[0].shape for u in unaries):
        raise ValueError("unary fields must share one shape")
    out = np.zeros_like(unaries[0])
    for w, u in zip(weights, unaries):
        out = out + w * u
    return out


def _check_simplex(q):
    if np.any(q < -SIMPLEX_TOL) or np.any(np.abs(q.sum(axis=0) - 1.0) > SIMPLEX_TOL):
        raise ValueError("q is not a probability field (columns must lie on the simplex)")


def meanfield_step(q, psi_u, kernels, params, mode=STANDARD):
    """One mean-field update.

    ``standard``      logits = -psi_u - q_hat
    ``paper-literal`` logits = exp(-psi_u) - q_hat
    followed by a softmax over labels in both modes.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    q = np.asarray(q, dtype=np.float64)
    psi = np.asarray(psi_u, dtype=np.float64)
    _check_simplex(q)
    kern = np.asarray(kernels, dtype=np.float64)
    weights = params.kernel_weights
    if len(weights) != kern.shape[0]:
        raise ValueError(f"{kern.shape[0]} kernels but {len(weights)} kernel weights")
    q_check = np.zeros_like(q)
    for w, k in zip(weights, kern):
        if w == 0.0:
            continue
        # sum over j != i
        q_tilde = q @ k.T - np.diagonal(k)[None, :] * q
        q_check = q_check + w * q_tilde
    q_hat = params.compatibility @ q_check
    if mode == STANDARD:
        logits = -psi - q_hat
    else:
        logits = np.exp(-psi) - q_hat
    return softmax(logits, axis=0)


def meanfield_iterates(psi_u, kernels, params, iterations=None, mode=STANDARD):
    """Yield q after each of ``iterations`` updates, starting from softmax(-psi_u)."""
    t = params.iterations_test if iterations is None else iterations
    if t < 1:
        raise ValueError("need at least one iteration")
    q = softmax(-np.asarray(psi_u, dtype=np.float64), axis=0)
    for _ in range(t):
        q = meanfield_step(q, psi_u, kernels, params, mode)
        yield q


def meanfield_infer(psi_u, kernels, params, iterations=None, mode=STANDARD, train=False):
    if iterations is None:
        iterations = params.iterations_train if train else params.iterations_test
    q = None
    for q in meanfield_iterates(psi_u, kernels, params, iterations, mode):
        pass
    return q
