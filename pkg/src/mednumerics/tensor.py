"""Dense float64 arrays, elementwise math, reductions and the finite-difference oracle.

Tensors are plain ``numpy.ndarray`` objects in double precision. The on-disk
"tjson" form is ``{"shape": [...], "data": [...]}`` with ``data`` flattened in
row-major order.
"""

import json
from dataclasses import dataclass, field

import numpy as np

DEFAULT_STEP = 1e-5
REL_ERR_FLOOR = 1e-8


def as_tensor(x):
    t = np.array(x, dtype=np.float64)
    if not np.all(np.isfinite(t)):
        raise ValueError("tensor contains non-finite values")
    return t


def sigmoid(t):
    x = np.asarray(t, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(t, axis=0):
    x = np.asarray(t, dtype=np.float64)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(t, axis=0):
    x = np.asarray(t, dtype=np.float64)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def reduce(t, op, axis=None):
    """``sum``, ``mean`` or ``max`` over ``axis`` (all elements if None)."""
    x = np.asarray(t, dtype=np.float64)
    if op == "sum":
        return np.sum(x, axis=axis)
    if op == "mean":
        count = x.size if axis is None else x.shape[axis]
        return np.sum(x, axis=axis) / count
    if op == "max":
        if x.size == 0 or (axis is not None and x.shape[axis] == 0):
            raise ValueError("max over an empty extent")
        return np.max(x, axis=axis)
    raise ValueError(f"unknown reduction {op!r}")


def finite_diff_grad(f, x, h=DEFAULT_STEP):
    """Central-difference gradient of a scalar function, one element at a time."""
    if h <= 0:
        raise ValueError("step must be positive")
    x0 = np.array(x, dtype=np.float64, order="C")
    grad = np.empty_like(x0)
    flat = x0.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x0))
        flat[i] = orig - h
        fm = float(f(x0))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"non-finite function value near element {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    max_abs_err: float = field(init=False)
    max_rel_err: float = field(init=False)

    def __post_init__(self):
        a = self.analytic.reshape(-1)
        n = self.numeric.reshape(-1)
        abs_err = np.abs(a - n)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), REL_ERR_FLOOR)
        self.max_abs_err = float(abs_err.max(initial=0.0))
        self.max_rel_err = float((abs_err / denom).max(initial=0.0))

    def table(self):
        return list(zip(self.analytic.reshape(-1).tolist(), self.numeric.reshape(-1).tolist()))

    def passed(self, rel_tol=1e-4):
        return self.max_rel_err < rel_tol


def grad_check(f, grad, x, h=DEFAULT_STEP):
    """Compare an analytic gradient against central differences of ``f`` at ``x``."""
    x = np.asarray(x, dtype=np.float64)
    return GradCheckReport(np.asarray(grad, dtype=np.float64).reshape(x.shape), finite_diff_grad(f, x, h))


def to_tjson(t):
    x = np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("tjson cannot hold non-finite values")
    return {"shape": list(x.shape), "data": x.reshape(-1).tolist()}


def from_tjson(doc):
    try:
        shape = [int(s) for s in doc["shape"]]
        data = np.asarray(doc["data"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"malformed tjson document: {exc}") from exc
    if any(s < 1 for s in shape):
        raise ValueError("tjson shape extents must be positive")
    if data.size != int(np.prod(shape)):
        raise ValueError(f"tjson data length {data.size} does not match shape {shape}")
    return as_tensor(data.reshape(shape))


def load_tjson(path):
    with open(path) as fh:
        return from_tjson(json.load(fh))


def save_tjson(path, t):
    with open(path, "w") as fh:
        json.dump(to_tjson(t), fh)
