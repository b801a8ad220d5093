"""Overlap, boundary and surface-distance metrics for binary masks, plus Cohen's kappa."""

import math

import numpy as np
from scipy import ndimage


def _binary(mask):
    m = np.asarray(mask)
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("mask must be binary")
    return m.astype(bool)


def _pair(pred, gt):
    p, g = _binary(pred), _binary(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    return p, g


def dice_coefficient(pred, gt):
    """2 TP / (2 TP + FP + FN); two empty masks score 1."""
    p, g = _pair(pred, gt)
    tp = np.count_nonzero(p & g)
    denom = 2 * tp + np.count_nonzero(p & ~g) + np.count_nonzero(~p & g)
    if denom == 0:
        return 1.0
    return 2.0 * tp / denom


def structuring_element(width, ndim, metric="chebyshev"):
    if width < 1:
        raise ValueError("band width must be at least 1")
    size = 2 * width + 1
    if metric == "chebyshev":
        return np.ones((size,) * ndim, dtype=bool)
    if metric == "euclidean":
        offs = np.indices((size,) * ndim) - width
        return np.sum(offs**2, axis=0) <= width * width
    raise ValueError(f"unknown band metric {metric!r}")


def trimap_band(gt, width, metric="chebyshev"):
    """Pixels within ``width`` of the ground-truth boundary: dilation minus erosion.

    Pixels outside the image count as background for the erosion.
    """
    g = _binary(gt)
    se = structuring_element(width, g.ndim, metric)
    dil = ndimage.binary_dilation(g, structure=se)
    ero = ndimage.binary_erosion(g, structure=se, border_value=0)
    return dil & ~ero


def trimap_accuracy(pred, gt, width, metric="chebyshev"):
    p, g = _pair(pred, gt)
    band = trimap_band(g, width, metric)
    n = np.count_nonzero(band)
    if n == 0:
        raise ValueError("empty trimap band")
    return np.count_nonzero(p[band] == g[band]) / n


def surface_voxels(mask):
    """Foreground voxels with at least one background face neighbour (outside counts as background)."""
    m = _binary(mask)
    face = ndimage.generate_binary_structure(m.ndim, 1)
    return m & ~ndimage.binary_erosion(m, structure=face, border_value=0)


def _spacing(spacing, ndim):
    if spacing is None:
        return np.ones(ndim)
    s = np.broadcast_to(np.asarray(spacing, dtype=np.float64), (ndim,)).copy()
    if np.any(s <= 0):
        raise ValueError("voxel spacing must be positive")
    return s


def directed_surface_distances(a, b, spacing=None):
    """Distance from every surface voxel of ``a`` to the nearest surface voxel of ``b``."""
    sa, sb = surface_voxels(a), surface_voxels(b)
    if not sa.any() or not sb.any():
        raise ValueError("undefined distance: empty mask")
    sp = _spacing(spacing, sa.ndim)
    dist_to_b = ndimage.distance_transform_edt(~sb, sampling=sp)
    return dist_to_b[sa]


def nearest_rank(values, q):
    v = np.sort(np.asarray(values, dtype=np.float64))
    rank = max(int(math.ceil(q / 100.0 * v.size)), 1)
    return float(v[rank - 1])


def hausdorff95(pred, gt, spacing=None):
    """max of the nearest-rank 95th percentiles of both directed surface distance sets."""
    p, g = _pair(pred, gt)
    if not p.any() or not g.any():
        raise ValueError("undefined distance: empty mask")
    d_pg = directed_surface_distances(p, g, spacing)
    d_gp = directed_surface_distances(g, p, spacing)
    return max(nearest_rank(d_pg, 95.0), nearest_rank(d_gp, 95.0))


def cohen_kappa(a, b):
    a = np.asarray(a).reshape(-1)
    b = np.asarray(b).reshape(-1)
    if a.size != b.size or a.size == 0:
        raise ValueError("label lists must have equal, non-zero length")
    labels, inv = np.unique(np.concatenate([a, b]), return_inverse=True)
    ia, ib = inv[: a.size], inv[a.size :]
    n = a.size
    p_o = np.count_nonzero(ia == ib) / n
    pa = np.bincount(ia, minlength=labels.size) / n
    pb = np.bincount(ib, minlength=labels.size) / n
    p_e = float(np.dot(pa, pb))
    if p_e == 1.0:
        return 1.0
    return (p_o - p_e) / (1.0 - p_e)
