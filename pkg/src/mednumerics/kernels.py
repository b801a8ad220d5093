"""Hot numeric kernels, each with a numba and a pure-numpy implementation.

The module-level names (``pairwise_gaussian``, ``iou_matrix``, ...) are bound to
the numba variants unless ``MEDNUMERICS_NUMBA=0`` was set at import time.
Both variants are always importable so they can be compared directly
(see ``benchmarks/bench_kernels.py``).

Boxes are cubes stored as rows ``(x, y, z, d)`` with ``d`` the side length.
"""

import math

import numpy as np

from ._accel import USE_NUMBA, njit

# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------


def pairwise_gaussian_numpy(features, bandwidth):
    """K[i, j] = exp(-||f_i - f_j||^2 / (2 bandwidth^2)), full N x N."""
    f = np.ascontiguousarray(features, dtype=np.float64)
    diff = f[:, None, :] - f[None, :, :]
    sq = np.einsum("ijk,ijk->ij", diff, diff)
    return np.exp(-sq / (2.0 * bandwidth * bandwidth))


def iou_matrix_numpy(a, b):
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ra = a[:, 3:4] / 2.0
    rb = b[:, 3] / 2.0
    inter = np.ones((a.shape[0], b.shape[0]))
    vol_a = np.ones((a.shape[0], 1))
    vol_b = np.ones(b.shape[0])
    for k in range(3):
        lo = np.maximum(a[:, k : k + 1] - ra, b[:, k] - rb)
        hi = np.minimum(a[:, k : k + 1] + ra, b[:, k] + rb)
        inter *= np.clip(hi - lo, 0.0, None)
        # extents formed like the overlap so identical boxes give exactly 1
        vol_a *= (a[:, k : k + 1] + ra) - (a[:, k : k + 1] - ra)
        vol_b *= (b[:, k] + rb) - (b[:, k] - rb)
    return inter / (vol_a + vol_b - inter)


def greedy_nms_numpy(boxes, order, iou_thr):
    """Visit boxes in ``order``; keep one unless it overlaps a kept box with IoU >= thr."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    order = np.asarray(order, dtype=np.int64)
    suppressed = np.zeros(boxes.shape[0], dtype=bool)
    keep = []
    for pos in range(order.shape[0]):
        i = order[pos]
        if suppressed[i]:
            continue
        keep.append(i)
        rest = order[pos + 1 :]
        if rest.size:
            ious = iou_matrix_numpy(boxes[i : i + 1], boxes[rest])[0]
            suppressed[rest[ious >= iou_thr]] = True
    return np.asarray(keep, dtype=np.int64)


def _box_range(c, d, n):
    lo = max(int(math.ceil(c - d / 2.0)), 0)
    hi = min(int(math.floor(c + d / 2.0)), n - 1)
    return lo, hi


def box_stats_numpy(volume, boxes):
    """Per-box intensity statistics.

    Columns: inside count, inside sum, inside sum of squares, inside max,
    shell count, shell sum. The shell is the box of twice the side length
    minus the box itself, both clipped to the volume.
    """
    vol = np.asarray(volume, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    out = np.zeros((boxes.shape[0], 6))
    for n, (x, y, z, d) in enumerate(boxes):
        inner = [_box_range(c, d, s) for c, s in zip((x, y, z), vol.shape)]
        outer = [_box_range(c, 2.0 * d, s) for c, s in zip((x, y, z), vol.shape)]
        if any(lo > hi for lo, hi in inner):
            out[n] = (0.0, 0.0, 0.0, -np.inf, 0.0, 0.0)
            continue
        block = vol[tuple(slice(lo, hi + 1) for lo, hi in inner)]
        big = vol[tuple(slice(lo, hi + 1) for lo, hi in outer)]
        out[n, 0] = block.size
        out[n, 1] = block.sum()
        out[n, 2] = np.square(block).sum()
        out[n, 3] = block.max()
        out[n, 4] = big.size - block.size
        out[n, 5] = big.sum() - out[n, 1]
    return out


def min_sq_dist_numpy(a, b, chunk=2048):
    """For each row of ``a`` the squared Euclidean distance to the nearest row of ``b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.empty(a.shape[0])
    for s in range(0, a.shape[0], chunk):
        diff = a[s : s + chunk, None, :] - b[None, :, :]
        out[s : s + chunk] = np.einsum("ijk,ijk->ij", diff, diff).min(axis=1)
    return out


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------


@njit
def pairwise_gaussian_numba(features, bandwidth):
    n, dim = features.shape
    scale = 1.0 / (2.0 * bandwidth * bandwidth)
    out = np.empty((n, n))
    for i in range(n):
        out[i, i] = 1.0
        for j in range(i + 1, n):
            sq = 0.0
            for k in range(dim):
                t = features[i, k] - features[j, k]
                sq += t * t
            v = np.exp(-sq * scale)
            out[i, j] = v
            out[j, i] = v
    return out


@njit
def _iou_pair(a, i, b, j):
    # row indices rather than row views: slicing per pair dominates the cost
    ra = a[i, 3] / 2.0
    rb = b[j, 3] / 2.0
    inter = 1.0
    vol_a = 1.0
    vol_b = 1.0
    for k in range(3):
        lo = max(a[i, k] - ra, b[j, k] - rb)
        hi = min(a[i, k] + ra, b[j, k] + rb)
        if hi <= lo:
            return 0.0
        inter *= hi - lo
        vol_a *= (a[i, k] + ra) - (a[i, k] - ra)
        vol_b *= (b[j, k] + rb) - (b[j, k] - rb)
    return inter / (vol_a + vol_b - inter)


@njit
def iou_matrix_numba(a, b):
    out = np.empty((a.shape[0], b.shape[0]))
    for i in range(a.shape[0]):
        for j in range(b.shape[0]):
            out[i, j] = _iou_pair(a, i, b, j)
    return out


@njit
def greedy_nms_numba(boxes, order, iou_thr):
    n = order.shape[0]
    suppressed = np.zeros(boxes.shape[0], dtype=np.bool_)
    keep = np.empty(n, dtype=np.int64)
    count = 0
    for pos in range(n):
        i = order[pos]
        if suppressed[i]:
            continue
        keep[count] = i
        count += 1
        for q in range(pos + 1, n):
            j = order[q]
            if not suppressed[j] and _iou_pair(boxes, i, boxes, j) >= iou_thr:
                suppressed[j] = True
    return keep[:count]


@njit
def _range_nb(c, d, n):
    lo = int(math.ceil(c - d / 2.0))
    hi = int(math.floor(c + d / 2.0))
    if lo < 0:
        lo = 0
    if hi > n - 1:
        hi = n - 1
    return lo, hi


@njit
def box_stats_numba(volume, boxes):
    nx, ny, nz = volume.shape
    out = np.zeros((boxes.shape[0], 6))
    for n in range(boxes.shape[0]):
        x, y, z, d = boxes[n, 0], boxes[n, 1], boxes[n, 2], boxes[n, 3]
        ix0, ix1 = _range_nb(x, d, nx)
        iy0, iy1 = _range_nb(y, d, ny)
        iz0, iz1 = _range_nb(z, d, nz)
        if ix0 > ix1 or iy0 > iy1 or iz0 > iz1:
            out[n, 3] = -np.inf
            continue
        ox0, ox1 = _range_nb(x, 2.0 * d, nx)
        oy0, oy1 = _range_nb(y, 2.0 * d, ny)
        oz0, oz1 = _range_nb(z, 2.0 * d, nz)
        cnt = 0.0
        s = 0.0
        ss = 0.0
        mx = -np.inf
        scnt = 0.0
        ssum = 0.0
        for i in range(ox0, ox1 + 1):
            in_x = ix0 <= i <= ix1
            for j in range(oy0, oy1 + 1):
                in_xy = in_x and iy0 <= j <= iy1
                for k in range(oz0, oz1 + 1):
                    v = volume[i, j, k]
                    if in_xy and iz0 <= k <= iz1:
                        cnt += 1.0
                        s += v
                        ss += v * v
                        if v > mx:
                            mx = v
                    else:
                        scnt += 1.0
                        ssum += v
        out[n, 0] = cnt
        out[n, 1] = s
        out[n, 2] = ss
        out[n, 3] = mx
        out[n, 4] = scnt
        out[n, 5] = ssum
    return out


@njit
def min_sq_dist_numba(a, b):
    out = np.empty(a.shape[0])
    for i in range(a.shape[0]):
        best = np.inf
        for j in range(b.shape[0]):
            sq = 0.0
            for k in range(a.shape[1]):
                t = a[i, k] - b[j, k]
                sq += t * t
            if sq < best:
                best = sq
        out[i] = best
    return out


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def _boxes(x):
    return np.ascontiguousarray(np.asarray(x, dtype=np.float64).reshape(-1, 4))


if USE_NUMBA:

    def pairwise_gaussian(features, bandwidth):
        return pairwise_gaussian_numba(np.ascontiguousarray(features, dtype=np.float64), float(bandwidth))

    def iou_matrix(a, b):
        return iou_matrix_numba(_boxes(a), _boxes(b))

    def greedy_nms(boxes, order, iou_thr):
        return greedy_nms_numba(_boxes(boxes), np.ascontiguousarray(order, dtype=np.int64), float(iou_thr))

    def box_stats(volume, boxes):
        return box_stats_numba(np.ascontiguousarray(volume, dtype=np.float64), _boxes(boxes))

    def min_sq_dist(a, b):
        return min_sq_dist_numba(np.ascontiguousarray(a, dtype=np.float64), np.ascontiguousarray(b, dtype=np.float64))

else:
    pairwise_gaussian = pairwise_gaussian_numpy
    iou_matrix = iou_matrix_numpy
    greedy_nms = greedy_nms_numpy
    box_stats = box_stats_numpy
    min_sq_dist = min_sq_dist_numpy
