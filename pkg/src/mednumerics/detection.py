"""Cubic 3D boxes, anchors, target coding, the multi-task loss, NMS and FROC.

Boxes are ``(x, y, z, d)`` rows: centre in voxels and cube side ``d``.
Batches of boxes are ``[n, 4]`` arrays.
"""

import json
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import kernels as _k
from .losses import bce, smooth_l1
from .tensor import sigmoid

ANCHOR_SCALES = (5.0, 10.0, 20.0)
POS_IOU = 0.5
NEG_IOU = 0.02
NMS_IOU = 0.1
DETECT_LOGIT_THR = -2.0
FROC_FP_POINTS = (0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0)

POSITIVE, NEGATIVE, IGNORE = 1, 0, -1


class Box3(NamedTuple):
    x: float
    y: float
    z: float
    d: float


class RegTarget(NamedTuple):
    tx: float
    ty: float
    tz: float
    td: float


class Detection(NamedTuple):
    box: Box3
    logit: float

    @property
    def score(self):
        return float(sigmoid(np.array([self.logit]))[0])


def as_boxes(boxes):
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if np.any(b[:, 3] <= 0):
        raise ValueError("box diameters must be positive")
    return b


def iou3(a, b):
    return float(_k.iou_matrix(as_boxes(a), as_boxes(b))[0, 0])


def iou_matrix(a, b):
    return _k.iou_matrix(as_boxes(a), as_boxes(b))


def gen_anchors(grid, stride, scales=ANCHOR_SCALES):
    """One anchor per (cell, scale); cell (i, j, k) is centred at ((i, j, k) + 0.5) * stride."""
    if stride < 1:
        raise ValueError("stride must be at least 1")
    gx, gy, gz = (int(g) for g in grid)
    cells = np.stack(np.meshgrid(np.arange(gx), np.arange(gy), np.arange(gz), indexing="ij"), -1).reshape(-1, 3)
    centres = (cells + 0.5) * stride
    scales = np.asarray(scales, dtype=np.float64)
    out = np.empty((centres.shape[0] * scales.size, 4))
    out[:, :3] = np.repeat(centres, scales.size, axis=0)
    out[:, 3] = np.tile(scales, centres.shape[0])
    return out


def encode_target(gt, anchor):
    """((x - xa)/da, (y - ya)/da, (z - za)/da, log(d/da)), row-wise for batches."""
    g = as_boxes(gt)
    a = as_boxes(anchor)
    t = np.empty(np.broadcast_shapes(g.shape, a.shape))
    t[:, :3] = (g[:, :3] - a[:, :3]) / a[:, 3:4]
    t[:, 3] = np.log(g[:, 3] / a[:, 3])
    return t[0] if np.ndim(gt) == 1 and np.ndim(anchor) == 1 else t


def decode(t, anchor):
    t = np.asarray(t, dtype=np.float64).reshape(-1, 4)
    a = as_boxes(anchor)
    out = np.empty(np.broadcast_shapes(t.shape, a.shape))
    out[:, :3] = a[:, :3] + t[:, :3] * a[:, 3:4]
    out[:, 3] = a[:, 3] * np.exp(t[:, 3])
    return out[0] if out.shape[0] == 1 and np.ndim(anchor) == 1 else out


def label_anchors(anchors, gts, pos_iou=POS_IOU, neg_iou=NEG_IOU):
    """Positive if max IoU > pos_iou, negative if max IoU < neg_iou, otherwise ignored.

    Returns ``(labels, matched)`` where ``matched`` is the argmax ground truth
    index for positives and -1 elsewhere.
    """
    if not 0 < neg_iou < pos_iou < 1:
        raise ValueError("thresholds must satisfy 0 < neg < pos < 1")
    a = as_boxes(anchors)
    g = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    labels = np.full(a.shape[0], IGNORE, dtype=np.int64)
    matched = np.full(a.shape[0], -1, dtype=np.int64)
    if g.shape[0] == 0:
        labels[:] = NEGATIVE
        return labels, matched
    ious = _k.iou_matrix(a, as_boxes(g))
    best = ious.max(axis=1)
    arg = ious.argmax(axis=1)
    pos = best > pos_iou
    labels[pos] = POSITIVE
    labels[best < neg_iou] = NEGATIVE
    matched[pos] = arg[pos]
    return labels, matched


@dataclass
class DetectionLossOutput:
    value: float
    grad: np.ndarray  # [n, 5]: d/d logit, d/d (tx, ty, tz, td)
    cls_value: float
    reg_value: float


def detection_loss(preds, labels, targets, lam=0.5):
    """lam * mean BCE over non-ignored anchors + smooth-L1 summed over coordinates, mean over positives.

    ``preds`` is ``[n, 5]``: logit followed by the predicted offsets.
    """
    preds = np.asarray(preds, dtype=np.float64).reshape(-1, 5)
    labels = np.asarray(labels).reshape(-1)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 4)
    if labels.shape[0] != preds.shape[0] or targets.shape[0] != preds.shape[0]:
        raise ValueError("preds, labels and targets must be aligned")
    active = labels != IGNORE
    if not np.any(active):
        raise ValueError("no non-ignored anchors")
    grad = np.zeros_like(preds)
    logits = preds[active, 0]
    p = sigmoid(logits)
    y = (labels[active] == POSITIVE).astype(np.float64)
    cls = bce(p, y)
    grad[active, 0] = lam * cls.grad * p * (1.0 - p)
    pos = labels == POSITIVE
    reg_value = 0.0
    if np.any(pos):
        reg = smooth_l1(preds[pos, 1:], targets[pos])
        # smooth_l1 averages over 4 * n_pos elements; rescale to a per-anchor sum
        reg_value = reg.value * 4.0
        grad[pos, 1:] = reg.grad * 4.0
    value = lam * cls.value + reg_value
    return DetectionLossOutput(float(value), grad, float(cls.value), float(reg_value))


def hard_negative_mine(neg_scores, n):
    """Indices of the ``n`` highest scores, ties broken by lower index."""
    s = np.asarray(neg_scores, dtype=np.float64).reshape(-1)
    if n > s.size:
        raise ValueError(f"asked for {n} negatives but only {s.size} are available")
    return np.argsort(-s, kind="stable")[:n]


def nms(boxes, scores, iou_thr=NMS_IOU):
    """Greedy NMS; returns kept indices in descending score order (stable on ties)."""
    if not 0.0 <= iou_thr <= 1.0:
        raise ValueError("iou threshold must lie in [0, 1]")
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if s.size == 0:
        return np.zeros(0, dtype=np.int64)
    b = as_boxes(boxes)
    order = np.argsort(-s, kind="stable")
    return _k.greedy_nms(b, order, iou_thr)


def filter_detections(boxes, logits, logit_thr=DETECT_LOGIT_THR, nms_iou=NMS_IOU):
    """Keep logit > threshold, then NMS; returns indices into the input."""
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    idx = np.flatnonzero(logits > logit_thr)
    if idx.size == 0:
        return idx
    kept = nms(np.asarray(boxes).reshape(-1, 4)[idx], logits[idx], nms_iou)
    return idx[kept]


def center_hit(det, gt):
    """LUNA16-style hit: detection centre within the ground-truth sphere."""
    return float(np.sum((np.asarray(det[:3]) - np.asarray(gt[:3])) ** 2)) <= (gt[3] / 2.0) ** 2


@dataclass
class FrocResult:
    froc: float
    fp_points: tuple
    sensitivities: tuple
    curve_fps: tuple
    curve_sens: tuple

    def as_dict(self):
        return {
            "froc": self.froc,
            "fp_points": list(self.fp_points),
            "sensitivities": list(self.sensitivities),
        }


def froc(scans, hit_rule=center_hit, fp_points=FROC_FP_POINTS):
    """Free-response ROC summary over scans.

    ``scans`` is a sequence of ``(dets, gts)`` with ``dets`` rows
    ``(x, y, z, d, score)`` and ``gts`` rows ``(x, y, z, d)``. Detections are
    swept by descending score (equal scores enter together). A detection that
    hits some ground truth is never a false positive; each ground truth counts
    once. Sensitivity at each FP-per-scan point is read off the curve by
    linear interpolation, held flat past the last achieved FP rate.
    """
    scans = list(scans)
    if not scans:
        raise ValueError("need at least one scan")
    n_scans = len(scans)
    records = []  # (score, scan index, hit gt ids)
    total_gt = 0
    for s, (dets, gts) in enumerate(scans):
        dets = np.asarray(dets, dtype=np.float64).reshape(-1, 5)
        gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
        for det in dets:
            hits = tuple(total_gt + g for g in range(gts.shape[0]) if hit_rule(det, gts[g]))
            records.append((det[4], hits))
        total_gt += gts.shape[0]
    points_fp = [0.0]
    points_sens = [0.0]
    if records and total_gt:
        order = np.argsort(-np.array([r[0] for r in records]), kind="stable")
        found = set()
        fps = 0
        i = 0
        while i < len(order):
            score = records[order[i]][0]
            while i < len(order) and records[order[i]][0] == score:
                hits = records[order[i]][1]
                if hits:
                    found.update(hits)
                else:
                    fps += 1
                i += 1
            rate = fps / n_scans
            sens = len(found) / total_gt
            if rate == points_fp[-1]:
                points_sens[-1] = max(points_sens[-1], sens)
            else:
                points_fp.append(rate)
                points_sens.append(sens)
    sens_at = np.interp(fp_points, points_fp, points_sens)
    return FrocResult(
        froc=float(np.mean(sens_at)),
        fp_points=tuple(float(f) for f in fp_points),
        sensitivities=tuple(float(v) for v in sens_at),
        curve_fps=tuple(points_fp),
        curve_sens=tuple(points_sens),
    )


def load_scans(path):
    """Read ``[{"dets": [[x, y, z, d, score], ...], "gts": [[x, y, z, d], ...]}, ...]``."""
    with open(path) as fh:
        doc = json.load(fh)
    return scans_from_doc(doc)


def scans_from_doc(doc):
    if not isinstance(doc, list):
        raise ValueError("scan document must be a list")
    out = []
    for k, scan in enumerate(doc):
        try:
            dets = np.asarray(scan["dets"], dtype=np.float64).reshape(-1, 5)
            gts = np.asarray(scan["gts"], dtype=np.float64).reshape(-1, 4)
        except (KeyError, ValueError, TypeError) as exc:
            raise ValueError(f"scan {k} is malformed: {exc}") from exc
        out.append((dets, gts))
    return out


def scans_to_doc(scans):
    return [{"dets": np.asarray(d).reshape(-1, 5).tolist(), "gts": np.asarray(g).reshape(-1, 4).tolist()} for d, g in scans]
