"""Weakly supervised detection by expectation-maximisation.

A weak label gives a nodule's lobe and central slice but no box. The latent
box is one of the detector's filtered proposals; its posterior combines the
detector score, a truncated half-Gaussian slice model and a softmax lobe
model. The training loop alternates an E-step (posterior over proposals,
then MAP or sampled pseudo boxes) with detector updates on the pseudo-labelled
weak batch and on the fully labelled data.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Protocol

import numpy as np
from scipy import ndimage

from . import detection
from .rng import SplitMix64, as_generator
from .synth import N_LOBES, Scan, WeakLabel, blob_features_batch, derive_weak_label, gen_scans
from .tensor import sigmoid

log = logging.getLogger(__name__)

__all__ = ["WeakLabel"]

DEFAULT_MU = 1.63
PROPOSAL_LOGIT_THR = -3.0
PROPOSAL_NMS_IOU = 0.1
MAP, SAMPLING = "map", "sampling"
MODES = (MAP, SAMPLING)
# FROC values closer than this are the same operating curve up to rounding
FROC_TIE_TOL = 1e-9


class InconsistentWeakLabel(ValueError):
    pass


@dataclass(frozen=True)
class HalfGaussianModel:
    sigma: float
    mu: float = DEFAULT_MU

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.mu < 0:
            raise ValueError("mu must be non-negative")

    @property
    def peak(self):
        return 2.0 / math.sqrt(2.0 * math.pi * self.sigma * self.sigma)

    def density(self, dz):
        delta = max(abs(float(dz)) - self.mu, 0.0)
        return self.peak * math.exp(-delta * delta / (2.0 * self.sigma * self.sigma))

    def exclusion_radius(self, k=3.0):
        return self.mu + k * self.sigma


def slice_likelihood(z_weak, box, model):
    return model.density(float(z_weak) - float(np.asarray(box).reshape(4)[2]))


def lobe_features(box, extents):
    """(x/X, y/Y, z/Z, 1)."""
    b = np.asarray(box, dtype=np.float64).reshape(4)
    ext = np.asarray(extents, dtype=np.float64).reshape(3)
    if np.any(ext <= 0):
        raise ValueError("extents must be positive")
    return np.append(b[:3] / ext, 1.0)


def lobe_features_batch(boxes, extents):
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    ext = np.asarray(extents, dtype=np.float64).reshape(3)
    return np.column_stack([b[:, :3] / ext, np.ones(b.shape[0])])


@dataclass
class LobeModel:
    theta: np.ndarray = field(default_factory=lambda: np.zeros((N_LOBES, 4)))

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.theta.shape != (N_LOBES, 4) or not np.all(np.isfinite(self.theta)):
            raise ValueError(f"theta must be a finite {N_LOBES}x4 matrix")

    def probs(self, feats):
        z = np.asarray(feats, dtype=np.float64).reshape(-1, 4) @ self.theta.T
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)


def lobe_likelihood(loc, box, extents, model):
    """Softmax probability of ``loc`` (1-based) over the six lobe logits f . theta_l.

    Evaluated in scalar arithmetic with correctly rounded sums, so the value
    does not depend on BLAS summation order.
    """
    if not 1 <= int(loc) <= N_LOBES:
        raise ValueError(f"loc must lie in 1..{N_LOBES}")
    f = [float(v) for v in lobe_features(box, extents)]
    logits = [math.fsum(fi * float(t) for fi, t in zip(f, row)) for row in model.theta]
    m = max(logits)
    e = [math.exp(v - m) for v in logits]
    return e[int(loc) - 1] / math.fsum(e)


def lobe_nll(model, feats, locs):
    p = model.probs(feats)
    idx = np.asarray(locs, dtype=np.int64) - 1
    return float(-np.mean(np.log(p[np.arange(idx.size), idx])))


def fit_lobe_regression(samples, steps=2000, lr=0.5, theta=None):
    """Multinomial logistic regression on (box, extents, loc) samples by gradient descent.

    Features lie in [0, 1]^3 plus a bias, so the mean NLL is 1-smooth and any
    ``lr`` below 2 decreases it monotonically.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("need at least one lobe sample")
    feats = np.array([lobe_features(b, e) for b, e, _ in samples])
    locs = np.array([int(loc) for _, _, loc in samples])
    if np.any((locs < 1) | (locs > N_LOBES)):
        raise ValueError("loc out of range")
    y = np.zeros((locs.size, N_LOBES))
    y[np.arange(locs.size), locs - 1] = 1.0
    model = LobeModel(np.zeros((N_LOBES, 4)) if theta is None else theta)
    n = feats.shape[0]
    for _ in range(steps):
        p = model.probs(feats)
        model.theta = model.theta - lr * ((p - y).T @ feats) / n
    return model


def filter_proposals(boxes, logits, logit_thr=PROPOSAL_LOGIT_THR, nms_iou=PROPOSAL_NMS_IOU):
    """Indices of proposals with logit above the threshold that survive NMS."""
    return detection.filter_detections(boxes, logits, logit_thr, nms_iou)


@dataclass
class Posterior:
    proposals: np.ndarray  # [n, 4]
    priors: np.ndarray  # P(H | I)
    weights: np.ndarray

    def __len__(self):
        return self.weights.shape[0]


def weak_posterior(boxes, priors, weak, extents, hg, lobe):
    """weight_j proportional to prior_j * slice likelihood * lobe likelihood."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    priors = np.asarray(priors, dtype=np.float64).reshape(-1)
    if boxes.shape[0] == 0:
        raise InconsistentWeakLabel("no proposals to explain the weak label")
    if priors.shape[0] != boxes.shape[0]:
        raise ValueError("one prior per proposal")
    raw = [
        float(p) * slice_likelihood(weak.z, b, hg) * lobe_likelihood(weak.loc, b, extents, lobe)
        for b, p in zip(boxes, priors)
    ]
    total = math.fsum(raw)
    if not total > 0:
        raise InconsistentWeakLabel("weak label inconsistent with proposals")
    weights = np.array([r / total for r in raw])
    return Posterior(boxes, priors.copy(), weights)


def map_index(post):
    if len(post) == 0:
        raise ValueError("empty posterior")
    return int(np.argmax(post.weights))


def infer_map(post):
    return detection.Box3(*post.proposals[map_index(post)])


def sample_indices(post, m_hat=2, rng=None):
    """``m_hat`` categorical draws with replacement by inverse CDF."""
    if len(post) == 0:
        raise ValueError("empty posterior")
    if m_hat < 1:
        raise ValueError("m_hat must be at least 1")
    rng = as_generator(rng)
    cdf = np.cumsum(post.weights)
    u = np.asarray(rng.random(m_hat), dtype=np.float64) * cdf[-1]
    return np.minimum(np.searchsorted(cdf, u, side="right"), len(post) - 1)


def infer_sampling(post, m_hat=2, rng=None):
    return [detection.Box3(*post.proposals[i]) for i in sample_indices(post, m_hat, rng)]


# ---------------------------------------------------------------------------
# detector contract and the reference blob scorer
# ---------------------------------------------------------------------------


class DetectorContract(Protocol):
    def score(self, scan, boxes): ...

    def propose(self, scan): ...

    def update(self, batch): ...


class TrainItem(NamedTuple):
    scan: Scan
    positives: np.ndarray  # [k, 4]
    weights: np.ndarray  # [k]
    negative_ok: np.ndarray  # bool mask over the scan's candidates


class LogisticBlobDetector:
    """Logistic regression on quadratic blob features of local-maximum candidates.

    Candidates are the ``max_peaks`` strongest local maxima of the smoothed
    volume, each at every diameter in ``diameters``. Features are cached on
    the scan, so repeated proposals cost one matrix product.
    """

    def __init__(self, diameters=(5.0, 7.0, 10.0), max_peaks=48, smooth_sigma=1.0, l2=1e-2, lr=1.0, steps=20, negatives_per_scan=16):
        self.diameters = tuple(float(d) for d in diameters)
        self.max_peaks = int(max_peaks)
        self.smooth_sigma = float(smooth_sigma)
        self.l2 = float(l2)
        self.lr = float(lr)
        self.steps = int(steps)
        self.negatives_per_scan = int(negatives_per_scan)
        self.mean = None
        self.scale = None
        self.params = None

    @property
    def _key(self):
        return ("blob", self.diameters, self.max_peaks, self.smooth_sigma)

    def candidates(self, scan):
        hit = scan.cache.get(self._key)
        if hit is not None:
            return hit
        sm = ndimage.gaussian_filter(scan.volume, self.smooth_sigma, mode="nearest")
        peaks = (ndimage.maximum_filter(sm, size=5, mode="nearest") == sm)
        idx = np.flatnonzero(peaks)
        order = np.argsort(-sm.reshape(-1)[idx], kind="stable")[: self.max_peaks]
        centres = np.column_stack(np.unravel_index(idx[order], sm.shape)).astype(np.float64)
        boxes = np.empty((centres.shape[0] * len(self.diameters), 4))
        boxes[:, :3] = np.repeat(centres, len(self.diameters), axis=0)
        boxes[:, 3] = np.tile(self.diameters, centres.shape[0])
        feats = blob_features_batch(scan.volume, boxes)
        scan.cache[self._key] = (boxes, feats)
        return boxes, feats

    def fit_scaler(self, scans):
        feats = np.concatenate([self.candidates(s)[1] for s in scans])
        self.mean = feats.mean(axis=0)
        self.scale = feats.std(axis=0) + 1e-8
        self.params = np.zeros(self.design(feats[:1]).shape[1])

    def design(self, feats):
        z = (np.asarray(feats, dtype=np.float64) - self.mean) / self.scale
        iu = np.triu_indices(z.shape[1])
        quad = (z[:, :, None] * z[:, None, :])[:, iu[0], iu[1]]
        return np.column_stack([np.ones(z.shape[0]), z, quad])

    def _logits(self, feats):
        return self.design(feats) @ self.params

    def propose(self, scan):
        boxes, feats = self.candidates(scan)
        return boxes, self._logits(feats)

    def score(self, scan, boxes):
        return sigmoid(self._logits(blob_features_batch(scan.volume, boxes)))

    def objective(self, X, y, w):
        z = X @ self.params
        nll = np.logaddexp(0.0, np.where(y > 0, -z, z))
        reg = 0.5 * self.l2 * np.sum(self.params[1:] ** 2)
        return float(np.sum(w * nll) / np.sum(w) + reg)

    def _assemble(self, batch):
        rows, ys, ws = [], [], []
        for item in batch:
            if len(item.positives):
                rows.append(blob_features_batch(item.scan.volume, item.positives))
                ys.append(np.ones(len(item.positives)))
                ws.append(np.asarray(item.weights, dtype=np.float64))
            boxes, feats = self.candidates(item.scan)
            allowed = np.flatnonzero(item.negative_ok)
            if allowed.size:
                logits = self._logits(feats[allowed])
                k = min(self.negatives_per_scan, allowed.size)
                hard = allowed[detection.hard_negative_mine(logits, k)]
                rows.append(feats[hard])
                ys.append(np.zeros(hard.size))
                ws.append(np.ones(hard.size))
        if not rows:
            return None
        return self.design(np.concatenate(rows)), np.concatenate(ys), np.concatenate(ws)

    def update(self, batch, steps=None):
        """Gradient descent on weighted BCE + L2 over positives and mined hard negatives.

        The step is capped at 1/L for the objective's smoothness constant L,
        so the objective never increases. Returns the per-step objective trace.
        """
        data = self._assemble(batch)
        if data is None:
            return []
        X, y, w = data
        wn = w / np.sum(w)
        smooth = 0.25 * float(np.linalg.eigvalsh((X * wn[:, None]).T @ X)[-1]) + self.l2
        lr = min(self.lr, 1.0 / smooth)
        trace = [self.objective(X, y, w)]
        for _ in range(self.steps if steps is None else steps):
            p = sigmoid(X @ self.params)
            g = X.T @ (wn * (p - y))
            g[1:] += self.l2 * self.params[1:]
            self.params = self.params - lr * g
            trace.append(self.objective(X, y, w))
        return trace


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class EmConfig:
    mode: str = MAP
    epochs: int = 32
    weak_fraction: float = 1.0 / 16.0
    m_hat: int = 2
    sigma: float = 1.0
    mu: float = DEFAULT_MU
    exclusion: float = None  # slice distance; defaults to mu + 3 sigma
    init_rounds: int = 8
    logit_thr: float = PROPOSAL_LOGIT_THR
    nms_iou: float = PROPOSAL_NMS_IOU

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.epochs < 0 or self.m_hat < 1:
            raise ValueError("epochs must be >= 0 and m_hat >= 1")
        if not 0 < self.weak_fraction <= 1:
            raise ValueError("weak fraction must lie in (0, 1]")
        if self.exclusion is None:
            self.exclusion = HalfGaussianModel(self.sigma, self.mu).exclusion_radius()


@dataclass
class EpochRecord:
    epoch: int
    q_objective: float
    froc_val: float
    pseudo_boxes: int
    skipped: int


@dataclass
class EmReport:
    mode: str
    epochs: list
    initial_froc: float = float("nan")
    skipped_total: int = 0

    @property
    def final_froc(self):
        return self.epochs[-1].froc_val if self.epochs else self.initial_froc

    def as_dict(self):
        return {
            "mode": self.mode,
            "initial_froc": self.initial_froc,
            "skipped_total": self.skipped_total,
            "epochs": [
                {"epoch": e.epoch, "q_objective": e.q_objective, "froc_val": e.froc_val, "pseudo_boxes": e.pseudo_boxes, "skipped": e.skipped}
                for e in self.epochs
            ],
        }


@dataclass
class WeakScan:
    scan: Scan
    labels: list


def weak_from_scan(scan):
    """Strip boxes down to weak labels."""
    ext = scan.volume.shape
    return WeakScan(scan, [derive_weak_label(g, ext) for g in scan.gts])


def _full_item(detector, scan):
    boxes, _ = detector.candidates(scan)
    ok = np.ones(boxes.shape[0], dtype=bool)
    for g in scan.gts:
        near = np.sum((boxes[:, :3] - g[:3]) ** 2, axis=1) <= (g[3] / 2.0 + boxes[:, 3] / 2.0) ** 2
        ok &= ~near
    return TrainItem(scan, scan.gts, np.ones(len(scan.gts)), ok)


def evaluate_froc(detector, scans, logit_thr=detection.DETECT_LOGIT_THR, nms_iou=detection.NMS_IOU):
    out = []
    for scan in scans:
        boxes, logits = detector.propose(scan)
        keep = detection.filter_detections(boxes, logits, logit_thr, nms_iou)
        dets = np.column_stack([boxes[keep], sigmoid(logits[keep])]) if keep.size else np.zeros((0, 5))
        out.append((dets, scan.gts))
    return detection.froc(out).froc


def em_train(detector, full_data, weak_data, config, rng=None, val_data=(), lobe=None):
    """Train ``detector`` in place; returns an :class:`EmReport`.

    The detector is first fit on ``full_data`` (``config.init_rounds`` updates).
    Each epoch then runs the E-step on a random ``weak_fraction`` of the weak
    scans, updates on the pseudo-labelled batch, and finishes with a fully
    supervised update. Weak labels without any consistent proposal are
    skipped and counted.
    """
    rng = as_generator(rng)
    subset_rng = SplitMix64(rng.next_u64())
    sample_rng = SplitMix64(rng.next_u64())
    full_data = list(full_data)
    weak_data = list(weak_data)
    hg = HalfGaussianModel(config.sigma, config.mu)
    if lobe is None:
        lobe = fit_lobe_regression([(g, s.volume.shape, derive_weak_label(g, s.volume.shape).loc) for s in full_data for g in s.gts])
    if detector.params is None:
        detector.fit_scaler(full_data)
    full_items = [_full_item(detector, s) for s in full_data]
    # hard negatives are re-mined each round as the scorer sharpens
    for _ in range(config.init_rounds):
        detector.update(full_items)
    n_sub = max(1, int(round(config.weak_fraction * len(weak_data)))) if weak_data else 0
    report = EmReport(config.mode, [])
    if val_data:
        report.initial_froc = evaluate_froc(detector, val_data)
    for epoch in range(1, config.epochs + 1):
        q_obj = None
        n_pseudo = skipped = 0
        if weak_data:
            picked = subset_rng.permutation(len(weak_data))[:n_sub]
            items = []
            for i in picked:
                ws = weak_data[int(i)]
                item, n_box, n_skip = _e_step(detector, ws, config, hg, lobe, sample_rng)
                items.append(item)
                n_pseudo += n_box
                skipped += n_skip
            trace = detector.update(items)
            q_obj = -trace[-1] if trace else None
        detector.update(full_items)
        froc_val = evaluate_froc(detector, val_data) if val_data else float("nan")
        report.epochs.append(EpochRecord(epoch, q_obj, froc_val, n_pseudo, skipped))
        report.skipped_total += skipped
    return report


def _e_step(detector, ws, config, hg, lobe, rng):
    scan = ws.scan
    ext = scan.volume.shape
    boxes, logits = detector.propose(scan)
    keep = filter_proposals(boxes, logits, config.logit_thr, config.nms_iou)
    priors = sigmoid(logits[keep])
    pos, wts = [], []
    skipped = 0
    for lab in ws.labels:
        try:
            post = weak_posterior(boxes[keep], priors, lab, ext, hg, lobe)
        except InconsistentWeakLabel:
            skipped += 1
            continue
        if config.mode == MAP:
            pos.append(post.proposals[map_index(post)])
            wts.append(1.0)
        else:
            for j in sample_indices(post, config.m_hat, rng):
                pos.append(post.proposals[j])
                wts.append(1.0 / config.m_hat)
    ok = np.ones(boxes.shape[0], dtype=bool)
    for lab in ws.labels:
        ok &= np.abs(boxes[:, 2] - lab.z) > config.exclusion
    positives = np.asarray(pos, dtype=np.float64).reshape(-1, 4)
    return TrainItem(scan, positives, np.asarray(wts), ok), len(pos), skipped


# ---------------------------------------------------------------------------
# synthetic experiment
# ---------------------------------------------------------------------------


@dataclass
class ExperimentData:
    full: list
    weak: list
    val: list


def make_experiment_data(scenario, seed, n_full=20, n_weak=200, n_val=40):
    rng = SplitMix64(seed)
    full = gen_scans(scenario, n_full, SplitMix64(rng.next_u64()), 0)
    weak = gen_scans(scenario, n_weak, SplitMix64(rng.next_u64()), n_full)
    val = gen_scans(scenario, n_val, SplitMix64(rng.next_u64()), n_full + n_weak)
    return ExperimentData(full, [weak_from_scan(s) for s in weak], val)


def run_arm(data, scenario, mode, seed, epochs=32, use_weak=True, detector_factory=LogisticBlobDetector, **overrides):
    config = EmConfig(mode=mode, epochs=epochs, sigma=max(scenario.radius_std, 1e-3), **overrides)
    det = detector_factory()
    report = em_train(det, data.full, data.weak if use_weak else [], config, SplitMix64(seed), data.val)
    return det, report


def lift_study(scenario, seeds, epochs=32, modes=MODES, n_full=20, n_weak=200, n_val=40):
    """Baseline and EM validation FROC per seed; data are generated once per seed and shared by all arms."""
    rows = []
    for seed in seeds:
        data = make_experiment_data(scenario, seed, n_full, n_weak, n_val)
        row = {"seed": int(seed)}
        _, base = run_arm(data, scenario, MAP, seed, epochs, use_weak=False)
        row["baseline"] = base.final_froc
        for mode in modes:
            _, rep = run_arm(data, scenario, mode, seed, epochs)
            row[mode] = rep.final_froc
        rows.append(row)
    return rows
