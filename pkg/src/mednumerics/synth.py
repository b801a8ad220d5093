"""Synthetic CT-like volumes with planted spherical nodules, weak labels and blob features.

Volumes are indexed ``[x, y, z]``. Every random draw goes through
:class:`mednumerics.rng.SplitMix64`, so a (scenario, seed) pair pins the
output bit for bit.
"""

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels as _k
from .rng import SplitMix64, as_generator

HU_MIN, HU_MAX = -1200.0, 600.0
MAX_PLACEMENT_TRIES = 1000
N_LOBES = 6
FEATURE_NAMES = ("mean", "max", "var", "contrast", "x_rel", "y_rel", "z_rel")


@dataclass
class Scenario:
    """Generation parameters.

    Counts are inclusive ``(min, max)`` ranges and radii are ``(min, max)``
    in voxels. Distractors are elongated vessel-like tubes that mimic a
    nodule in cross-section; they are never ground truth.
    """

    seed: int = 0
    extents: tuple = (64, 64, 64)
    nodule_count: tuple = (1, 2)
    radius: tuple = (2.5, 5.0)
    noise: float = 0.3
    peak: float = 1.0
    distractor_count: tuple = (0, 0)
    distractor_radius: tuple = (1.5, 3.0)
    distractor_peak: tuple = (0.6, 1.0)
    distractor_length: tuple = (6.0, 16.0)
    lobe_partition: tuple = (2, 3)

    def __post_init__(self):
        self.extents = tuple(int(e) for e in self.extents)
        for name in ("nodule_count", "radius", "distractor_count", "distractor_radius", "distractor_peak", "distractor_length", "lobe_partition"):
            setattr(self, name, tuple(getattr(self, name)))
        if len(self.extents) != 3 or min(self.extents) < 16:
            raise ValueError("extents must be three axes of at least 16 voxels")
        lo, hi = self.nodule_count
        if lo < 0 or hi < lo:
            raise ValueError("bad nodule count range")
        lo, hi = self.distractor_count
        if lo < 0 or hi < lo:
            raise ValueError("bad distractor count range")
        if self.radius[0] < 1 or self.radius[1] < self.radius[0]:
            raise ValueError("radii must satisfy 1 <= min <= max")
        if 2 * self.radius[1] + 2 > min(self.extents):
            raise ValueError("largest nodule does not fit in the volume")
        if self.noise < 0:
            raise ValueError("noise level must be non-negative")
        if self.lobe_partition != (2, 3):
            raise ValueError("only the 2 x 3 (x-halves by z-thirds) partition is supported")

    @property
    def radius_std(self):
        """Standard deviation of the uniform radius distribution."""
        return (self.radius[1] - self.radius[0]) / math.sqrt(12.0)

    def to_doc(self):
        return asdict(self)

    @classmethod
    def from_doc(cls, doc):
        if not isinstance(doc, dict):
            raise ValueError("scenario must be a JSON object")
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown scenario fields: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_doc(json.load(fh))


def reference_scenario(seed=0):
    """The scenario used by the weak-supervision experiment."""
    return Scenario(
        seed=seed,
        extents=(64, 64, 64),
        nodule_count=(1, 2),
        radius=(2.5, 5.0),
        noise=0.3,
        distractor_count=(4, 8),
    )


def normalize_ct(raw):
    """Clip Hounsfield units to [-1200, 600] and map linearly onto [0, 1]."""
    x = np.clip(np.asarray(raw, dtype=np.float64), HU_MIN, HU_MAX)
    return (x - HU_MIN) / (HU_MAX - HU_MIN)


def _taper(r, radius):
    return np.where(r < radius, 0.5 * (1.0 + np.cos(np.pi * np.minimum(r, radius) / radius)), 0.0)


def _local_grid(shape, centre, reach):
    lo = [max(int(math.floor(c - reach)), 0) for c in centre]
    hi = [min(int(math.ceil(c + reach)) + 1, s) for c, s in zip(centre, shape)]
    sl = tuple(slice(a, b) for a, b in zip(lo, hi))
    axes = [np.arange(a, b, dtype=np.float64) - c for a, b, c in zip(lo, hi, centre)]
    return sl, axes


def add_sphere(vol, centre, radius, peak):
    sl, (ax, ay, az) = _local_grid(vol.shape, centre, radius)
    r = np.sqrt(ax[:, None, None] ** 2 + ay[None, :, None] ** 2 + az[None, None, :] ** 2)
    vol[sl] += peak * _taper(r, radius)


def add_tube(vol, centre, axis, radius, length, peak):
    """Cylinder along ``axis`` with a cosine cross-section, constant along its length."""
    reach = [radius] * 3
    reach[axis] = length / 2.0
    lo = [max(int(math.floor(c - r)), 0) for c, r in zip(centre, reach)]
    hi = [min(int(math.ceil(c + r)) + 1, s) for c, r, s in zip(centre, reach, vol.shape)]
    sl = tuple(slice(a, b) for a, b in zip(lo, hi))
    axes = [np.arange(a, b, dtype=np.float64) - c for a, b, c in zip(lo, hi, centre)]
    grids = np.meshgrid(*axes, indexing="ij")
    across = [g for k, g in enumerate(grids) if k != axis]
    r = np.sqrt(across[0] ** 2 + across[1] ** 2)
    inside = np.abs(grids[axis]) <= length / 2.0
    vol[sl] += peak * _taper(r, radius) * inside


def gen_volume(scenario, rng=None):
    """Noise volume with planted nodules; returns ``(volume, gts)`` with ``gts`` rows ``(x, y, z, d)``."""
    rng = as_generator(scenario.seed if rng is None else rng)
    shape = scenario.extents
    vol = scenario.noise * rng.normal(size=shape) if scenario.noise > 0 else np.zeros(shape)
    lo, hi = scenario.nodule_count
    count = rng.integers(lo, hi + 1)
    placed = []
    for _ in range(count):
        radius = rng.uniform(*scenario.radius)
        margin = int(math.ceil(radius))
        for _try in range(MAX_PLACEMENT_TRIES):
            c = tuple(float(rng.integers(margin, s - margin)) for s in shape)
            if all(math.dist(c, p[:3]) > radius + p[3] / 2.0 for p in placed):
                break
        else:
            raise RuntimeError(f"could not place a nodule without overlap after {MAX_PLACEMENT_TRIES} tries")
        placed.append((*c, 2.0 * radius))
    lo, hi = scenario.distractor_count
    for _ in range(rng.integers(lo, hi + 1)):
        radius = rng.uniform(*scenario.distractor_radius)
        length = rng.uniform(*scenario.distractor_length)
        peak = rng.uniform(*scenario.distractor_peak)
        axis = rng.integers(0, 3)
        c = [rng.uniform(0, s - 1) for s in shape]
        # vessels may cross each other but stay clear of nodules
        clear = all(math.dist(c, p[:3]) > p[3] / 2.0 + radius + length / 2.0 for p in placed)
        if clear:
            add_tube(vol, c, axis, radius, length, peak)
    for x, y, z, d in placed:
        add_sphere(vol, (x, y, z), d / 2.0, scenario.peak)
    gts = np.asarray(placed, dtype=np.float64).reshape(-1, 4)
    return vol, gts


@dataclass(frozen=True)
class WeakLabel:
    """Lobe location (1-6) and central slice of one nodule."""

    loc: int
    z: int

    def __post_init__(self):
        if not 1 <= int(self.loc) <= N_LOBES:
            raise ValueError(f"loc must lie in 1..{N_LOBES}, got {self.loc}")


def lobe_index(x, z, extents):
    """1-based region id: x-half (1-3 below the midline, 4-6 above) by z-third."""
    ex, _, ez = extents
    if not (0 <= x < ex and 0 <= z < ez):
        raise ValueError(f"centre ({x}, {z}) lies outside all lobe regions")
    side = 1 if x >= ex / 2.0 else 0
    band = min(int(3.0 * z / ez), 2)
    return 1 + 3 * side + band


def derive_weak_label(gt, extents):
    """(loc, z) with z the nearest slice to the centre (halves round up)."""
    x, y, z, _d = (float(v) for v in np.asarray(gt).reshape(4))
    if not 0 <= y < extents[1]:
        raise ValueError(f"centre y={y} outside the volume")
    return WeakLabel(lobe_index(x, z, extents), int(math.floor(z + 0.5)))


def blob_features(volume, box):
    """[mean, max, variance, contrast vs the 2x shell, x/X, y/Y, z/Z] for one box."""
    vol = np.asarray(volume, dtype=np.float64)
    b = np.asarray(box, dtype=np.float64).reshape(4)
    if np.any(b[:3] < 0) or np.any(b[:3] > np.asarray(vol.shape) - 1) or b[3] <= 0:
        raise ValueError(f"box {tuple(b)} is outside the volume")
    return blob_features_batch(vol, b[None, :])[0]


def blob_features_batch(volume, boxes):
    vol = np.asarray(volume, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    st = _k.box_stats(vol, boxes)
    count, total, sq, mx, shell_n, shell_sum = st.T
    if np.any(count == 0):
        raise ValueError("box covers no voxels")
    mean = total / count
    var = np.maximum(sq / count - mean * mean, 0.0)
    shell_mean = np.divide(shell_sum, shell_n, out=mean.copy(), where=shell_n > 0)
    out = np.empty((boxes.shape[0], len(FEATURE_NAMES)))
    out[:, 0] = mean
    out[:, 1] = mx
    out[:, 2] = var
    out[:, 3] = mean - shell_mean
    out[:, 4:7] = boxes[:, :3] / np.asarray(vol.shape, dtype=np.float64)
    return out


@dataclass
class Scan:
    volume: np.ndarray
    gts: np.ndarray
    scan_id: int = 0
    cache: dict = field(default_factory=dict, repr=False, compare=False)


def gen_scans(scenario, n, rng=None, start_id=0):
    """``n`` independent scans, each drawn from its own child stream."""
    rng = as_generator(scenario.seed if rng is None else rng)
    out = []
    for k in range(n):
        child = SplitMix64(rng.next_u64())
        vol, gts = gen_volume(scenario, child)
        out.append(Scan(vol, gts, start_id + k))
    return out
