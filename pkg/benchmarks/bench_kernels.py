"""Time the numba and numpy variants of each hot kernel on the same inputs.

    python3 benchmarks/bench_kernels.py --repeat 5 --seed 0

The first numba call per kernel is a warm-up (JIT compile or cache load) and is
excluded. Outputs are compared before timing so a speedup never hides a
disagreement.
"""

import argparse
import json
import sys
import timeit
from dataclasses import asdict, dataclass

import numpy as np

from mednumerics import kernels
from mednumerics._accel import HAVE_NUMBA


@dataclass
class Row:
    kernel: str
    size: str
    numpy_ms: float
    numba_ms: float
    speedup: float
    max_abs_diff: float


def _cases(rng, scale):
    n_pix = int(1600 * scale)
    feats = rng.random((n_pix, 3))
    n_box = int(400 * scale)
    boxes = np.column_stack([rng.uniform(0, 64, size=(n_box, 3)), rng.uniform(3, 12, size=n_box)])
    order = np.argsort(-rng.random(n_box), kind="stable")
    vol = rng.normal(size=(64, 64, 64))
    stat_boxes = boxes[: max(n_box // 4, 1)]
    pts_a = rng.random((int(3000 * scale), 3)) * 50
    pts_b = rng.random((int(3000 * scale), 3)) * 50
    return [
        ("pairwise_gaussian", f"{n_pix} px", (feats, 0.5)),
        ("iou_matrix", f"{n_box}x{n_box}", (boxes, boxes)),
        ("greedy_nms", f"{n_box} boxes", (boxes, order, 0.1)),
        ("box_stats", f"{len(stat_boxes)} boxes / 64^3", (vol, stat_boxes)),
        ("min_sq_dist", f"{len(pts_a)}x{len(pts_b)} pts", (pts_a, pts_b)),
    ]


def _best_ms(fn, args, repeat):
    return 1e3 * min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def run(repeat=5, seed=0, scale=1.0):
    if not HAVE_NUMBA:
        raise RuntimeError("numba is not installed; nothing to compare")
    rng = np.random.default_rng(seed)
    rows = []
    for name, size, args in _cases(rng, scale):
        f_np = getattr(kernels, f"{name}_numpy")
        f_nb = getattr(kernels, f"{name}_numba")
        ref, got = np.asarray(f_np(*args)), np.asarray(f_nb(*args))  # also warms up numba
        diff = float(np.max(np.abs(ref - got))) if ref.size else 0.0
        if ref.shape != got.shape or not np.allclose(ref, got, rtol=1e-12, atol=1e-12):
            raise AssertionError(f"{name}: backends disagree (max diff {diff:.3g})")
        t_np = _best_ms(f_np, args, repeat)
        t_nb = _best_ms(f_nb, args, repeat)
        rows.append(Row(name, size, t_np, t_nb, t_np / t_nb, diff))
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5, help="timing repeats, best is reported")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--scale", type=float, default=1.0, help="multiplier on problem sizes")
    ap.add_argument("--json", action="store_true", help="print rows as JSON instead of a table")
    args = ap.parse_args(argv)
    rows = run(args.repeat, args.seed, args.scale)
    if args.json:
        print(json.dumps([asdict(r) for r in rows], indent=2))
        return 0
    print(f"{'kernel':<18} {'size':<22} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for r in rows:
        print(f"{r.kernel:<18} {r.size:<22} {r.numpy_ms:>10.2f} {r.numba_ms:>10.2f} {r.speedup:>7.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
