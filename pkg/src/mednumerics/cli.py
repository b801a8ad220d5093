"""Command-line entry point: ``mednumerics <subcommand> [flags]``.

Every command prints (or writes with ``--out``) a JSON run report::

    {"schema_version", "command", "parameters", "seed", "results",
     "assertions", "passed"}

Reports carry no timings or paths, so a rerun with the same arguments is
byte-identical. The exit status is 0 iff every assertion passed.
"""

import argparse
import json
import logging
import math
import sys

import numpy as np

from . import crf, deepem, detection, gradsuite, metrics, mil, synth
from .rng import SplitMix64
from .tensor import grad_check, load_tjson, save_tjson, sigmoid, softmax

SCHEMA_VERSION = 1


class Report:
    def __init__(self, command, parameters, seed, tolerance):
        self.command = command
        self.parameters = parameters
        self.seed = seed
        self.tolerance = tolerance
        self.results = {}
        self.assertions = []

    def check(self, name, value, expected, tolerance=None, op="within"):
        """Record an assertion. ``op`` is ``within`` (|v - e| <= tol), ``at_least`` (v >= e - tol) or ``below`` (v < e + tol)."""
        tol = self.tolerance if tolerance is None else tolerance
        value = float(value)
        if op == "within":
            ok = abs(value - expected) <= tol
        elif op == "at_least":
            ok = value >= expected - tol
        elif op == "below":
            ok = value < expected + tol
        else:
            raise ValueError(op)
        self.assertions.append(
            {"name": name, "op": op, "value": _clean(value), "expected": _clean(expected), "tolerance": tol, "passed": bool(ok and math.isfinite(value))}
        )

    @property
    def passed(self):
        return all(a["passed"] for a in self.assertions)

    def as_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "command": self.command,
            "parameters": _clean(self.parameters),
            "seed": self.seed,
            "results": _clean(self.results),
            "assertions": self.assertions,
            "passed": self.passed,
        }

    def dumps(self):
        return json.dumps(self.as_dict(), indent=2, sort_keys=True) + "\n"


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    return obj


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------


def cmd_gradcheck(args, rep):
    results = gradsuite.run_suite(args.module, args.trials, args.seed, args.corrupt)
    for r in results:
        rep.results[r.name] = {"module": r.module, "trials": r.trials, "max_rel_err": r.max_rel_err, "max_abs_err": r.max_abs_err}
        rep.check(f"{r.name}.max_rel_err", r.max_rel_err, rep.tolerance, 0.0, op="below")


# ---------------------------------------------------------------------------
# crf
# ---------------------------------------------------------------------------


# the dense appearance kernel sums over all N pixels, so the demo scales the
# pairwise weights down to keep them commensurate with the unaries
DEMO_CRF_WEIGHTS = (0.01, 0.01)
DEMO_CRF_BANDWIDTHS = (0.3, 2.0)


def demo_crf_instance(seed, size=40):
    """A bright disc on a dark background with noisy, partly wrong unaries."""
    rng = SplitMix64(seed)
    pos = crf.grid_positions((size, size))
    c = (size - 1) / 2.0
    inside = (np.sum((pos - c) ** 2, axis=1) <= (size / 4.0) ** 2).reshape(size, size)
    image = inside + 0.3 * rng.normal(size=(size, size))
    p_fg = np.clip(0.5 + 0.35 * (2.0 * inside - 1.0) + 0.25 * rng.normal(size=(size, size)), 0.02, 0.98)
    probs = np.stack([1.0 - p_fg, p_fg])
    return crf.unary_from_probs(probs), image, inside


def cmd_crf(args, rep):
    truth = None
    if args.demo:
        psi, image, truth = demo_crf_instance(args.seed)
    else:
        if not (args.unary and args.image):
            raise ValueError("crf needs --unary and --image (or --demo)")
        psi, image = load_tjson(args.unary), load_tjson(args.image)
    if psi.shape[1:] != image.shape:
        raise ValueError(f"unary {psi.shape} does not match image {image.shape}")
    n_labels = psi.shape[0]
    defaults = crf.CrfParams()
    weights = args.weights or (DEMO_CRF_WEIGHTS if args.demo else defaults.kernel_weights)
    bandwidths = args.bandwidths or (DEMO_CRF_BANDWIDTHS if args.demo else (defaults.appearance_bandwidth, defaults.spatial_bandwidth))
    params = crf.CrfParams(
        kernel_weights=tuple(weights),
        compatibility=crf.potts(n_labels),
        appearance_bandwidth=bandwidths[0],
        spatial_bandwidth=bandwidths[1],
    )
    rep.results["kernel_weights"] = list(params.kernel_weights)
    rep.results["bandwidths"] = [params.appearance_bandwidth, params.spatial_bandwidth]
    flat_psi = psi.reshape(n_labels, -1)
    kern = crf.gaussian_kernels(image.reshape(-1), crf.grid_positions(image.shape), params)
    residuals, min_q = [], []
    q = None
    for q in crf.meanfield_iterates(flat_psi, kern, params, args.iterations, args.mode):
        residuals.append(float(np.max(np.abs(q.sum(axis=0) - 1.0))))
        min_q.append(float(q.min()))
    seg = q.reshape(psi.shape)
    rep.results["simplex_residuals"] = residuals
    rep.results["min_q"] = min(min_q)
    rep.results["foreground_pixels"] = int(np.count_nonzero(np.argmax(seg, axis=0) == n_labels - 1))
    rep.check("max_simplex_residual", max(residuals), 0.0)
    rep.check("min_q_nonnegative", min(min_q), 0.0, 0.0, op="at_least")
    if truth is not None:
        rep.results["unary_accuracy"] = float(np.mean(np.argmin(psi, axis=0) == truth))
        rep.results["crf_accuracy"] = float(np.mean(np.argmax(seg, axis=0) == truth))
    if all(w == 0.0 for w in params.kernel_weights):
        # without pairwise terms one update lands on the unary-only fixed point
        logits = -flat_psi if args.mode == crf.STANDARD else np.exp(-flat_psi)
        diff = float(np.max(np.abs(q - softmax(logits, axis=0))))
        rep.results["zero_kernel_deviation"] = diff
        rep.check("zero_kernel_equals_unary_softmax", diff, 0.0)
    if args.seg_out:
        save_tjson(args.seg_out, seg)


# ---------------------------------------------------------------------------
# mil
# ---------------------------------------------------------------------------


def cmd_mil(args, rep):
    if args.scores:
        r = load_tjson(args.scores)
    else:
        r = 0.05 + 0.9 * SplitMix64(args.seed).random(args.patches)
    scheme = args.scheme
    if scheme == "max" and (args.k is not None or args.mu is not None):
        raise ValueError("max-pooling takes neither --k nor --mu")
    if scheme == "assign" and (args.k is None and not args.k_grid or args.mu is not None):
        raise ValueError("label assignment needs --k (or --k-grid) and no --mu")
    if scheme == "sparse" and (args.mu is None or args.k is not None):
        raise ValueError("sparse MIL needs --mu and no --k")
    if scheme == "max":
        fn = lambda x: mil.max_pool_mil_loss(x, args.label)  # noqa: E731
    elif scheme == "sparse":
        fn = lambda x: mil.sparse_mil_loss(x, args.label, args.mu)  # noqa: E731
    else:
        fn = (lambda x: mil.label_assign_mil_loss(x, args.label, args.k)) if args.k is not None else None  # noqa: E731
    if fn is not None:
        out = fn(r)
        rep.results["value"] = out.value
        rep.results["grad"] = out.grad
        gc = grad_check(lambda x: fn(x).value, out.grad, r)
        rep.results["grad_max_rel_err"] = gc.max_rel_err
        rep.check("grad_max_rel_err", gc.max_rel_err, 1e-4, 0.0, op="below")
    if args.k_grid:
        grid = mil.label_assign_k_grid(r, args.label)
        rep.results["k_grid"] = {str(k): v for k, v in grid.items()}
        rep.results["k_best"] = min(grid, key=lambda k: (grid[k], k))
    if args.expect is not None:
        rep.check("value", rep.results["value"], args.expect)


# ---------------------------------------------------------------------------
# detect-sim
# ---------------------------------------------------------------------------


def _load_scenario(path, seed):
    if path:
        return synth.Scenario.load(path)
    return synth.reference_scenario(seed)


def _dets(boxes, logits, keep):
    if keep.size == 0:
        return np.zeros((0, 5))
    return np.column_stack([boxes[keep], sigmoid(logits[keep])])


def detect_sim(scenario, seed, n_train=20, n_test=20):
    rng = SplitMix64(seed)
    train = synth.gen_scans(scenario, n_train, SplitMix64(rng.next_u64()))
    test = synth.gen_scans(scenario, n_test, SplitMix64(rng.next_u64()), n_train)
    score_rng = SplitMix64(rng.next_u64())
    oracle, random_, learned = [], [], []
    det = deepem.LogisticBlobDetector()
    deepem.em_train(det, train, [], deepem.EmConfig(epochs=0, sigma=max(scenario.radius_std, 1e-3)), SplitMix64(seed))
    for scan in test:
        oracle.append((np.column_stack([scan.gts, np.ones(len(scan.gts))]), scan.gts))
        boxes, logits = det.propose(scan)
        keep = detection.filter_detections(boxes, logits)
        learned.append((_dets(boxes, logits, keep), scan.gts))
        rand_logits = score_rng.normal(size=boxes.shape[0]) * 2.0
        keep = detection.filter_detections(boxes, rand_logits)
        random_.append((_dets(boxes, rand_logits, keep), scan.gts))
    return {name: detection.froc(s) for name, s in (("oracle", oracle), ("random", random_), ("learned", learned))}


def cmd_detect_sim(args, rep):
    scenario = _load_scenario(args.scenario, args.seed)
    res = detect_sim(scenario, args.seed, args.train_scans, args.test_scans)
    rep.results["scenario"] = scenario.to_doc()
    for name, fr in res.items():
        rep.results[name] = fr.as_dict()
    rep.check("oracle_froc", res["oracle"].froc, 1.0)
    rep.check("random_froc_below", res["random"].froc, 0.2, 0.0, op="below")
    rep.check("learned_beats_random", res["learned"].froc - res["random"].froc, 0.0, 0.0, op="at_least")


# ---------------------------------------------------------------------------
# deepem
# ---------------------------------------------------------------------------


def cmd_deepem(args, rep):
    scenario = _load_scenario(args.scenario, args.seed)
    modes = deepem.MODES if args.mode == "both" else (args.mode,)
    rep.results["scenario"] = scenario.to_doc()
    if args.seeds > 1:
        seeds = [args.seed + k for k in range(args.seeds)]
        rows = deepem.lift_study(scenario, seeds, args.epochs, modes, args.full_scans, args.weak_scans, args.val_scans)
        rep.results["per_seed"] = rows
        for mode in modes:
            lift = float(np.median([r[mode] - r["baseline"] for r in rows]))
            rep.results[f"median_lift_{mode}"] = lift
            rep.check(f"median_lift_{mode}", lift, args.min_lift, 0.0, op="at_least")
        if len(modes) == 2:
            wins = sum(r[deepem.SAMPLING] >= r[deepem.MAP] - deepem.FROC_TIE_TOL for r in rows)
            rep.results["sampling_ge_map_seeds"] = wins
            rep.check("sampling_ge_map_seeds", wins, math.ceil(0.6 * len(rows)), 0.0, op="at_least")
        return
    data = deepem.make_experiment_data(scenario, args.seed, args.full_scans, args.weak_scans, args.val_scans)
    _, base = deepem.run_arm(data, scenario, deepem.MAP, args.seed, args.epochs, use_weak=False)
    rep.results["baseline"] = base.as_dict()
    rep.check("baseline_froc_in_unit_interval", base.final_froc, 0.5, 0.5)
    if args.epochs == 0:
        # nothing to alternate: the run is the supervised baseline alone
        return
    for mode in modes:
        _, em = deepem.run_arm(data, scenario, mode, args.seed, args.epochs)
        rep.results[mode] = em.as_dict()
        rep.results[f"lift_{mode}"] = em.final_froc - base.final_froc
        for e in em.epochs:
            rep.check(f"{mode}.epoch{e.epoch}.froc_in_unit_interval", e.froc_val, 0.5, 0.5)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

METRICS = ("dice", "trimap", "hd95", "kappa")


def _parse_expect(items):
    out = {}
    for item in items or ():
        name, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"--expect wants NAME=VALUE, got {item!r}")
        out[name] = float(value)
    return out


def cmd_metrics(args, rep):
    pred, gt = load_tjson(args.pred), load_tjson(args.gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    which = METRICS if args.which == "all" else tuple(w.strip() for w in args.which.split(","))
    unknown = set(which) - set(METRICS)
    if unknown:
        raise ValueError(f"unknown metrics: {sorted(unknown)}")
    if "dice" in which:
        rep.results["dice"] = metrics.dice_coefficient(pred, gt)
    if "trimap" in which:
        rep.results["trimap"] = metrics.trimap_accuracy(pred, gt, args.width, args.band_metric)
    if "hd95" in which:
        rep.results["hd95"] = metrics.hausdorff95(pred, gt, args.spacing)
    if "kappa" in which:
        rep.results["kappa"] = metrics.cohen_kappa(pred, gt)
    for name, value in _parse_expect(args.expect).items():
        if name not in rep.results:
            raise ValueError(f"--expect names an uncomputed metric {name!r}")
        rep.check(name, rep.results[name], value)


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

COMMANDS = {
    "gradcheck": (cmd_gradcheck, 1e-4),
    "crf": (cmd_crf, 1e-12),
    "mil": (cmd_mil, 1e-12),
    "detect-sim": (cmd_detect_sim, 1e-12),
    "deepem": (cmd_deepem, 1e-12),
    "metrics": (cmd_metrics, 1e-9),
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="seed for every random draw (required when the command draws random numbers)")
    common.add_argument("--out", help="write the JSON report here instead of stdout")
    common.add_argument("--tolerance", type=float, help="override the command's default assertion tolerance")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mednumerics", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gradcheck", parents=[common], help="analytic vs central-difference gradients")
    p.add_argument("--module", default="all", help=f"one of: all, {', '.join(gradsuite.MODULES)}")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--corrupt", action="store_true", help="perturb analytic gradients (negative control)")

    p = sub.add_parser("crf", parents=[common], help="mean-field inference on a dense CRF")
    p.add_argument("--unary", help="tjson [L, H, W] unary potentials")
    p.add_argument("--image", help="tjson [H, W] intensities")
    p.add_argument("--demo", action="store_true", help="use a generated 40x40 instance")
    p.add_argument("--mode", choices=crf.MODES, default=crf.STANDARD)
    p.add_argument("--iterations", type=int, default=10)
    p.add_argument("--weights", type=float, nargs=2, metavar=("W_APP", "W_SP"), help="kernel weights (default 1 1; 0.01 0.01 with --demo)")
    p.add_argument("--bandwidths", type=float, nargs=2, metavar=("SIGMA_APP", "SIGMA_SP"), help="kernel bandwidths (default 1 1; 0.3 2 with --demo)")
    p.add_argument("--seg-out", help="write the final label field as tjson")

    p = sub.add_parser("mil", parents=[common], help="MIL bag losses and gradients")
    p.add_argument("--scores", help="tjson patch probabilities (default: random)")
    p.add_argument("--patches", type=int, default=16, help="number of random patches without --scores")
    p.add_argument("--label", type=int, choices=(0, 1), required=True)
    p.add_argument("--scheme", choices=("max", "assign", "sparse"), required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--mu", type=float)
    p.add_argument("--k-grid", action="store_true", help=f"also evaluate k in {mil.K_GRID}")
    p.add_argument("--expect", type=float, help="assert the loss value")

    p = sub.add_parser("detect-sim", parents=[common], help="synthetic detection and FROC")
    p.add_argument("--scenario", help="scenario JSON (default: reference scenario)")
    p.add_argument("--train-scans", type=int, default=20)
    p.add_argument("--test-scans", type=int, default=20)

    p = sub.add_parser("deepem", parents=[common], help="weakly supervised EM vs supervised baseline")
    p.add_argument("--scenario", help="scenario JSON (default: reference scenario)")
    p.add_argument("--mode", choices=(*deepem.MODES, "both"), default="both")
    p.add_argument("--epochs", type=int, default=32)
    p.add_argument("--seeds", type=int, default=1, help="run a study over this many consecutive seeds")
    p.add_argument("--min-lift", type=float, default=0.02)
    p.add_argument("--full-scans", type=int, default=20)
    p.add_argument("--weak-scans", type=int, default=200)
    p.add_argument("--val-scans", type=int, default=40)

    p = sub.add_parser("metrics", parents=[common], help="mask metrics")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--which", default="all", help=f"comma list from {', '.join(METRICS)} or 'all'")
    p.add_argument("--width", type=int, default=1, help="trimap band width")
    p.add_argument("--band-metric", choices=("chebyshev", "euclidean"), default="chebyshev")
    p.add_argument("--spacing", type=float, nargs="+", help="voxel spacing per axis (mm)")
    p.add_argument("--expect", action="append", metavar="NAME=VALUE")
    return parser


def _needs_seed(args):
    if args.command in ("gradcheck", "detect-sim", "deepem"):
        return True
    if args.command == "crf":
        return args.demo
    if args.command == "mil":
        return not args.scores
    return False


def _parameters(args):
    skip = {"command", "out", "seed", "tolerance", "verbose"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def run(argv=None):
    """Parse ``argv`` and run; returns ``(report, exit_code)``."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.seed is None and _needs_seed(args):
        raise ValueError(f"{args.command} draws random numbers and needs --seed")
    fn, default_tol = COMMANDS[args.command]
    tol = default_tol if args.tolerance is None else args.tolerance
    rep = Report(args.command, _parameters(args), args.seed, tol)
    fn(args, rep)
    text = rep.dumps()
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return rep, 0 if rep.passed else 1


def main(argv=None):
    try:
        _, code = run(argv)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"mednumerics: error: {exc}", file=sys.stderr)
        return 2
    return code


if __name__ == "__main__":
    sys.exit(main())
