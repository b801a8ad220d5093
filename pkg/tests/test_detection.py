import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mednumerics import detection as det
from mednumerics.tensor import grad_check


def _voxel_iou(a, b):
    """Count unit voxels of integer-aligned cubes."""
    def cells(box):
        x, y, z, d = box
        lo = [int(round(c - d / 2)) for c in (x, y, z)]
        return {(i, j, k) for i in range(lo[0], lo[0] + int(d)) for j in range(lo[1], lo[1] + int(d)) for k in range(lo[2], lo[2] + int(d))}

    ca, cb = cells(a), cells(b)
    return len(ca & cb) / len(ca | cb)


def _random_boxes(rng, n, span=12.0):
    b = np.empty((n, 4))
    b[:, :3] = rng.uniform(0, span, size=(n, 3))
    b[:, 3] = rng.uniform(1, 6, size=n)
    return b


def _exhaustive_nms(boxes, scores, thr):
    """Reference: the kept set is the unique subset S where each box is kept
    iff no higher-ranked kept box overlaps it; search all subsets."""
    n = len(scores)
    order = sorted(range(n), key=lambda i: (-scores[i], i))
    rank = {i: r for r, i in enumerate(order)}
    iou = det.iou_matrix(boxes, boxes)
    for size in range(n + 1):
        for subset in itertools.combinations(range(n), size):
            s = set(subset)
            ok = True
            for i in range(n):
                blocked = any(j in s and rank[j] < rank[i] and iou[i, j] >= thr for j in range(n))
                if (i in s) == blocked:
                    ok = False
                    break
            if ok:
                return sorted(s, key=lambda i: rank[i])
    raise AssertionError("no consistent subset")


def test_iou_examples():
    a = (0.0, 0.0, 0.0, 2.0)
    assert det.iou3(a, a) == 1.0
    assert det.iou3(a, (10.0, 0.0, 0.0, 2.0)) == 0.0
    b = (1.0, 0.0, 0.0, 2.0)
    assert det.iou3(a, b) == pytest.approx(4 / 12, abs=1e-15)
    assert _voxel_iou(a, b) == pytest.approx(det.iou3(a, b), abs=1e-15)


def test_iou_matches_voxel_oracle(rng):
    for _ in range(50):
        a = (*rng.integers(0, 6, size=3).astype(float), float(2 * rng.integers(1, 4)))
        b = (*rng.integers(0, 6, size=3).astype(float), float(2 * rng.integers(1, 4)))
        assert det.iou3(a, b) == pytest.approx(_voxel_iou(a, b), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 10.0))
def test_iou_symmetry_and_scale_invariance(seed, c):
    rng = np.random.default_rng(seed)
    a, b = _random_boxes(rng, 2)
    v = det.iou3(a, b)
    assert det.iou3(b, a) == v
    assert det.iou3(a, a) == 1.0
    assert abs(det.iou3(c * a, c * b) - v) <= 1e-12
    assert 0.0 <= v <= 1.0


def test_gen_anchors():
    a = det.gen_anchors((1, 1, 1), 4)
    assert a.shape == (3, 4)
    assert np.all(a[:, :3] == 2.0)
    assert a[:, 3].tolist() == [5.0, 10.0, 20.0]
    assert det.gen_anchors((2, 2, 2), 4).shape[0] == 24
    a = det.gen_anchors((2, 1, 1), 4)
    assert a[3, 0] == 6.0 and a[3, 1] == 2.0
    with pytest.raises(ValueError):
        det.gen_anchors((1, 1, 1), 0)


def test_encode_examples():
    a = np.array([4.0, 5.0, 6.0, 10.0])
    np.testing.assert_array_equal(det.encode_target(a, a), [0, 0, 0, 0])
    t = det.encode_target([4.0, 5.0, 6.0, 20.0], a)
    np.testing.assert_allclose(t, [0, 0, 0, 0.6931471805599453], atol=1e-15)
    np.testing.assert_allclose(det.decode(t, a), [4.0, 5.0, 6.0, 20.0], atol=1e-12)


def test_encode_decode_batch_roundtrip(rng):
    g, a = _random_boxes(rng, 500), _random_boxes(rng, 500)
    assert np.max(np.abs(det.decode(det.encode_target(g, a), a) - g)) <= 1e-9


def test_label_anchors():
    gts = np.array([[10.0, 10.0, 10.0, 10.0]])
    anchors = np.array([
        [10.0, 10.0, 10.0, 10.0],
        [60.0, 60.0, 60.0, 10.0],
        [10.0, 10.0, 10.0, 10.0 * 0.3 ** (1 / 3)],  # nested cube with IoU 0.3
    ])
    assert det.iou3(anchors[2], gts[0]) == pytest.approx(0.3, abs=1e-12)
    labels, matched = det.label_anchors(anchors, gts)
    assert labels.tolist() == [det.POSITIVE, det.NEGATIVE, det.IGNORE]
    assert matched.tolist() == [0, -1, -1]
    with pytest.raises(ValueError):
        det.label_anchors(anchors, gts, pos_iou=0.01, neg_iou=0.02)


def test_label_anchors_partition(rng):
    anchors = det.gen_anchors((4, 4, 4), 4)
    labels, _ = det.label_anchors(anchors, _random_boxes(rng, 3, 16))
    assert set(labels.tolist()) <= {det.POSITIVE, det.NEGATIVE, det.IGNORE}
    assert labels.size == anchors.shape[0]


def test_detection_loss_examples():
    targets = np.array([[0.1, -0.2, 0.3, 0.0], [0.0, 0.0, 0.0, 0.0]])
    preds = np.column_stack([[60.0, -60.0], targets])
    out = det.detection_loss(preds, [1, 0], targets)
    assert out.value <= 1e-6
    out = det.detection_loss(np.array([[0.3, 5, 5, 5, 5], [-0.2, 1, 1, 1, 1]]), [0, 0], np.zeros((2, 4)))
    assert out.reg_value == 0.0
    assert out.value == pytest.approx(0.5 * out.cls_value, abs=1e-15)
    with pytest.raises(ValueError):
        det.detection_loss(np.zeros((1, 5)), [det.IGNORE], np.zeros((1, 4)))


def test_detection_loss_gradient(rng):
    preds = rng.normal(size=(5, 5))
    labels = np.array([1, 0, -1, 1, 0])
    targets = preds[:, 1:] + rng.uniform(0.1, 0.5, size=(5, 4))
    out = det.detection_loss(preds, labels, targets)
    f = lambda p: det.detection_loss(p, labels, targets).value  # noqa: E731
    assert grad_check(f, out.grad, preds).max_rel_err < 1e-4
    assert np.all(out.grad[2] == 0.0)


def test_hard_negative_mine():
    assert det.hard_negative_mine([0.1, 0.9, 0.5], 2).tolist() == [1, 2]
    assert sorted(det.hard_negative_mine([0.3, 0.2], 2).tolist()) == [0, 1]
    assert det.hard_negative_mine([0.5, 0.7, 0.5, 0.5], 3).tolist() == [1, 0, 2]
    with pytest.raises(ValueError):
        det.hard_negative_mine([0.1], 2)


def test_nms_examples():
    assert det.nms(np.zeros((0, 4)), []).tolist() == []
    assert det.nms([[1.0, 1.0, 1.0, 2.0]], [0.4]).tolist() == [0]
    b = [[1.0, 1.0, 1.0, 2.0], [1.0, 1.0, 1.0, 2.0]]
    assert det.nms(b, [0.8, 0.9]).tolist() == [1]
    with pytest.raises(ValueError):
        det.nms(b, [0.8, 0.9], iou_thr=1.5)


def test_nms_equals_exhaustive_oracle(rng):
    for _ in range(200):
        n = int(rng.integers(1, 9))
        boxes = _random_boxes(rng, n, 8.0)
        scores = rng.random(n)
        thr = float(rng.choice([0.0, 0.1, 0.3, 0.5]))
        kept = det.nms(boxes, scores, thr).tolist()
        assert kept == _exhaustive_nms(boxes, scores, thr)
        iou = det.iou_matrix(boxes[kept], boxes[kept])
        assert np.all(iou[~np.eye(len(kept), dtype=bool)] < thr) if thr > 0 else len(kept) == 1


def test_filter_detections():
    boxes = np.array([[1.0, 1.0, 1.0, 2.0], [1.2, 1.0, 1.0, 2.0], [9.0, 9.0, 9.0, 2.0]])
    assert det.filter_detections(boxes, [-5.0, -5.0, -5.0]).tolist() == []
    assert det.filter_detections(boxes, [0.0, 1.0, -3.0]).tolist() == [1]


def test_froc_examples():
    gt = np.array([[5.0, 5.0, 5.0, 4.0]])
    hit = np.array([[5.0, 5.0, 5.0, 4.0, 0.9]])
    assert det.froc([(hit, gt)]).froc == 1.0
    assert det.froc([(np.zeros((0, 5)), gt)]).froc == 0.0
    fp = np.array([[20.0, 20.0, 20.0, 4.0, 0.8]])
    res = det.froc([(np.vstack([hit, fp]), gt)])
    assert res.sensitivities == (1.0,) * 7 and res.froc == 1.0
    assert res.fp_points == det.FROC_FP_POINTS


def test_froc_interpolates_between_operating_points():
    gts = np.array([[5.0, 5.0, 5.0, 4.0], [15.0, 15.0, 15.0, 4.0]])
    dets = np.array([
        [5.0, 5.0, 5.0, 4.0, 0.9],
        [30.0, 30.0, 30.0, 4.0, 0.8],
        [15.0, 15.0, 15.0, 4.0, 0.7],
    ])
    res = det.froc([(dets, gts)])
    # curve: (0, 0.5), (1, 1.0); past the last FP rate the sensitivity is held
    assert res.sensitivities == (0.5625, 0.625, 0.75, 1.0, 1.0, 1.0, 1.0)
    assert res.froc == pytest.approx(np.mean(res.sensitivities), abs=1e-15)


def _random_froc_scans(rng, n_scans=3):
    scans = []
    for _ in range(n_scans):
        gts = np.column_stack([rng.uniform(10, 50, size=(2, 3)), np.full(2, 6.0)])
        d = []
        for g in gts:
            if rng.random() < 0.7:
                d.append([*g[:3], g[3], rng.random()])
        for _ in range(int(rng.integers(0, 5))):
            d.append([*rng.uniform(100, 200, size=3), 5.0, rng.random()])
        scans.append((np.array(d).reshape(-1, 5), gts))
    return scans


def test_froc_monotone_in_true_and_false_positives(rng):
    for _ in range(100):
        scans = _random_froc_scans(rng)
        base = det.froc(scans).froc
        k = int(rng.integers(0, len(scans)))
        dets, gts = scans[k]
        g = gts[int(rng.integers(0, 2))]
        more_tp = list(scans)
        more_tp[k] = (np.vstack([dets, [*g[:3], g[3], rng.random()]]), gts)
        assert det.froc(more_tp).froc >= base - 1e-15
        more_fp = list(scans)
        more_fp[k] = (np.vstack([dets, [300.0, 300.0, 300.0, 5.0, rng.random()]]), gts)
        assert det.froc(more_fp).froc <= base + 1e-15


def test_scan_document_roundtrip(tmp_path):
    scans = [(np.array([[1.0, 2.0, 3.0, 4.0, 0.5]]), np.array([[1.0, 2.0, 3.0, 4.0]]))]
    path = tmp_path / "scans.json"
    import json

    path.write_text(json.dumps(det.scans_to_doc(scans)))
    back = det.load_scans(path)
    assert np.array_equal(back[0][0], scans[0][0]) and np.array_equal(back[0][1], scans[0][1])
    with pytest.raises(ValueError):
        det.scans_from_doc([{"dets": []}])
    with pytest.raises(ValueError):
        det.scans_from_doc({"dets": []})


def test_detection_score_is_sigmoid():
    d = det.Detection(det.Box3(0, 0, 0, 1), 0.0)
    assert d.score == 0.5
    assert math.isclose(det.Detection(det.Box3(0, 0, 0, 1), -2.0).score, 0.11920292202211755, abs_tol=1e-15)
