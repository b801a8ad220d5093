import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mednumerics import losses, metrics
from mednumerics.tensor import grad_check


def _scalar_dice(p, g, alpha=0.5, beta=0.5, eps=0.0):
    c, n = len(p), len(p[0])
    total = 0.0
    for k in range(c):
        tp = sum(p[k][i] * g[k][i] for i in range(n))
        fn = sum((1 - p[k][i]) * g[k][i] for i in range(n))
        fp = sum(p[k][i] * (1 - g[k][i]) for i in range(n))
        total += (tp + eps) / (tp + alpha * fn + beta * fp + eps)
    return c - total


def _random_instance(rng, c=3, n=10):
    p = rng.dirichlet(np.ones(c), size=n).T
    g = losses.one_hot(rng.integers(0, c, size=n), c)
    return p, g


def test_class_stats_examples():
    g = losses.one_hot([0, 1, 1], 2)
    st_ = losses.class_stats(g, g)
    np.testing.assert_array_equal(st_.tp, [1, 2])
    np.testing.assert_array_equal(st_.fn, [0, 0])
    np.testing.assert_array_equal(st_.fp, [0, 0])

    st_ = losses.class_stats(np.full((2, 4), 0.5), losses.one_hot([0, 0, 0, 0], 2))
    assert (st_.tp[0], st_.fn[0], st_.fp[0]) == (2.0, 2.0, 0.0)

    st_ = losses.class_stats([[0.7], [0.3]], [[0.0], [1.0]])
    assert st_.tp[1] == pytest.approx(0.3) and st_.fn[1] == pytest.approx(0.7) and st_.fp[1] == 0.0


def test_class_stats_shape_mismatch():
    with pytest.raises(ValueError):
        losses.class_stats(np.zeros((2, 3)), np.zeros((2, 4)))


def test_dice_perfect_prediction_eps0():
    g = losses.one_hot([0, 1, 2, 1], 4)  # class 3 absent everywhere
    assert losses.dice_loss(g, g, eps=0.0).value == 0.0


def test_dice_example_against_scalar_oracle():
    p = np.array([[0.8, 0.4], [0.2, 0.6]])
    g = losses.one_hot([0, 1], 2)
    out = losses.dice_loss(p, g, eps=0.0)
    assert out.value == pytest.approx(_scalar_dice(p.tolist(), g.tolist()), abs=1e-14)
    f = lambda x: losses.dice_loss(x, g, eps=0.0).value  # noqa: E731
    assert grad_check(f, out.grad, p).max_rel_err < 1e-4


def test_dice_equals_dice_index_on_hard_predictions(rng):
    c = 3
    for _ in range(20):
        pred = rng.integers(0, c, size=30)
        gt = rng.integers(0, c, size=30)
        p, g = losses.one_hot(pred, c), losses.one_hot(gt, c)
        dsc = sum(metrics.dice_coefficient(p[k], g[k]) for k in range(c))
        assert abs(losses.dice_loss(p, g, eps=0.0).value - (c - dsc)) <= 1e-12


def test_dice_with_unequal_weights_matches_oracle(rng):
    p, g = _random_instance(rng)
    v = losses.dice_loss(p, g, alpha=0.3, beta=0.7, eps=1e-5).value
    assert v == pytest.approx(_scalar_dice(p.tolist(), g.tolist(), 0.3, 0.7, 1e-5), abs=1e-12)


def test_dice_rejects_bad_coefficients():
    g = losses.one_hot([0, 1], 2)
    with pytest.raises(ValueError):
        losses.dice_loss(g, g, alpha=0.0)
    with pytest.raises(ValueError):
        losses.dice_loss(g, g, eps=-1.0)


def test_focal_examples():
    g = losses.one_hot([0, 1], 2)
    assert losses.focal_loss(g, g).value == 0.0
    out = losses.focal_loss([[0.5], [0.5]], [[1.0], [0.0]])
    assert out.value == pytest.approx(-0.25 * math.log(0.5), abs=1e-15)
    assert out.value == pytest.approx(0.17328679513998632, abs=1e-15)


def test_focal_grad_random_2x8(rng):
    p, g = _random_instance(rng, 2, 8)
    out = losses.focal_loss(p, g)
    assert grad_check(lambda x: losses.focal_loss(x, g).value, out.grad, p).max_rel_err < 1e-4


def test_hybrid_compositional(rng):
    p, g = _random_instance(rng)
    assert losses.hybrid_loss(p, g, 0.0).value == losses.dice_loss(p, g).value
    expected = losses.dice_loss(p, g).value + 0.5 * losses.focal_loss(p, g).value
    assert losses.hybrid_loss(p, g, 0.5).value == pytest.approx(expected, abs=1e-14)


def test_hybrid_perfect_prediction():
    g = losses.one_hot([0, 1, 2, 2], 3)
    assert abs(losses.hybrid_loss(g, g, 0.5, eps=0.0).value) <= 1e-9


def test_hybrid_affine_in_lambda(rng):
    p, g = _random_instance(rng)
    v0, v1 = losses.hybrid_loss(p, g, 0.0).value, losses.hybrid_loss(p, g, 1.0).value
    for lam in (0.25, 0.5, 2.0):
        assert abs(losses.hybrid_loss(p, g, lam).value - (v0 + lam * (v1 - v0))) <= 1e-12


def test_annotation_weights():
    assert losses.annotation_weights(np.ones((3, 2)))[1] == pytest.approx(1 / 3)
    masks = np.zeros((196, 2))
    masks[:, 1] = 1
    assert losses.annotation_weights(masks, classes=[1])[1] == 1 / 196
    masks = np.array([[1, 1], [1, 1], [0, 1], [0, 1]])
    np.testing.assert_allclose(losses.annotation_weights(masks), [0.5, 0.25])
    with pytest.raises(ValueError, match="class 1"):
        losses.annotation_weights(np.array([[1, 0], [1, 0]]))


def test_make_annotation_mask():
    np.testing.assert_array_equal(losses.make_annotation_mask([1, 1]), [1, 1, 1])
    np.testing.assert_array_equal(losses.make_annotation_mask([1, 0]), [0, 1, 0])


def test_masked_full_mask_is_bitwise_unmasked(rng):
    p, g = _random_instance(rng)
    ones = np.ones(3)
    a, b = losses.masked_weighted_dice(p, g, ones, ones), losses.dice_loss(p, g)
    assert a.value == b.value and np.array_equal(a.grad, b.grad)
    a, b = losses.masked_weighted_focal(p, g, ones, ones), losses.focal_loss(p, g)
    assert a.value == b.value and np.array_equal(a.grad, b.grad)


def test_masked_class_has_no_direct_gradient(rng):
    p, g = _random_instance(rng)
    out = losses.masked_weighted_dice(p, g, [1.0, 0.0, 1.0], np.ones(3))
    assert np.all(out.grad[1] == 0.0)
    f = lambda x: losses.masked_weighted_dice(x, g, [1.0, 0.0, 1.0], np.ones(3)).value  # noqa: E731
    assert grad_check(f, out.grad, p).max_rel_err < 1e-4


def test_masked_weights_scale_linearly(rng):
    p, g = _random_instance(rng)
    mask = np.array([0.0, 1.0, 1.0])
    one = losses.masked_weighted_dice(p, g, mask, np.ones(3)).value
    half = losses.masked_weighted_dice(p, g, mask, np.full(3, 0.5)).value
    # value = C - sum w * term, so the weighted part halves
    assert (3 - half) == pytest.approx(0.5 * (3 - one), abs=1e-13)
    f1 = losses.masked_weighted_focal(p, g, mask, np.ones(3)).value
    fh = losses.masked_weighted_focal(p, g, mask, np.full(3, 0.5)).value
    assert fh == pytest.approx(0.5 * f1, abs=1e-14)


def test_masked_focal_perfect_prediction():
    g = losses.one_hot([0, 1, 2], 3)
    assert losses.masked_weighted_focal(g, g, [0, 1, 1], [1, 2, 3]).value == 0.0


def test_mask_must_be_binary(rng):
    p, g = _random_instance(rng)
    with pytest.raises(ValueError):
        losses.masked_weighted_dice(p, g, [0.5, 1, 1], np.ones(3))


def test_fcn_nll_examples():
    g = losses.one_hot([0, 1], 2)
    assert losses.fcn_nll(g, g).value == 0.0
    e = math.exp(-1)
    assert losses.fcn_nll([[e, 1 - e], [1 - e, e]], g).value == pytest.approx(1.0, abs=1e-15)


def test_bce_examples():
    assert losses.bce(np.array([0.0, 1.0]), np.array([0.0, 1.0])).value == pytest.approx(0.0, abs=1e-6)
    assert losses.bce(np.array([0.5]), np.array([1.0])).value == pytest.approx(math.log(2), abs=1e-15)


def test_smooth_l1_examples():
    assert losses.smooth_l1([0.0], [0.0]).value == 0.0
    assert losses.smooth_l1([0.5], [0.0]).value == 0.125
    assert losses.smooth_l1([2.0], [0.0]).value == 1.5
    with pytest.raises(ValueError):
        losses.smooth_l1([1.0, 2.0], [1.0])


def test_smooth_l1_gradient_continuous_at_kink():
    h = 1e-7
    left = (losses.smooth_l1([1.0], [0.0]).value - losses.smooth_l1([1.0 - h], [0.0]).value) / h
    right = (losses.smooth_l1([1.0 + h], [0.0]).value - losses.smooth_l1([1.0], [0.0]).value) / h
    assert abs(left - right) < 1e-6


def test_l2_regularizer():
    out = losses.l2_regularizer([3.0, 4.0], 0.5)
    assert out.value == 6.25
    np.testing.assert_array_equal(out.grad, [1.5, 2.0])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_losses_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    p, g = _random_instance(rng, 3, 7)
    perm = rng.permutation(7)
    for fn in (losses.dice_loss, losses.focal_loss, losses.fcn_nll):
        a, b = fn(p, g), fn(p[:, perm], g[:, perm])
        assert b.value == pytest.approx(a.value, abs=1e-13)
        np.testing.assert_allclose(b.grad, a.grad[:, perm], atol=1e-13)
