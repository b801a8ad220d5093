import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mednumerics import tensor


def test_softmax_known_values():
    out = tensor.softmax([1.0, 2.0, 3.0])
    np.testing.assert_allclose(out, [0.09003057, 0.24472847, 0.66524096], atol=1e-8)


def test_softmax_shift_invariant_and_stable():
    a = tensor.softmax([1000.0, 1001.0, 1002.0])
    np.testing.assert_allclose(a, tensor.softmax([0.0, 1.0, 2.0]), atol=1e-15)
    assert np.all(np.isfinite(a))


def test_sigmoid_values_and_extremes():
    assert tensor.sigmoid(np.array([-2.0]))[0] == pytest.approx(0.11920292202211755, abs=1e-15)
    assert tensor.sigmoid(np.array([0.0]))[0] == 0.5
    out = tensor.sigmoid(np.array([-800.0, 800.0]))
    assert out[0] == 0.0 and out[1] == 1.0


def test_log_softmax_matches_log_of_softmax(rng):
    x = rng.normal(size=(3, 5))
    np.testing.assert_allclose(tensor.log_softmax(x), np.log(tensor.softmax(x)), atol=1e-13)


def test_reduce_ops():
    x = np.arange(6.0).reshape(2, 3)
    assert tensor.reduce(x, "sum") == 15.0
    np.testing.assert_allclose(tensor.reduce(x, "mean", axis=0), [1.5, 2.5, 3.5])
    np.testing.assert_allclose(tensor.reduce(x, "max", axis=1), [2.0, 5.0])
    with pytest.raises(ValueError):
        tensor.reduce(np.zeros((0,)), "max")
    with pytest.raises(ValueError):
        tensor.reduce(x, "median")


def test_as_tensor_rejects_nonfinite():
    with pytest.raises(ValueError):
        tensor.as_tensor([1.0, np.nan])


def test_finite_diff_on_cubic():
    # d/dx sum x^3 = 3 x^2; central differences are exact up to h^2 terms
    x = np.array([0.5, -1.0, 2.0])
    g = tensor.finite_diff_grad(lambda v: float(np.sum(v**3)), x)
    np.testing.assert_allclose(g, 3 * x**2, rtol=1e-8)


def test_finite_diff_rejects_bad_step():
    with pytest.raises(ValueError):
        tensor.finite_diff_grad(lambda v: 0.0, np.zeros(2), h=0.0)


def test_grad_check_detects_wrong_gradient():
    x = np.array([0.3, 0.7])
    f = lambda v: float(np.sum(np.sin(v)))  # noqa: E731
    assert tensor.grad_check(f, np.cos(x), x).passed()
    assert not tensor.grad_check(f, 1.01 * np.cos(x), x).passed()


def test_grad_check_relative_error_floor():
    rep = tensor.grad_check(lambda v: 0.0, np.zeros(3), np.zeros(3))
    assert rep.max_rel_err == 0.0
    assert len(rep.table()) == 3


def test_tjson_roundtrip(tmp_path, rng):
    x = rng.normal(size=(2, 3, 4))
    path = tmp_path / "t.json"
    tensor.save_tjson(path, x)
    doc = json.loads(path.read_text())
    assert doc["shape"] == [2, 3, 4]
    np.testing.assert_array_equal(tensor.load_tjson(path), x)


@pytest.mark.parametrize(
    "doc",
    [{"shape": [2, 2], "data": [1, 2, 3]}, {"shape": [0], "data": []}, {"data": [1]}, {"shape": [1], "data": ["x"]}],
)
def test_tjson_rejects_malformed(doc):
    with pytest.raises(ValueError):
        tensor.from_tjson(doc)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
def test_softmax_is_a_distribution(values):
    p = tensor.softmax(values)
    assert abs(p.sum() - 1.0) < 1e-12
    assert np.all(p >= 0)


def test_finite_diff_on_non_contiguous_input():
    x = np.arange(6.0).reshape(2, 3).T
    g = tensor.finite_diff_grad(lambda v: float(np.sum(v * v)), x)
    np.testing.assert_allclose(g, 2 * x, rtol=1e-8)
