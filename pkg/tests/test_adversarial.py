import logging

import numpy as np
import pytest

from mednumerics import adversarial as adv


def test_perturbation_example():
    np.testing.assert_allclose(adv.adversarial_perturbation([3.0, 4.0], 1.0), [-0.6, -0.8], atol=1e-15)
    np.testing.assert_allclose(
        adv.adversarial_perturbation([3.0, 4.0], 0.1), 0.1 * adv.adversarial_perturbation([3.0, 4.0], 1.0), atol=1e-16
    )


def test_perturbation_norm_and_direction_invariance(rng):
    for _ in range(200):
        g = rng.normal(size=7) * rng.uniform(1e-3, 1e3)
        eps = rng.uniform(1e-3, 2.0)
        r = adv.adversarial_perturbation(g, eps)
        assert abs(np.linalg.norm(r) - eps) <= 1e-12
        np.testing.assert_allclose(adv.adversarial_perturbation(5.3 * g, eps), r, atol=1e-15)


def test_zero_gradient_errors():
    with pytest.raises(adv.ZeroGradientError, match="zero gradient, perturbation undefined"):
        adv.adversarial_perturbation(np.zeros(3), 0.1)
    with pytest.raises(ValueError):
        adv.adversarial_perturbation([np.inf, 0.0], 0.1)


def test_config_validation():
    with pytest.raises(ValueError):
        adv.PerturbationConfig(epsilon=0.0)
    with pytest.raises(ValueError):
        adv.PerturbationConfig(epsilon=0.1, reg_lambda=-1.0)


def test_small_epsilon_limit(rng):
    theta = rng.normal(size=3)
    model = adv.LogisticModel(theta)
    batch = [(rng.normal(size=3), 1), (rng.normal(size=3), 0)]
    cfg = adv.PerturbationConfig(epsilon=1e-9, reg_lambda=0.2)
    emp = sum(model.loss(x, y) for x, y in batch) / 2
    expected = 2 * emp + 0.1 * float(theta @ theta)
    assert adv.adversarial_total_loss(model, batch, cfg) == pytest.approx(expected, abs=1e-8)


def test_constant_model_falls_back_to_zero_perturbation(caplog):
    model = adv.ConstantModel(0.7)
    with pytest.raises(adv.ZeroGradientError):
        adv.adversarial_perturbation(model.input_gradient(np.ones(2), 1), 0.1)
    with caplog.at_level(logging.WARNING):
        total = adv.adversarial_total_loss(model, [(np.ones(2), 1)], adv.PerturbationConfig(0.1))
    assert total == pytest.approx(1.4, abs=1e-15)
    assert "zero input gradient" in caplog.text


def test_quadratic_closed_form(rng):
    theta = rng.normal(size=4)
    model = adv.QuadraticModel(theta)
    batch = [(rng.normal(size=4), rng.normal(size=4)) for _ in range(3)]
    eps, lam = 0.3, 0.25
    expected = 0.0
    for x, y in batch:
        v = x - y + theta
        base = 0.5 * np.sum((x - y) ** 2) + theta @ x
        # moving eps along v / |v| raises the loss by eps |v| + eps^2 / 2
        expected += (2 * base + eps * np.linalg.norm(v) + 0.5 * eps**2) / 3
    expected += 0.5 * lam * theta @ theta
    total = adv.adversarial_total_loss(model, batch, adv.PerturbationConfig(eps, lam))
    assert total == pytest.approx(expected, abs=1e-8)


def test_objective_value_matches_total_loss(rng):
    theta = rng.normal(size=3)
    model = adv.LogisticModel(theta)
    batch = [(rng.normal(size=3), int(rng.random() < 0.5)) for _ in range(4)]
    cfg = adv.PerturbationConfig(0.2, 0.1)
    out, perts = adv.adversarial_objective(model, batch, cfg)
    assert out.value == pytest.approx(adv.adversarial_total_loss(model, batch, cfg), abs=1e-14)
    assert all(abs(np.linalg.norm(r) - 0.2) <= 1e-12 for r in perts)
