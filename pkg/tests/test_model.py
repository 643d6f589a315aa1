import dataclasses

import numpy as np
import pytest

from conftest import simple_model
from jumpgrad import zoo
from jumpgrad.model import (
    CoefficientEval,
    ContinuousMarks,
    DiscreteMarks,
    EvaluationError,
    JumpSpec,
    ModelError,
    a_matrix,
    dtheta_a,
    jump_compensator,
    validate_model,
)


def vol_model(sigma_fn, d=1, dn=1, n=1, theta=None, dtheta=None, dependent=False):
    vol = CoefficientEval(sigma_fn, dtheta=dtheta)
    return simple_model(d=d, dn=dn, n=n, vol=vol, theta=theta, sigma_theta_dependent=dependent)


def test_a_matrix_examples():
    ident = vol_model(lambda t, x, th: np.broadcast_to(np.eye(2), (x.shape[0], 2, 2)), d=2, dn=2)
    assert np.array_equal(a_matrix(ident, 0.0, np.zeros(2)), 0.5 * np.eye(2))
    assert np.array_equal(a_matrix(simple_model(d=2), 0.0, np.zeros(2)), np.zeros((2, 2)))
    cir = zoo.build_cir()
    assert a_matrix(cir, 0.0, np.array([0.25]))[0, 0] == pytest.approx(0.125, abs=1e-15)


def test_a_matrix_symmetric_psd_on_random_sigma():
    rng = np.random.default_rng(0)
    mats = rng.normal(size=(40, 3, 2))
    m = vol_model(lambda t, x, th: mats[: x.shape[0]], d=3, dn=2)
    a = a_matrix(m, np.zeros(40), np.zeros((40, 3)))
    assert np.array_equal(a, np.swapaxes(a, 1, 2))
    assert np.linalg.eigvalsh(a).min() >= -1e-10


def test_a_matrix_rejects_non_finite_volatility():
    m = vol_model(lambda t, x, th: np.full((x.shape[0], 1, 1), np.nan))
    with pytest.raises(EvaluationError):
        a_matrix(m, 0.0, np.zeros(1))


def test_dtheta_a_examples():
    assert not dtheta_a(zoo.build_gbm(), 0.0, np.ones(1)).any()
    m = vol_model(lambda t, x, th: np.full((x.shape[0], 1, 1), th[0]), theta=[2.0],
                  dtheta=lambda t, x, th: np.ones((x.shape[0], 1, 1, 1)), dependent=True)
    assert dtheta_a(m, 0.0, np.zeros(1))[0, 0, 0] == pytest.approx(2.0)


def test_dtheta_a_matches_differences_for_affine_sigma():
    rng = np.random.default_rng(1)
    n = 3
    s0 = rng.normal(size=(2, 2))
    s1 = rng.normal(size=(n, 2, 2))

    def sigma(t, x, th):
        return np.broadcast_to(s0 + np.einsum("k,kij->ij", th, s1), (x.shape[0], 2, 2))

    theta = rng.normal(size=n)
    m = vol_model(sigma, d=2, dn=2, n=n, theta=theta, dependent=True,
                  dtheta=lambda t, x, th: np.broadcast_to(s1, (x.shape[0], n, 2, 2)))
    exact = dtheta_a(m, 0.0, np.zeros(2))
    h = 1e-5
    for k in range(n):
        e = np.zeros(n)
        e[k] = h
        fd = (a_matrix(m, 0.0, np.zeros(2), theta + e) - a_matrix(m, 0.0, np.zeros(2), theta - e)) / (2 * h)
        assert np.abs(exact[k] - fd).max() < 1e-6
        assert np.array_equal(exact[k], exact[k].T)


def test_validate_model_passes_for_gbm_at_tight_tolerance():
    report = validate_model(zoo.build_gbm(), rtol=1e-5)
    assert report.passed, report.lines()
    assert {c.name for c in report.checks} >= {"drift.dx", "drift.dtheta", "vol.dx", "reward.terminal.dx"}


def test_validate_model_flags_planted_drift_fault():
    good = zoo.build_gbm()
    wrong = CoefficientEval(good.drift.value, good.drift.dx, good.drift.dxx,
                            lambda t, x, th: 2.0 * good.drift.dtheta(t, x, th))
    report = validate_model(dataclasses.replace(good, drift=wrong))
    assert not report.passed
    assert [c.name for c in report.failures] == ["drift.dtheta"]
    assert "x" in report.failures[0].worst_probe


def test_validate_model_zero_model_has_zero_deviation():
    zero = simple_model(d=2, n=2)
    report = validate_model(zero)
    assert report.passed
    assert all(c.max_abs == 0.0 for c in report.checks)


def test_validate_model_flags_theta_dependent_vol_marked_independent():
    m = vol_model(lambda t, x, th: np.full((x.shape[0], 1, 1), th[0]), theta=[1.0],
                  dtheta=lambda t, x, th: np.ones((x.shape[0], 1, 1, 1)), dependent=False)
    report = validate_model(m)
    assert "vol.theta_independent" in [c.name for c in report.failures]


def test_validate_model_skips_unavailable_derivatives():
    report = validate_model(zoo.zoo_model("lq"), rtol=1e-4)
    assert report.passed
    assert "drift.dxx" in report.skipped
    assert any(line.startswith("SKIP") for line in report.lines())


@pytest.mark.parametrize("name", zoo.ZOO_NAMES)
def test_zoo_models_validate(name):
    report = validate_model(zoo.zoo_model(name), rtol=1e-4)
    assert report.passed, report.lines()


def test_model_spec_rejects_bad_definitions():
    with pytest.raises(ModelError):
        simple_model(horizon=0.0)
    with pytest.raises(ModelError):
        simple_model(n=2, theta=np.zeros(3))
    with pytest.raises(ModelError):
        simple_model(jump=CoefficientEval(lambda t, x, z, th: x))


def test_jump_spec_invariants():
    with pytest.raises(ModelError):
        DiscreteMarks([[1.0], [-1.0]], [0.5, 0.0])
    with pytest.raises(ModelError):
        JumpSpec(1.0, DiscreteMarks([[1.0]], [0.7]))
    with pytest.raises(ModelError):
        JumpSpec(-1.0, ContinuousMarks(lambda u: u))
    JumpSpec(1.0, DiscreteMarks([[1.0], [2.0]], [0.25, 0.75]))


def test_compensator_atom_sum_matches_sampled_marks():
    atoms, weights = np.array([[-1.0], [0.5], [2.0]]), np.array([0.3, 0.5, 0.2])
    rate = weights.sum()

    def chi(t, x, z, th):
        return np.sin(z) * (1 + x)

    jump = CoefficientEval(chi)
    exact_model = simple_model(jump=jump, jump_spec=JumpSpec(rate, DiscreteMarks(atoms, weights)))
    cdf = np.cumsum(weights) / rate

    def sampler(u):
        return atoms[np.searchsorted(cdf, u[:, 0], side="right")]

    sampled_model = simple_model(jump=jump, jump_spec=JumpSpec(rate, ContinuousMarks(sampler)))
    x = np.array([0.3])
    exact = jump_compensator(exact_model, 0.0, x)
    u = np.random.default_rng(2).random((20000, 1))
    draws = jump_compensator(sampled_model, np.zeros(20000), np.broadcast_to(x, (20000, 1)), uniforms=u)
    se = draws.std() / np.sqrt(draws.size)
    assert abs(draws.mean() - exact[0]) <= 3 * se
