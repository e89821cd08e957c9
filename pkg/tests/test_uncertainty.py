import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from subopt import core, sampling
from subopt.core import Dataset, LossModel
from subopt.errors import SingularHessian
from subopt.sampling import Pilot, SampleDraw, SamplingPlan
from subopt.solver import solve_full
from subopt.uncertainty import (ConfidenceSpec, EstimateKind, SandwichEstimate, amse, chi2_cdf,
                                chi2_quantile, ci_statistic, empirical_mse, in_confidence_region,
                                mse_estimate, mspe, sandwich)

from conftest import random_dataset

SQ = LossModel.squared()


def test_chi2_quantile_known_values():
    assert chi2_quantile(2, 0.95) == pytest.approx(5.991464547107979, rel=1e-10)
    assert chi2_quantile(1, 0.95) == pytest.approx(3.841458820694124, rel=1e-10)
    assert chi2_quantile(6, 0.9) == pytest.approx(10.64464067566842, rel=1e-10)
    assert chi2_quantile(6, 0.95) == pytest.approx(12.59158724374398, rel=1e-10)


@pytest.mark.parametrize("q", [0.01, 0.3, 0.5, 0.9, 0.95, 0.999])
def test_chi2_quantile_closed_forms(q):
    # two degrees of freedom: exponential with mean 2
    assert chi2_quantile(2, q) == pytest.approx(-2.0 * math.log1p(-q), rel=1e-8)
    # one degree of freedom: squared two-sided normal quantile
    z = stats.norm.ppf(0.5 + q / 2)
    assert chi2_quantile(1, q) == pytest.approx(z * z, rel=1e-8)


@settings(max_examples=60, deadline=None)
@given(dof=st.integers(1, 40), q=st.floats(1e-4, 1 - 1e-6))
def test_chi2_quantile_inverts_cdf(dof, q):
    x = chi2_quantile(dof, q)
    assert chi2_cdf(x, dof) == pytest.approx(q, rel=1e-9, abs=1e-12)
    assert x == pytest.approx(stats.chi2.ppf(q, dof), rel=1e-8)


def test_chi2_quantile_monotone():
    qs = np.linspace(0.01, 0.99, 50)
    for dof in (1, 2, 6, 30):
        xs = [chi2_quantile(dof, q) for q in qs]
        assert np.all(np.diff(xs) > 0)
    assert all(chi2_quantile(k, 0.9) < chi2_quantile(k + 1, 0.9) for k in range(1, 20))


def test_confidence_spec_validation():
    with pytest.raises(ValueError):
        ConfidenceSpec(1.0, 2)
    with pytest.raises(ValueError):
        ConfidenceSpec(0.9, 0)
    assert ConfidenceSpec(0.95, 2).threshold == pytest.approx(5.991464547107979, rel=1e-10)


def test_amse_mean_estimation_uniform():
    x = np.array([1.0, 2.0, 6.0])
    data = Dataset(x[:, None])
    theta_N = solve_full(SQ, data).theta
    est = amse(SQ, data, sampling.uniform_plan(3), theta_N, n=2)
    # population variance over n
    np.testing.assert_allclose(est.matrix, [[np.var(x) / 2]], rtol=1e-13)
    assert est.kind is EstimateKind.AMSE


def test_amse_mean_estimation_nonuniform():
    x = np.array([1.0, 2.0, 6.0])
    data = Dataset(x[:, None])
    pi = np.array([0.2, 0.3, 0.5])
    est = amse(SQ, data, SamplingPlan(pi), np.array([3.0]), n=4)
    expect = np.sum((x - 3.0) ** 2 / pi) / (4 * 9)
    np.testing.assert_allclose(est.matrix, [[expect]], rtol=1e-13)


def test_mse_estimate_mean_estimation():
    x = np.array([1.0, 2.0, 6.0])
    data = Dataset(x[:, None])
    draw = SampleDraw(np.array([0, 2, 2]), np.full(3, 1 / 3))
    theta_n = np.array([(1.0 + 6.0 + 6.0) / 3])
    est = mse_estimate(SQ, data, draw, theta_n)
    expect = np.sum((x[draw.indices] - theta_n[0]) ** 2) / 9
    np.testing.assert_allclose(est.matrix, [[expect]], rtol=1e-13)
    assert est.kind is EstimateKind.MSE_HAT and est.n == 3


@pytest.mark.parametrize("kind", ["linear", "logistic"])
def test_full_enumeration_consistency(rng, kind):
    data, model = random_dataset(rng, 60, 3, kind)
    theta_N = solve_full(model, data).theta
    every = SampleDraw(np.arange(60), np.full(60, 1 / 60))
    a = amse(model, data, sampling.uniform_plan(60), theta_N, n=60).matrix
    b = mse_estimate(model, data, every, theta_N).matrix
    np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-16)


def test_amse_matches_direct_formula(small_logistic):
    data, model = small_logistic
    theta = solve_full(model, data).theta
    pi = sampling.apply_floor(np.arange(1.0, data.N + 1), 0.1)
    n, N = 37, data.N
    Sigma = sum(core.point_hess(model, data, theta, i) for i in range(N)) / N
    V = sum(np.outer(g, g) / pi[i] for i, g in
            ((i, core.point_grad(model, data, theta, i)) for i in range(N))) / (n * N * N)
    direct = np.linalg.solve(Sigma, np.linalg.solve(Sigma, V).T)
    got = amse(model, data, SamplingPlan(pi), theta, n).matrix
    np.testing.assert_allclose(got, direct, rtol=1e-10)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), kind=st.sampled_from(["linear", "logistic"]))
def test_estimates_symmetric_psd_and_reconstruct(seed, kind):
    rng = np.random.default_rng(seed)
    data, model = random_dataset(rng, 40, 3, kind)
    idx = rng.integers(0, 40, size=25)
    pi = rng.random(40) + 0.05
    pi /= pi.sum()
    draw = SampleDraw(idx, pi[idx])
    theta = rng.standard_normal(3) * 0.5
    for est in (mse_estimate(model, data, draw, theta),
                amse(model, data, SamplingPlan(pi), theta, 25)):
        M = est.matrix
        np.testing.assert_array_equal(M, M.T)
        lam = np.linalg.eigvalsh(M)
        assert lam[0] >= -1e-12 * max(lam[-1], 1e-300)
        np.testing.assert_allclose(est.bread @ M @ est.bread, est.meat, rtol=1e-7,
                                   atol=1e-10 * np.abs(est.meat).max())


def test_sandwich_homogeneity(rng):
    A = rng.standard_normal((3, 3))
    bread = A @ A.T + np.eye(3)
    B = rng.standard_normal((3, 3))
    meat = B @ B.T
    base = sandwich(bread, meat, EstimateKind.AMSE, 1).matrix
    np.testing.assert_allclose(sandwich(bread, 5 * meat, EstimateKind.AMSE, 1).matrix, 5 * base,
                               rtol=1e-12)
    np.testing.assert_allclose(sandwich(3 * bread, meat, EstimateKind.AMSE, 1).matrix, base / 9,
                               rtol=1e-12)


def test_amse_inverse_in_n(small_linear):
    data, model = small_linear
    theta = solve_full(model, data).theta
    plan = sampling.uniform_plan(data.N)
    a = amse(model, data, plan, theta, 10).matrix
    b = amse(model, data, plan, theta, 40).matrix
    np.testing.assert_allclose(b, a / 4, rtol=1e-12)


def test_sandwich_singular_bread():
    with pytest.raises(SingularHessian):
        sandwich(np.diag([1.0, 0.0]), np.eye(2), EstimateKind.AMSE, 1)


def test_mspe_examples(rng):
    M = np.array([[2.0, 0.5], [0.5, 1.0]])
    est = SandwichEstimate(M, EstimateKind.AMSE, np.eye(2), M, 1)
    assert mspe([1.0, 0.0], est) == pytest.approx(2.0)
    assert mspe([0.0, 0.0], est) == 0.0
    v = rng.standard_normal(2)
    assert mspe(v, est) == pytest.approx(v @ M @ v, rel=1e-14)


def _est(M):
    M = np.asarray(M, dtype=float)
    return SandwichEstimate(M, EstimateKind.MSE_HAT, np.eye(len(M)), M, 1)


def test_ci_statistic_examples():
    assert ci_statistic([1.0, 1.0], [0.0, 0.0], _est(np.eye(2))) == pytest.approx(2.0)
    assert ci_statistic([0.0, 1.5], [0.0, 0.0], _est(np.diag([1.0, 0.25]))) == pytest.approx(9.0)
    spec = ConfidenceSpec(0.95, 2)
    assert in_confidence_region([1.0, 1.0], [0.0, 0.0], _est(np.eye(2)), spec)
    assert not in_confidence_region([0.0, 1.5], [0.0, 0.0], _est(np.diag([1.0, 0.25])), spec)
    assert in_confidence_region([3.0, -2.0], [3.0, -2.0], _est(np.eye(2)), spec)


def test_ci_boundary():
    q = chi2_quantile(1, 0.9)
    spec = ConfidenceSpec(0.9, 1)
    r = math.sqrt(q)
    assert in_confidence_region([r * (1 - 1e-9)], [0.0], _est([[1.0]]), spec)
    assert not in_confidence_region([r * (1 + 1e-9)], [0.0], _est([[1.0]]), spec)


def test_hessian_plan_minimises_amse_trace():
    rng = np.random.default_rng(3)
    data, model = random_dataset(rng, 2000, 4, "logistic")
    theta_N = solve_full(model, data).theta
    Sigma = core.full_hess(model, data, theta_N)
    exact = Pilot(theta_N, Sigma, np.arange(4))
    n, N = 100, data.N
    best = amse(model, data, sampling.hessian_plan(model, data, exact, 0.0), theta_N, n).trace
    # closed-form minimum over plans: (sum_i ||Sigma^{-1} g_i||)^2 / (n N^2)
    G = core.row_grads(model, data, theta_N)
    optimum = np.linalg.norm(np.linalg.solve(Sigma, G.T), axis=0).sum() ** 2 / (n * N * N)
    assert best == pytest.approx(optimum, rel=1e-10)
    assert best <= amse(model, data, sampling.uniform_plan(N), theta_N, n).trace
    assert best <= amse(model, data, sampling.gradient_plan(model, data, exact, 0.0), theta_N, n).trace
    for _ in range(5):
        other = SamplingPlan(sampling.apply_floor(rng.random(N), 0.0))
        assert best <= amse(model, data, other, theta_N, n).trace


def test_empirical_mse_trace_is_mean_squared_norm(rng):
    D = rng.standard_normal((200, 5))
    M = empirical_mse(D)
    assert np.trace(M) == pytest.approx(np.mean(np.sum(D ** 2, axis=1)), rel=1e-13)
    np.testing.assert_array_equal(M, M.T)
    np.testing.assert_allclose(empirical_mse([[1.0, 2.0]]), [[1, 2], [2, 4]])
