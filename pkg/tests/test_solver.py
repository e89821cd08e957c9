import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from subopt import core
from subopt.core import Dataset, LossModel
from subopt.errors import NoConvergence, SingularHessian
from subopt.sampling import SampleDraw
from subopt.solver import (Objective, SolveSpec, newton_solve, solve_full, solve_pilot,
                           solve_subsample_equal, solve_subsample_weighted)

from conftest import random_dataset

SQ = LossModel.squared()
LOGIT = LossModel.logistic()


def test_squared_loss_matches_ols(small_linear):
    data, model = small_linear
    sol = solve_full(model, data)
    ols = np.linalg.lstsq(data.features, data.response, rcond=None)[0]
    assert sol.converged
    assert sol.iterations <= 2
    np.testing.assert_allclose(sol.theta, ols, rtol=1e-8, atol=1e-10)


def test_squared_loss_is_one_newton_step(rng):
    # a quadratic is minimised exactly by one Newton step from any start
    data, model = random_dataset(rng, 50, 3, "linear")
    sol = solve_full(model, data, init=rng.standard_normal(3) * 100)
    ols = np.linalg.lstsq(data.features, data.response, rcond=None)[0]
    assert sol.iterations <= 2
    np.testing.assert_allclose(sol.theta, ols, rtol=1e-8, atol=1e-9)


def test_logistic_symmetric_data_gives_zero():
    data = Dataset([[1.0], [1.0], [-1.0], [-1.0]], [1.0, 0.0, 1.0, 0.0])
    sol = solve_full(LOGIT, data)
    assert sol.converged
    np.testing.assert_allclose(sol.theta, [0.0], atol=1e-12)


def test_logistic_intercept_only_gives_logit_of_mean():
    y = np.array([1, 1, 1, 0], dtype=float)
    sol = solve_full(LOGIT, Dataset(np.ones((4, 1)), y))
    np.testing.assert_allclose(sol.theta, [np.log(3.0)], rtol=1e-10)


def test_logistic_first_order_condition(small_logistic):
    data, model = small_logistic
    sol = solve_full(model, data)
    assert sol.converged
    assert np.linalg.norm(core.full_grad(model, data, sol.theta)) <= 1e-9


def test_separable_data_is_not_converged():
    data = Dataset([[1.0, -2.0], [1.0, -1.0], [1.0, 1.0], [1.0, 2.0]], [0.0, 0.0, 1.0, 1.0])
    sol = solve_full(LOGIT, data)
    assert not sol.converged
    with pytest.raises(NoConvergence) as exc:
        sol.require_converged()
    assert exc.value.solution is sol


def test_single_row_mean():
    sol = solve_full(SQ, Dataset([[1.0]], [3.0]))
    assert sol.converged
    np.testing.assert_allclose(sol.theta, [3.0], rtol=1e-14)


def test_mean_estimation_gives_sample_mean():
    x = np.array([[1.0], [2.0], [6.0]])
    sol = solve_full(SQ, Dataset(x))
    np.testing.assert_allclose(sol.theta, [3.0], rtol=1e-14)


@pytest.mark.parametrize("kind", ["linear", "logistic"])
def test_full_enumeration_equals_full_solve(rng, kind):
    data, model = random_dataset(rng, 40, 3, kind)
    full = solve_full(model, data).theta
    every = SampleDraw(np.arange(40), np.full(40, 1 / 40))
    np.testing.assert_allclose(solve_subsample_weighted(model, data, every).theta, full, rtol=1e-10,
                               atol=1e-12)
    np.testing.assert_allclose(solve_subsample_equal(model, data, every).theta, full, rtol=1e-10,
                               atol=1e-12)
    np.testing.assert_allclose(solve_pilot(model, data, np.arange(40)).theta, full, rtol=1e-10,
                               atol=1e-12)


def test_fewer_rows_than_dimensions_is_singular(rng):
    data, model = random_dataset(rng, 30, 4, "linear")
    draw = SampleDraw(np.array([0, 1, 2]), np.full(3, 1 / 30))
    with pytest.raises(SingularHessian):
        solve_subsample_weighted(model, data, draw)
    with pytest.raises(SingularHessian):
        solve_pilot(model, data, np.array([3, 4]))


def test_collinear_design_is_singular():
    X = np.array([[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]])
    with pytest.raises(SingularHessian):
        solve_full(SQ, Dataset(X, [1.0, 2.0, 3.0]))


def test_weighted_equals_equal_under_uniform_pi(rng):
    data, model = random_dataset(rng, 60, 3, "logistic")
    idx = rng.integers(0, 60, size=40)
    draw = SampleDraw(idx, np.full(40, 1 / 60))
    a = solve_subsample_weighted(model, data, draw).theta
    b = solve_subsample_equal(model, data, draw).theta
    np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)


def test_weighted_solution_zeroes_weighted_gradient(rng):
    data, model = random_dataset(rng, 80, 3, "logistic")
    idx = rng.integers(0, 80, size=50)
    pi = rng.random(80) + 0.2
    pi /= pi.sum()
    draw = SampleDraw(idx, pi[idx])
    sol = solve_subsample_weighted(model, data, draw)
    assert sol.converged
    assert np.linalg.norm(core.weighted_grad(model, data, draw, sol.theta)) <= 1e-9
    np.testing.assert_allclose(sol.final_hess, core.weighted_hess(model, data, draw, sol.theta),
                               rtol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), kind=st.sampled_from(["linear", "logistic"]))
def test_permutation_invariance(seed, kind):
    rng = np.random.default_rng(seed)
    data, model = random_dataset(rng, 50, 3, kind)
    perm = rng.permutation(50)
    shuffled = Dataset(data.features[perm], data.response[perm])
    a = solve_full(model, data)
    b = solve_full(model, shuffled)
    if a.converged:
        np.testing.assert_allclose(a.theta, b.theta, rtol=1e-9, atol=1e-10)
    else:
        assert not b.converged


def test_monotone_descent(small_logistic):
    data, model = small_logistic
    values = []
    for k in range(1, 8):
        sol = solve_full(model, data, max_iter=k)
        values.append(sol.objective_value)
        if sol.converged:
            break
    assert all(b <= a + 1e-15 for a, b in zip(values, values[1:]))
    X, y = core.design(data)
    f0 = core.risk_value(model, X, y, np.full(data.N, 1 / data.N), np.zeros(data.d))
    assert values[0] < f0


def test_iteration_cap_reports_failure(small_logistic):
    data, model = small_logistic
    sol = solve_full(model, data, max_iter=1, tol_grad=1e-300)
    assert not sol.converged and sol.iterations == 1 and sol.message


def test_solve_spec_validation():
    with pytest.raises(ValueError):
        SolveSpec(Objective.WEIGHTED)
    with pytest.raises(ValueError):
        SolveSpec(Objective.PILOT)
    with pytest.raises(ValueError):
        SolveSpec(tol_grad=0.0)
    data = Dataset([[1.0], [2.0]], [1.0, 2.0])
    with pytest.raises(ValueError):
        newton_solve(SQ, data, SolveSpec(init=np.array([np.nan])))
