import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bilevel_gam.errors import InfeasibleLowerLevel, LicqViolation
from bilevel_gam.lower import SolverOpts, classify_active_sets, kkt_residuals, solve_lower
from bilevel_gam.problem import BilevelProblem
from bilevel_gam.problems import make_bilevel_qp

PROBES = [-2, -1.5, -1, -0.5, -0.1, 0, 0.3, 1, 2]


@pytest.mark.parametrize("x", PROBES)
def test_example1_matches_analytic_solution(ex1, x):
    sol = solve_lower(ex1, [x])
    assert sol.converged
    assert abs(sol.y_star[0] - ex1.y_star_exact(x)) <= 1e-7
    assert abs(sol.lam[0] - ex1.lambda_exact(x)) <= 1e-7


def test_example1_named_points(ex1):
    s = solve_lower(ex1, [-1.0])
    assert s.y_star[0] == pytest.approx(1.0, abs=1e-7) and s.lam[0] == pytest.approx(0.0, abs=1e-7)
    s = solve_lower(ex1, [0.5])
    assert s.y_star[0] == pytest.approx(0.25, abs=1e-7)
    assert ex1.p([0.5], s.y_star)[0] < 0
    sets = classify_active_sets(ex1, [0.5], s)
    assert sets.J == ()


def test_active_set_classification_example1(ex1):
    assert classify_active_sets(ex1, [-0.5], solve_lower(ex1, [-0.5])).J_plus == (0,)
    for x in (-1.0, 0.0):
        sets = classify_active_sets(ex1, [x], solve_lower(ex1, [x]))
        assert sets.J_zero == (0,) and not sets.scsc


def test_qp_seed0_matches_exhaustive_oracle():
    prob, ref = make_bilevel_qp(0)
    for x in np.random.default_rng(0).normal(size=(5, 2)):
        sol = solve_lower(prob, x)
        y, lam, _ = ref(x)
        assert np.max(np.abs(sol.y_star - y)) <= 1e-7
        assert np.max(np.abs(sol.lam - lam)) <= 1e-6


@given(seed=st.integers(0, 10_000), n=st.integers(0, 1), scale=st.floats(0.1, 3.0))
def test_random_qp_agrees_with_oracle(seed, n, scale):
    prob, ref = make_bilevel_qp(seed, d_x=2, d_y=4, m=3, n=n)
    x = scale * np.random.default_rng(seed).normal(size=2)
    sol = solve_lower(prob, x)
    y, lam, nu = ref(x)
    assert np.max(np.abs(sol.y_star - y)) <= 1e-7
    assert np.max(np.abs(sol.nu - nu), initial=0.0) <= 1e-6
    res = kkt_residuals(prob, x, sol.y_star, sol.lam, sol.nu)
    assert max(abs(v) for v in res.values()) <= 1e-8
    assert np.all(sol.lam >= 0)
    assert np.max(np.abs(sol.lam * prob.p(x, sol.y_star))) <= 1e-8


def test_warm_start_reproduces_cold_solution():
    prob, _ = make_bilevel_qp(5)
    x = np.array([0.3, -0.2])
    cold = solve_lower(prob, x)
    warm = solve_lower(prob, x + 1e-3, warm_start=cold)
    cold2 = solve_lower(prob, x + 1e-3)
    assert warm.y_star == pytest.approx(cold2.y_star, abs=1e-8)
    assert warm.iterations <= cold2.iterations


def _one_dim(p, jac, m):
    return BilevelProblem(
        d_x=1, d_y=1, m=m, mu=2.0,
        f=lambda x, y: y[0], grad_x_f=lambda x, y: [0.0], grad_y_f=lambda x, y: [1.0],
        g=lambda x, y: (y[0] - 1.0) ** 2, grad_y_g=lambda x, y: [2 * (y[0] - 1.0)],
        hess_yy_g=lambda x, y: [[2.0]], hess_xy_g=lambda x, y: [[0.0]],
        p=p, jac_y_p=lambda x, y: jac, jac_x_p=lambda x, y: np.zeros((m, 1)),
    )


def test_infeasible_lower_level_detected():
    prob = _one_dim(lambda x, y: np.array([y[0] + 1.0, 1.0 - y[0]]), np.array([[1.0], [-1.0]]), 2)
    with pytest.raises(InfeasibleLowerLevel):
        solve_lower(prob, [0.0])


def test_duplicate_active_constraints_violate_licq():
    prob = _one_dim(lambda x, y: np.array([y[0], y[0]]), np.array([[1.0], [1.0]]), 2)
    with pytest.raises(LicqViolation):
        solve_lower(prob, [0.0])
    sol = solve_lower(prob, [0.0], opts=SolverOpts(check_licq=False))
    assert sol.y_star[0] == pytest.approx(0.0, abs=1e-7)


def test_classification_requires_converged_solution(ex1):
    sol = solve_lower(ex1, [0.3])
    sol.converged = False
    with pytest.raises(ValueError):
        classify_active_sets(ex1, [0.3], sol)
