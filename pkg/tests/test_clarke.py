import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bilevel_gam.clarke import (
    BallClassification,
    build_subgradient_set,
    check_differentiability_on_ball,
    estimate_lipschitz,
    lipschitz_near,
    min_norm_element,
)
from bilevel_gam.errors import AllSubsetsSingular
from bilevel_gam.lower import ActiveSetClassification, classify_active_sets, solve_lower
from bilevel_gam.oracle import brute_min_norm, sample_ball_gradients
from bilevel_gam.problems import make_bilevel_qp, make_degenerate_qp
from bilevel_gam.sensitivity import KktSensitivity, sensitivity_at

from conftest import unconstrained_qp

DELTA = 1e-3


def _setup(prob, x):
    x = np.atleast_1d(np.asarray(x, float))
    sol = solve_lower(prob, x)
    return x, sol, classify_active_sets(prob, x, sol)


def test_lipschitz_estimates_example1(ex1):
    for x, l_lam, l_p in [(-0.5, DELTA, DELTA), (1.0, DELTA, 3 + DELTA)]:
        sol, _, sens = sensitivity_at(ex1, [x])
        a, b = estimate_lipschitz(ex1, [x], sol, sens, DELTA)
        assert a[0] == pytest.approx(l_lam, abs=1e-9) and b[0] == pytest.approx(l_p, abs=1e-9)


def test_lipschitz_zero_gradient_gives_delta(ex1):
    sol = solve_lower(ex1, [-0.5])
    sens = KktSensitivity(np.zeros((1, 1)), np.zeros((1, 1)), np.zeros((0, 1)), True)
    ex1.jac_x_p.raw = lambda x, y: np.zeros((1, 1))
    ex1.jac_y_p.raw = lambda x, y: np.zeros((1, 1))
    a, b = estimate_lipschitz(ex1, [-0.5], sol, sens, DELTA)
    assert a[0] == DELTA and b[0] == DELTA


def test_ball_classification_example1(ex1):
    x, sol, sets = _setup(ex1, -0.5)
    cls = check_differentiability_on_ball(ex1, x, sol, sets, lipschitz_near(ex1, x, sol, sets, DELTA), 0.1)
    assert cls.I_plus == (0,) and cls.I_eps == () and cls.differentiable_on_ball

    x, sol, sets = _setup(ex1, -1.0)
    cls = check_differentiability_on_ball(ex1, x, sol, sets, lipschitz_near(ex1, x, sol, sets, DELTA), 0.1)
    assert cls.I_eps == (0,) and not cls.differentiable_on_ball


def test_unconstrained_always_differentiable():
    prob = unconstrained_qp()[0]
    x, sol, sets = _setup(prob, [0.2, 0.3])
    cls = check_differentiability_on_ball(prob, x, sol, sets, lipschitz_near(prob, x, sol, sets), 10.0)
    assert cls.differentiable_on_ball and cls.I_eps == ()


@given(seed=st.integers(0, 3000), eps=st.floats(1e-4, 2.0))
def test_partition_and_monotonicity(seed, eps):
    prob, _ = make_bilevel_qp(seed, d_y=4, m=4)
    x, sol, sets = _setup(prob, np.random.default_rng(seed).normal(size=2))
    lip = lipschitz_near(prob, x, sol, sets)
    big = check_differentiability_on_ball(prob, x, sol, sets, lip, eps)
    small = check_differentiability_on_ball(prob, x, sol, sets, lip, eps / 2)
    for cls in (big, small):
        parts = [set(cls.I_plus), set(cls.I_minus), set(cls.I_eps)]
        assert set.union(*parts) == set(range(prob.m))
        assert sum(len(p) for p in parts) == prob.m
    assert set(small.I_eps) <= set(big.I_eps)


def test_subgradient_set_example1(ex1):
    x0, sol, sets = _setup(ex1, -1 + 0.02)
    cls = check_differentiability_on_ball(ex1, x0, sol, sets, lipschitz_near(ex1, x0, sol, sets), 0.1)
    sub = build_subgradient_set(ex1, x0, sol, cls)
    assert len(sub.members) == 2 and not sub.truncated
    assert sorted(float(m[0]) for m in sub.members) == pytest.approx(sorted([2 * x0[0], -1.0]), abs=1e-6)
    assert sub.min_norm_value == pytest.approx(1.0, abs=1e-9)


def test_subgradient_set_at_minus_one_matches_eps_subdifferential(ex1):
    x0, sol, sets = _setup(ex1, -1.0)
    cls = check_differentiability_on_ball(ex1, x0, sol, sets, lipschitz_near(ex1, x0, sol, sets), 0.1)
    sub = build_subgradient_set(ex1, x0, sol, cls)
    assert sorted(float(m[0]) for m in sub.members) == pytest.approx([-2.0, -1.0], abs=1e-6)


def test_subgradient_set_requires_ambiguity(ex1):
    x0, sol, sets = _setup(ex1, 1.0)
    cls = BallClassification((), (0,), (), np.ones(1), np.ones(1))
    with pytest.raises(ValueError):
        build_subgradient_set(ex1, x0, sol, cls)


@pytest.mark.parametrize("seed", [0, 1])
def test_degenerate_qp_members_match_sampled_clusters(seed):
    prob, x0 = make_degenerate_qp(seed)
    x0, sol, sets = _setup(prob, x0)
    eps = 1e-4
    cls = check_differentiability_on_ball(prob, x0, sol, sets, lipschitz_near(prob, x0, sol, sets), eps)
    sub = build_subgradient_set(prob, x0, sol, cls)
    grads, pts = sample_ball_gradients(prob, x0, eps, 200, seed=seed, return_points=True)
    labels = []
    for x in pts:
        s = solve_lower(prob, x)
        labels.append(tuple(j for j in cls.I_eps if s.lam[j] > 0))
    for S, member in zip(sub.subset_labels, sub.members):
        cluster = [g for g, lab in zip(grads, labels) if lab == S]
        assert len(cluster) > 20
        assert np.max(np.abs(np.mean(cluster, axis=0) - member)) <= 1e-3


def test_truncation_keeps_closest_to_degenerate():
    prob, _ = make_bilevel_qp(1, d_y=5, m=4)
    x, sol, sets = _setup(prob, [0.1, 0.2])
    cls = BallClassification((), (), (0, 1, 2, 3), np.ones(4), np.ones(4))
    sub = build_subgradient_set(prob, x, sol, cls, max_subsets=4)
    assert sub.truncated and len(sub.members) + len(sub.skipped) == 4
    p = prob.p(x, sol.y_star)
    closest = sorted(range(4), key=lambda j: abs(sol.lam[j]) + abs(p[j]))[:2]
    varied = set().union(*map(set, sub.subset_labels)) - set.intersection(*map(set, sub.subset_labels))
    assert varied == set(closest)


def test_all_subsets_singular():
    from bilevel_gam.lower import SolverOpts
    from bilevel_gam.problem import BilevelProblem

    # constraints 0 and 1 are copies of each other
    prob = BilevelProblem(
        d_x=1, d_y=1, m=3, mu=2.0,
        f=lambda x, y: y[0], grad_x_f=lambda x, y: [0.0], grad_y_f=lambda x, y: [1.0],
        g=lambda x, y: (y[0] - x[0]) ** 2, grad_y_g=lambda x, y: [2 * (y[0] - x[0])],
        hess_yy_g=lambda x, y: [[2.0]], hess_xy_g=lambda x, y: [[-2.0]],
        p=lambda x, y: np.array([y[0], y[0], y[0] - 5.0]), jac_y_p=lambda x, y: np.ones((3, 1)),
        jac_x_p=lambda x, y: np.zeros((3, 1)),
    )
    x = np.array([1.0])
    sol = solve_lower(prob, x, opts=SolverOpts(check_licq=False))
    sub = build_subgradient_set(prob, x, sol, BallClassification((), (2,), (0, 1), np.ones(3), np.ones(3)))
    assert (0, 1) in sub.skipped and len(sub.members) == 3
    with pytest.raises(AllSubsetsSingular):
        build_subgradient_set(prob, x, sol, BallClassification((0, 1), (), (2,), np.ones(3), np.ones(3)))


# ----------------------------------------------------------------- min-norm

def test_min_norm_examples():
    g, v = min_norm_element([[2.0, 0.0], [0.0, 2.0]])
    assert np.allclose(g, [1.0, 1.0], atol=1e-12) and v == pytest.approx(np.sqrt(2))
    g, v = min_norm_element([[1.0, 1.0], [-1.0, -1.0], [3.0, 0.0]])
    assert v <= 1e-12
    g, v = min_norm_element([[0.3, -0.4]])
    assert np.array_equal(g, [0.3, -0.4]) and v == pytest.approx(0.5)
    with pytest.raises(ValueError):
        min_norm_element([])


def test_min_norm_matches_grid_oracle():
    rng = np.random.default_rng(3)
    for _ in range(5):
        pts = rng.normal(size=(5, 3))
        g, _ = min_norm_element(pts)
        assert np.max(np.abs(g - brute_min_norm(pts, 1e-3))) <= 2e-3


@given(
    k=st.integers(1, 8), d=st.integers(1, 5), seed=st.integers(0, 10_000),
    shift=st.floats(-3, 3),
)
def test_min_norm_optimality(k, d, seed, shift):
    pts = np.random.default_rng(seed).normal(size=(k, d)) + shift
    g, v = min_norm_element(pts)
    assert np.all(pts @ g >= g @ g - 1e-9)
    assert np.all(v <= np.linalg.norm(pts, axis=1) + 1e-12)


def test_min_norm_duplicate_and_collinear_points():
    pts = [[1.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]]
    g, v = min_norm_element(pts)
    assert np.allclose(g, [1.0, 0.0])
