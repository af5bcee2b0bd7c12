import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from bilevel_gam.problems import make_bilevel_qp, make_example1

settings.register_profile(
    "repo", deadline=None, max_examples=40, derandomize=True,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("repo")


@pytest.fixture
def ex1():
    return make_example1()


@pytest.fixture
def qp0():
    return make_bilevel_qp(0)


def unconstrained_qp(seed=0, d_x=2, d_y=3):
    """Random unconstrained QP: y*(x) = -Q^-1 (C x + c0), closed form."""
    from bilevel_gam.problems import qp_problem

    rng = np.random.default_rng(seed)
    M = rng.normal(size=(d_y, d_y))
    Q = M @ M.T / d_y + np.eye(d_y)
    C = rng.normal(size=(d_y, d_x))
    c0 = rng.normal(size=d_y)
    T = rng.normal(size=(d_y, d_x))
    t0 = rng.normal(size=d_y)
    z = np.zeros
    prob = qp_problem(Q, C, c0, z((0, d_y)), z((0, d_x)), z(0), z((0, d_y)), z((0, d_x)), z(0), T, t0, rho=0.1)
    return prob, Q, C, c0, T, t0


# acceptance criteria report: test_acceptance appends (label, ok, detail)
ACCEPTANCE_RESULTS: list = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for label, ok, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {label}: {detail}")
