import numpy as np
import pytest

from bilevel_gam.errors import DegenerateKernel
from bilevel_gam.lower import classify_active_sets, solve_lower
from bilevel_gam.oracle import exhaustive_qp, fd_y_star_jacobian
from bilevel_gam.problems import (
    PolynomialKernel,
    corrupt_labels,
    linear_kernel,
    load_dataset_csv,
    make_bilevel_qp,
    make_classification,
    make_hyperclean,
    make_svm_hyperopt,
)
from bilevel_gam.sensitivity import kkt_gradient


def test_example1_accessors(ex1):
    assert ex1.y_star_exact(-2) == 4 and ex1.y_star_exact(-0.5) == 0.5 and ex1.y_star_exact(0.5) == 0.25
    assert ex1.lambda_exact(-0.5) == 0.5 and ex1.lambda_exact(0.5) == 0 and ex1.lambda_exact(-1) == 0
    assert (ex1.d_x, ex1.d_y, ex1.m, ex1.n) == (1, 1, 1, 0)


def test_unconstrained_qp_closed_form():
    prob, ref = make_bilevel_qp(3, m=0, n=0)
    Q, C, c0 = (prob.meta["qp"][k] for k in ("Q", "C", "c0"))
    x = np.array([0.5, -1.0])
    assert np.allclose(solve_lower(prob, x).y_star, -np.linalg.solve(Q, C @ x + c0), atol=1e-10)


def test_qp_dimension_guard():
    with pytest.raises(ValueError):
        make_bilevel_qp(0, d_y=2, m=2, n=1)


def test_qp_seed_sweep_gradients_match_fd():
    checked = 0
    for seed in range(20):
        prob, _ = make_bilevel_qp(seed)
        x = np.random.default_rng(100 + seed).normal(size=2)
        sol = solve_lower(prob, x)
        sets = classify_active_sets(prob, x, sol)
        if not sets.scsc:
            continue
        checked += 1
        gy = kkt_gradient(prob, x, sol, sets).grad_y_star
        fd = fd_y_star_jacobian(prob, x)
        assert np.max(np.abs(gy - fd)) <= 1e-5 * max(1.0, np.max(np.abs(fd)))
    assert checked >= 15


def _separable():
    Z = np.array([[2.0, 0.5], [3.0, -0.5], [-2.0, 0.3], [-3.0, -0.2]])
    l = np.array([1.0, 1.0, -1.0, -1.0])
    return Z, l


def test_separable_toy_primal_matches_qp_oracle():
    Z, l = _separable()
    prob = make_svm_hyperopt((Z, l), (Z, l))
    c = np.zeros(4)
    sol = solve_lower(prob, c)
    svm = prob.meta["svm"]
    assert svm.accuracy(c, sol.y_star, Z, l) == 1.0
    xi = svm.training_slacks(c, sol.y_star)
    # squared slack penalty: xi_i = lam_i / C_i, with C = exp(c) = 1
    assert np.allclose(xi, sol.lam, atol=1e-8)
    assert np.all(l * svm.decision(c, sol.y_star, Z) >= 1 - xi - 1e-8)
    # primal is a QP in (w, b, xi)
    Q = np.diag([1.0, 1.0, 1e-4, 1, 1, 1, 1])
    G = prob.jac_y_p(c, sol.y_star)
    y, lam, _ = exhaustive_qp(Q, np.zeros(7), G, -np.ones(4))
    assert np.max(np.abs(sol.y_star - y)) <= 1e-7
    assert np.max(np.abs(sol.lam - lam)) <= 1e-6


def test_polynomial_dual_three_points_kkt():
    tr = make_classification(3, 2, seed=1)
    va = make_classification(6, 2, seed=2)
    prob = make_svm_hyperopt(tr, va, kernel=PolynomialKernel(gamma=1, r=1, degree=3))
    sol = solve_lower(prob, np.zeros(3))
    assert sol.kkt_residual <= 1e-9
    assert prob.n == 1 and abs(tr[1] @ sol.y_star) <= 1e-9


def test_linear_strong_duality():
    tr = make_classification(8, 2, seed=3)
    va = make_classification(6, 2, seed=4)
    c = np.random.default_rng(0).normal(size=8) * 0.5
    # the primal's bias regularizer vanishes in the limit the dual describes
    primal = make_svm_hyperopt(tr, va, mu_b=1e-8)
    dual = make_svm_hyperopt(tr, va, kernel=linear_kernel)
    sp = solve_lower(primal, c)
    sd = solve_lower(dual, c)
    assert abs(primal.g(c, sp.y_star) + dual.g(c, sd.y_star)) <= 1e-6
    w, b = primal.meta["svm"].weights(c, sp.y_star)
    alpha, bd = dual.meta["svm"].weights(c, sd.y_star)
    assert np.allclose(w, (alpha * tr[1]) @ tr[0], atol=1e-6) and b == pytest.approx(bd, abs=1e-6)


def test_dual_prediction_matches_primal_prediction():
    tr = make_classification(8, 2, seed=3)
    va = make_classification(12, 2, seed=4)
    c = np.zeros(8)
    p = make_svm_hyperopt(tr, va, mu_b=1e-8)
    d = make_svm_hyperopt(tr, va, kernel=linear_kernel)
    yp, yd = solve_lower(p, c).y_star, solve_lower(d, c).y_star
    assert np.allclose(p.meta["svm"].decision(c, yp, va[0]), d.meta["svm"].decision(c, yd, va[0]), atol=1e-6)


def test_degenerate_kernel_rejected():
    tr = make_classification(5, 2, seed=0)
    with pytest.raises(DegenerateKernel):
        make_svm_hyperopt(tr, tr, kernel=lambda A, B: -(A @ B.T))


def test_labels_validated():
    Z, l = _separable()
    with pytest.raises(ValueError):
        make_svm_hyperopt((Z, np.array([1, 0, 1, -1])), (Z, l))


def test_upper_loss_finite_at_zero_weights():
    Z, l = _separable()
    prob = make_svm_hyperopt((Z, l), (Z, l))
    y = np.zeros(prob.d_y)
    assert np.isfinite(prob.f(np.zeros(4), y)) and np.all(np.isfinite(prob.grad_y_f(np.zeros(4), y)))


def test_hyperclean_instance():
    prob, mask = make_hyperclean(0)
    assert prob.d_x == 20 and mask.sum() == 8 and prob.meta["flipped"] is mask
    l, m2 = corrupt_labels(np.ones(10), 0.4, seed=3)
    assert m2.sum() == 4 and np.all(l[m2] == -1)


def test_csv_loader(tmp_path):
    good = tmp_path / "d.csv"
    good.write_text("a,b,label\n1,2,1\n3,4,-1\n")
    Z, l = load_dataset_csv(good)
    assert Z.shape == (2, 2) and list(l) == [1, -1]
    (tmp_path / "nolabel.csv").write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        load_dataset_csv(tmp_path / "nolabel.csv")
    (tmp_path / "bad.csv").write_text("a,label\n1,2\n")
    with pytest.raises(ValueError):
        load_dataset_csv(tmp_path / "bad.csv")
