"""Built-in problem instances.

* Example 1: scalar problem with a known piecewise solution and two kinks.
* Random bilevel QPs with an exhaustive active-set reference solver.
* A QP with a weakly active constraint at a known point.
* SVM hyperparameter optimization (linear primal and kernelized dual) and
  the data hyper-cleaning variant on synthetic data.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DegenerateKernel
from .oracle import exhaustive_qp
from .problem import BilevelProblem


# --------------------------------------------------------------- Example 1

@dataclass
class Example1Problem(BilevelProblem):
    """``Phi(x) = y*(x)``, ``y*(x) = argmin {(y - x^2)^2 : -x - y <= 0}``."""

    @staticmethod
    def y_star_exact(x):
        x = float(np.asarray(x).reshape(-1)[0])
        return -x if -1.0 <= x <= 0.0 else x * x

    @staticmethod
    def lambda_exact(x):
        x = float(np.asarray(x).reshape(-1)[0])
        return -2.0 * x * (1.0 + x) if -1.0 <= x <= 0.0 else 0.0


def make_example1() -> Example1Problem:
    return Example1Problem(
        d_x=1, d_y=1, m=1, n=0, mu=2.0, name="example1",
        f=lambda x, y: y[0],
        grad_x_f=lambda x, y: np.zeros(1),
        grad_y_f=lambda x, y: np.ones(1),
        g=lambda x, y: (y[0] - x[0] ** 2) ** 2,
        grad_y_g=lambda x, y: np.array([2.0 * (y[0] - x[0] ** 2)]),
        hess_yy_g=lambda x, y: np.array([[2.0]]),
        hess_xy_g=lambda x, y: np.array([[-4.0 * x[0]]]),
        p=lambda x, y: np.array([-x[0] - y[0]]),
        jac_y_p=lambda x, y: np.array([[-1.0]]),
        jac_x_p=lambda x, y: np.array([[-1.0]]),
    )


# ----------------------------------------------------------------- QPs

def qp_problem(Q, C, c0, G, H, h0, A, B, b0, T, t0, rho=0.1, name="qp") -> BilevelProblem:
    """Bilevel QP.

    Lower: ``min 1/2 y'Qy + (Cx + c0)'y  s.t.  Gy <= Hx + h0,  Ay = Bx + b0``.
    Upper: ``f = 1/2 |y - Tx - t0|^2 + rho/2 |x|^2``.
    """
    Q = np.asarray(Q, float)
    d_y, d_x = np.asarray(C).shape
    m, n = len(h0), len(b0)
    G = np.asarray(G, float).reshape(m, d_y)
    H = np.asarray(H, float).reshape(m, d_x)
    A = np.asarray(A, float).reshape(n, d_y)
    B = np.asarray(B, float).reshape(n, d_x)
    T = np.asarray(T, float).reshape(d_y, d_x)
    mu = float(np.linalg.eigvalsh(0.5 * (Q + Q.T)).min())

    def resid(x, y):
        return y - T @ x - t0

    prob = BilevelProblem(
        d_x=d_x, d_y=d_y, m=m, n=n, mu=mu, name=name,
        f=lambda x, y: 0.5 * resid(x, y) @ resid(x, y) + 0.5 * rho * x @ x,
        grad_x_f=lambda x, y: -T.T @ resid(x, y) + rho * x,
        grad_y_f=resid,
        g=lambda x, y: 0.5 * y @ Q @ y + (C @ x + c0) @ y,
        grad_y_g=lambda x, y: Q @ y + C @ x + c0,
        hess_yy_g=lambda x, y: Q,
        hess_xy_g=lambda x, y: C,
        p=lambda x, y: G @ y - H @ x - h0,
        jac_y_p=lambda x, y: G,
        jac_x_p=lambda x, y: -H,
        q=lambda x, y: A @ y - B @ x - b0,
        jac_y_q=lambda x, y: A,
        jac_x_q=lambda x, y: -B,
    )
    prob.meta["qp"] = dict(Q=Q, C=C, c0=c0, G=G, H=H, h0=h0, A=A, B=B, b0=b0, T=T, t0=t0, rho=rho)
    return prob


def qp_reference_solver(prob: BilevelProblem):
    """Exhaustive active-set solver for a problem built by :func:`qp_problem`."""
    d = prob.meta["qp"]

    def solve(x):
        x = np.asarray(x, float)
        return exhaustive_qp(d["Q"], d["C"] @ x + d["c0"], d["G"], d["H"] @ x + d["h0"],
                             d["A"], d["B"] @ x + d["b0"])

    return solve


def make_bilevel_qp(seed: int, d_x: int = 2, d_y: int = 3, m: int = 2, n: int = 0):
    """Random strongly convex bilevel QP feasible for every ``x``.

    The minimum-norm solution of the equalities is kept strictly feasible for
    the inequalities at every ``x`` by tying ``H`` to ``G A^+ B``; generic
    random data then gives LICQ for any active set of size ``<= d_y - n``.
    Returns ``(problem, reference_solver)``.
    """
    if m + n > d_y:
        raise ValueError("need m + n <= d_y for LICQ to be possible")
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(d_y, d_y))
    Q = M @ M.T / d_y + np.eye(d_y)
    C = rng.normal(size=(d_y, d_x))
    c0 = rng.normal(size=d_y)
    G = rng.normal(size=(m, d_y))
    A = rng.normal(size=(n, d_y))
    B = rng.normal(size=(n, d_x))
    b0 = rng.normal(size=n)
    if n:
        Ap = np.linalg.pinv(A)
        H = G @ Ap @ B
        h_base = G @ Ap @ b0
    else:
        H = np.zeros((m, d_x))
        h_base = np.zeros(m)
    h0 = h_base + rng.uniform(0.1, 1.0, size=m)
    T = rng.normal(size=(d_y, d_x))
    t0 = rng.normal(size=d_y)
    prob = qp_problem(Q, C, c0, G, H, h0, A, B, b0, T, t0, name=f"qp-{seed}")
    return prob, qp_reference_solver(prob)


def make_degenerate_qp(seed: int = 0, d_x: int = 2, d_y: int = 3):
    """QP whose first constraint is weakly active (``p = 0``, ``lam = 0``) at ``x0``.

    The lower objective is ``1/2 (y - Px)' Q (y - Px)`` so the unconstrained
    minimizer is ``Px``; ``h0`` is set so that ``G[0] P x0 = h0[0]``. The
    second constraint has a unit margin at ``x0``. Returns ``(problem, x0)``.
    """
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(d_y, d_y))
    Q = M @ M.T / d_y + np.eye(d_y)
    P = rng.normal(size=(d_y, d_x))
    x0 = rng.normal(size=d_x)
    G = rng.normal(size=(2, d_y))
    h0 = G @ P @ x0
    h0[1] += 1.0
    T = rng.normal(size=(d_y, d_x))
    t0 = rng.normal(size=d_y)
    prob = qp_problem(Q, -Q @ P, np.zeros(d_y), G, np.zeros((2, d_x)), h0,
                      np.zeros((0, d_y)), np.zeros((0, d_x)), np.zeros(0), T, t0,
                      name=f"degenerate-qp-{seed}")
    return prob, x0


# ----------------------------------------------------------------- SVMs

@dataclass(frozen=True)
class PolynomialKernel:
    gamma: float = 1.0
    r: float = 1.0
    degree: int = 3

    def __call__(self, A, B):
        return (self.gamma * np.asarray(A) @ np.asarray(B).T + self.r) ** self.degree


def linear_kernel(A, B):
    return np.asarray(A) @ np.asarray(B).T


def _sigma(u):
    # (1 - e^-u) / (1 + e^-u)
    return np.tanh(0.5 * u)


def _dsigma(u):
    return 0.5 * (1.0 - np.tanh(0.5 * u) ** 2)


W_NORM_FLOOR = 1e-12


@dataclass
class SvmHyperopt:
    """Data and helpers behind an SVM hyperparameter problem.

    ``kernel`` is ``None`` for the linear primal formulation or a kernel
    callable (e.g. :class:`PolynomialKernel`) for the dual formulation.
    """

    Z_train: np.ndarray
    l_train: np.ndarray
    Z_val: np.ndarray
    l_val: np.ndarray
    kernel: Optional[object] = None
    mu_b: float = 1e-4

    @property
    def dual(self):
        return self.kernel is not None

    def weights(self, c, y):
        """Return ``(w, b)`` for the primal path; ``(alpha, b)`` for the dual path."""
        c = np.asarray(c, float)
        if not self.dual:
            D = self.Z_train.shape[1]
            return y[:D], float(y[D])
        alpha = y
        return alpha, self._dual_bias(c, alpha)[0]

    def _dual_bias(self, c, alpha):
        l = self.l_train
        K = self.kernel(self.Z_train, self.Z_train)
        a = alpha * l
        Ka = K @ a
        bi = l * (1.0 - np.exp(-c) * alpha) - Ka
        S = float(np.sum(alpha))
        if S <= 0:
            return 0.0, np.zeros_like(alpha), np.zeros_like(alpha)
        b = float(alpha @ bi / S)
        # d b / d alpha_j and d b / d c_j of the alpha-weighted support-vector average
        db_da = (bi - b) / S + (-alpha * l * np.exp(-c) - l * (K @ alpha)) / S
        db_dc = alpha * l * np.exp(-c) * alpha / S
        return b, db_da, db_dc

    def decision(self, c, y, Z):
        Z = np.asarray(Z, float)
        if not self.dual:
            w, b = self.weights(c, y)
            return Z @ w + b
        alpha, b = self.weights(c, y)
        return self.kernel(Z, self.Z_train) @ (alpha * self.l_train) + b

    def predict(self, c, y, Z):
        return np.where(self.decision(c, y, Z) >= 0, 1, -1)

    def accuracy(self, c, y, Z, l):
        return float(np.mean(self.predict(c, y, Z) == np.asarray(l)))

    def training_slacks(self, c, y):
        if not self.dual:
            D = self.Z_train.shape[1]
            return y[D + 1:]
        return np.exp(-np.asarray(c)) * y


def _linear_svm_problem(svm: SvmHyperopt) -> BilevelProblem:
    Z, l = svm.Z_train, svm.l_train
    Zv, lv = svm.Z_val, svm.l_val
    N, D = Z.shape
    d_y = D + 1 + N
    mu_b = svm.mu_b
    jac_p = np.hstack([-(l[:, None] * Z), -l[:, None], -np.eye(N)])

    def split(y):
        return y[:D], y[D], y[D + 1:]

    def g(c, y):
        w, b, xi = split(y)
        return 0.5 * w @ w + 0.5 * np.exp(c) @ (xi * xi) + 0.5 * mu_b * b * b

    def grad_y_g(c, y):
        w, b, xi = split(y)
        return np.concatenate([w, [mu_b * b], np.exp(c) * xi])

    def hess_yy_g(c, y):
        return np.diag(np.concatenate([np.ones(D), [mu_b], np.exp(c)]))

    def hess_xy_g(c, y):
        out = np.zeros((d_y, N))
        out[D + 1:, :] = np.diag(np.exp(c) * y[D + 1:])
        return out

    def val_terms(y):
        w, b, _ = split(y)
        nw = max(float(np.linalg.norm(w)), W_NORM_FLOOR)
        r = lv * (Zv @ w + b)
        return w, b, nw, r, -r / nw

    def f(c, y):
        return float(np.mean(_sigma(val_terms(y)[4])))

    def grad_y_f(c, y):
        w, b, nw, r, u = val_terms(y)
        s = _dsigma(u) / len(lv)
        du_dw = -(lv[:, None] * Zv) / nw
        if nw > W_NORM_FLOOR:
            du_dw = du_dw + np.outer(r, w) / nw ** 3
        du_db = -lv / nw
        return np.concatenate([s @ du_dw, [s @ du_db], np.zeros(N)])

    return BilevelProblem(
        d_x=N, d_y=d_y, m=N, n=0, mu=min(1.0, mu_b), name="svm-linear",
        f=f, grad_x_f=lambda c, y: np.zeros(N), grad_y_f=grad_y_f,
        g=g, grad_y_g=grad_y_g, hess_yy_g=hess_yy_g, hess_xy_g=hess_xy_g,
        p=lambda c, y: 1.0 - y[D + 1:] - l * (Z @ y[:D] + y[D]),
        jac_y_p=lambda c, y: jac_p,
        jac_x_p=lambda c, y: np.zeros((N, N)),
        meta={"svm": svm},
    )


def _dual_svm_problem(svm: SvmHyperopt) -> BilevelProblem:
    Z, l = svm.Z_train, svm.l_train
    Zv, lv = svm.Z_val, svm.l_val
    N = Z.shape[0]
    K = svm.kernel(Z, Z)
    Qm = (l[:, None] * l[None, :]) * K
    Kv = svm.kernel(Zv, Z)
    eig = np.linalg.eigvalsh(Qm + np.eye(N))
    if eig.min() <= 0:
        raise DegenerateKernel(f"Q + C^-1 is not positive definite (min eigenvalue {eig.min():.3e})")
    if np.linalg.eigvalsh(0.5 * (Qm + Qm.T)).min() < -1e-8 * max(1.0, eig.max()):
        raise DegenerateKernel("kernel matrix is not positive semidefinite")

    def val_terms(c, alpha):
        b, db_da, db_dc = svm._dual_bias(c, alpha)
        h = Kv @ (alpha * l) + b
        nw2 = float(alpha @ Qm @ alpha)
        nw = max(np.sqrt(max(nw2, 0.0)), W_NORM_FLOOR)
        u = -lv * h / nw
        return b, db_da, db_dc, h, nw, u

    def f(c, alpha):
        return float(np.mean(_sigma(val_terms(c, alpha)[5])))

    def grad_y_f(c, alpha):
        b, db_da, _, h, nw, u = val_terms(c, alpha)
        s = _dsigma(u) / len(lv)
        dh_da = Kv * l[None, :] + db_da[None, :]
        du_da = -(lv[:, None] * dh_da) / nw
        if nw > W_NORM_FLOOR:
            du_da = du_da + np.outer(lv * h, Qm @ alpha) / nw ** 3
        return s @ du_da

    def grad_x_f(c, alpha):
        _, _, db_dc, _, nw, u = val_terms(c, alpha)
        s = _dsigma(u) / len(lv)
        return float(s @ (-lv / nw)) * db_dc

    return BilevelProblem(
        d_x=N, d_y=N, m=N, n=1, mu=float(eig.min()), name="svm-dual",
        f=f, grad_x_f=grad_x_f, grad_y_f=grad_y_f,
        g=lambda c, a: 0.5 * a @ (Qm @ a) + 0.5 * np.exp(-c) @ (a * a) - np.sum(a),
        grad_y_g=lambda c, a: Qm @ a + np.exp(-c) * a - 1.0,
        hess_yy_g=lambda c, a: Qm + np.diag(np.exp(-c)),
        hess_xy_g=lambda c, a: np.diag(-np.exp(-c) * a),
        p=lambda c, a: -a,
        jac_y_p=lambda c, a: -np.eye(N),
        jac_x_p=lambda c, a: np.zeros((N, N)),
        q=lambda c, a: np.array([l @ a]),
        jac_y_q=lambda c, a: l[None, :].astype(float),
        jac_x_q=lambda c, a: np.zeros((1, N)),
        meta={"svm": svm},
    )


def make_svm_hyperopt(train, val, kernel=None, mu_b: float = 1e-4) -> BilevelProblem:
    """SVM penalty-tuning problem; ``x = c`` holds one log-penalty per training point.

    ``train`` and ``val`` are ``(Z, labels)`` pairs with labels in {-1, +1}.
    ``kernel=None`` uses the linear primal; any kernel callable switches to
    the dual with ``C^-1 = diag(exp(-c))``.
    """
    Z, l = (np.asarray(a, float) for a in train)
    Zv, lv = (np.asarray(a, float) for a in val)
    for lab in (l, lv):
        if not np.all(np.isin(lab, (-1.0, 1.0))):
            raise ValueError("labels must be -1 or +1")
    svm = SvmHyperopt(Z, l, Zv, lv, kernel=kernel, mu_b=mu_b)
    return _dual_svm_problem(svm) if svm.dual else _linear_svm_problem(svm)


def make_classification(n: int, d: int = 2, seed: int = 0, separation: float = 2.0):
    """Two Gaussian blobs centred at ``+-separation/2`` along the first axis."""
    rng = np.random.default_rng(seed)
    l = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
    rng.shuffle(l)
    Z = rng.normal(size=(n, d))
    Z[:, 0] += 0.5 * separation * l
    return Z, l


def corrupt_labels(l, rate: float, seed: int = 0):
    """Flip ``round(rate * len(l))`` labels; returns ``(labels, flipped_mask)``."""
    rng = np.random.default_rng(seed)
    l = np.array(l, float)
    k = int(round(rate * len(l)))
    idx = rng.choice(len(l), size=k, replace=False)
    mask = np.zeros(len(l), bool)
    mask[idx] = True
    l[mask] *= -1
    return l, mask


def make_svm_toy(seed: int = 0, n_train: int = 10, n_val: int = 10, d: int = 2, kernel=None):
    train = make_classification(n_train, d, seed=seed)
    val = make_classification(n_val, d, seed=seed + 1000)
    return make_svm_hyperopt(train, val, kernel=kernel)


def make_hyperclean(seed: int = 0, n_train: int = 20, n_val: int = 20, d: int = 5, rate: float = 0.4):
    """Data hyper-cleaning: training labels corrupted at ``rate``, clean validation.

    Returns ``(problem, flipped_mask)``.
    """
    Z, l = make_classification(n_train, d, seed=seed, separation=3.0)
    l_bad, mask = corrupt_labels(l, rate, seed=seed + 1)
    val = make_classification(n_val, d, seed=seed + 2000, separation=3.0)
    prob = make_svm_hyperopt((Z, l_bad), val)
    prob.name = "hyperclean"
    prob.meta["flipped"] = mask
    return prob, mask


def load_dataset_csv(path):
    """Read a ``(features, label)`` CSV with a header and a ``label`` column in {-1, 1}."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "label" not in reader.fieldnames:
            raise ValueError(f"{path}: missing 'label' column")
        cols = [c for c in reader.fieldnames if c != "label"]
        rows = list(reader)
    Z = np.array([[float(r[c]) for c in cols] for r in rows], float).reshape(len(rows), len(cols))
    l = np.array([float(r["label"]) for r in rows])
    if not np.all(np.isin(l, (-1.0, 1.0))):
        raise ValueError(f"{path}: labels must be -1 or 1")
    return Z, l
