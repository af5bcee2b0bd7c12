"""Implicit differentiation of the lower-level KKT system.

Every derivative here is a solve with a saddle matrix

    M = [[H,   R_y^T],
         [R_y, 0    ]]

where ``H`` is the Lagrangian Hessian in ``y`` and ``R_y`` stacks the
``y``-gradients of the constraints treated as equalities (strictly active
inequalities, all equalities, optionally extra inequalities). The right-hand
side is ``[hess_xy_L; R_x]`` and the solution is ``-M^{-1} [hess_xy_L; R_x]``;
its top ``d_y`` rows are the Jacobian of ``y*`` and the remaining rows are the
multiplier Jacobians.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.linalg

from .errors import CgStalled, ScscViolated, SingularKktMatrix, SingularSchur
from .lower import ActiveSetClassification, LowerSolution, SolverOpts, classify_active_sets, solve_lower
from .problem import BilevelProblem, EvalCache

CG_THRESHOLD = 200
COND_LIMIT = 1e12


@dataclass
class KktSensitivity:
    grad_y_star: np.ndarray  # d_y x d_x
    grad_lambda: np.ndarray  # m x d_x, zero rows off the active set
    grad_nu: np.ndarray  # n x d_x
    scsc_holds: bool


@dataclass
class DirectionalDerivative:
    direction: np.ndarray
    d_y_star: np.ndarray
    d_lambda: np.ndarray
    d_nu: np.ndarray
    j0_plus: tuple


# ------------------------------------------------------------ linear algebra

def conjugate_gradient(H, B, tol=1e-10, max_iter=None):
    """Solve ``H X = B`` column by column with Jacobi-preconditioned CG.

    All columns iterate in lockstep; a column stops updating once its
    residual is below ``tol * |b_col|``. Returns ``(X, iterations)``.
    """
    H = np.asarray(H, float)
    B = np.asarray(B, float)
    vec = B.ndim == 1
    if vec:
        B = B[:, None]
    d = H.shape[0]
    max_iter = max_iter or 10 * d + 50
    diag = np.diag(H).copy()
    if np.any(diag <= 0):
        raise SingularKktMatrix("Hessian block has a nonpositive diagonal; not positive definite")
    Minv = 1.0 / diag
    X = np.zeros_like(B)
    R = B.copy()
    Zp = Minv[:, None] * R
    P = Zp.copy()
    rz = np.einsum("ij,ij->j", R, Zp)
    bnorm = np.linalg.norm(B, axis=0)
    target = tol * bnorm
    active = bnorm > 0
    it = 0
    while np.any(active) and it < max_iter:
        it += 1
        HP = H @ P
        pHp = np.einsum("ij,ij->j", P, HP)
        if np.any(pHp[active] <= 0):
            raise SingularKktMatrix("Hessian block is not positive definite (CG curvature <= 0)")
        alpha = np.where(active, rz / np.where(active, pHp, 1.0), 0.0)
        X += alpha * P
        R -= alpha * HP
        rnorm = np.linalg.norm(R, axis=0)
        active = active & (rnorm > target)
        Zp = Minv[:, None] * R
        rz_new = np.einsum("ij,ij->j", R, Zp)
        beta = np.where(active, rz_new / np.where(rz > 0, rz, 1.0), 0.0)
        P = Zp + beta * P
        rz = rz_new
    if np.any(active):
        worst = float(np.max(np.linalg.norm(B - H @ X, axis=0) / np.where(bnorm > 0, bnorm, 1.0)))
        raise CgStalled(f"CG stalled after {it} iterations with relative residual {worst:.2e}")
    return (X[:, 0] if vec else X), it


def _check_rows(R_y):
    if R_y.shape[0] == 0:
        return
    if R_y.shape[0] > R_y.shape[1]:
        raise SingularKktMatrix("more constraint rows than variables; LICQ fails")
    sv = np.linalg.svd(R_y, compute_uv=False)
    if sv[-1] <= 1e-10 * max(sv[0], 1e-300):
        raise SingularKktMatrix(f"constraint gradients are linearly dependent (sigma ratio {sv[-1] / sv[0]:.2e})")


def dense_saddle_solve(H, R_y, RHS_top, R_x):
    """Return ``-M^{-1} [RHS_top; R_x]`` via a symmetric indefinite (Bunch-Kaufman) solve."""
    H = np.asarray(H, float)
    R_y = np.asarray(R_y, float).reshape(-1, H.shape[0])
    RHS_top = np.asarray(RHS_top, float)
    R_x = np.asarray(R_x, float).reshape(R_y.shape[0], RHS_top.shape[1])
    _check_rows(R_y)
    d, k = H.shape[0], R_y.shape[0]
    M = np.zeros((d + k, d + k))
    M[:d, :d] = H
    M[:d, d:] = R_y.T
    M[d:, :d] = R_y
    if np.linalg.cond(M) > COND_LIMIT:
        raise SingularKktMatrix("saddle matrix is numerically singular")
    rhs = -np.vstack([RHS_top, R_x])
    return scipy.linalg.solve(M, rhs, assume_a="sym", check_finite=False)


def solve_saddle_block(H, R_y, RHS_top, R_x, cg_tol=1e-10, max_iter=None):
    """Block elimination of the saddle system with CG solves against ``H``.

    ``A = H^{-1} RHS_top`` and ``B = H^{-1} R_y^T`` come from CG; with
    ``S = R_y B`` the result is
    ``[-A + B S^{-1}(R_y A - R_x); -S^{-1}(R_y A - R_x)]``.
    """
    H = np.asarray(H, float)
    d = H.shape[0]
    R_y = np.asarray(R_y, float).reshape(-1, d)
    RHS_top = np.asarray(RHS_top, float)
    R_x = np.asarray(R_x, float).reshape(R_y.shape[0], RHS_top.shape[1])
    k = R_y.shape[0]
    sol, _ = conjugate_gradient(H, np.hstack([RHS_top, R_y.T]), tol=cg_tol, max_iter=max_iter)
    A = sol[:, :RHS_top.shape[1]]
    if k == 0:
        return -A
    B = sol[:, RHS_top.shape[1]:]
    S = R_y @ B
    if np.linalg.cond(S) > COND_LIMIT:
        raise SingularSchur("Schur complement R_y H^-1 R_y^T is numerically singular")
    T = np.linalg.solve(S, R_y @ A - R_x)
    return np.vstack([-A + B @ T, -T])


def solve_kkt_system(H, R_y, RHS_top, R_x, method="auto", cg_threshold=CG_THRESHOLD, cg_tol=1e-10):
    if method == "auto":
        method = "cg" if H.shape[0] > cg_threshold else "dense"
    if method == "cg":
        return solve_saddle_block(H, R_y, RHS_top, R_x, cg_tol=cg_tol)
    if method == "dense":
        return dense_saddle_solve(H, R_y, RHS_top, R_x)
    raise ValueError(f"unknown method {method!r}")


# ----------------------------------------------------------- sensitivities

def _augmented(prob, x, sol, ineq_rows, cache=None, method="auto"):
    """Solve the sensitivity system with ``ineq_rows`` inequalities and all equalities."""
    pt = (cache or EvalCache(1)).kkt_point(prob, x, sol.y_star, sol.lam, sol.nu)
    rows = list(ineq_rows)
    R_y = np.vstack([pt.jac_y_p[rows], pt.jac_y_q])
    R_x = np.vstack([pt.jac_x_p[rows], pt.jac_x_q])
    out = solve_kkt_system(pt.hess_yy_L, R_y, pt.hess_xy_L, R_x, method=method)
    d_y = prob.d_y
    return out[:d_y], out[d_y:d_y + len(rows)], out[d_y + len(rows):]


def kkt_gradient(
    prob: BilevelProblem,
    x,
    sol: LowerSolution,
    sets: ActiveSetClassification,
    cache: Optional[EvalCache] = None,
    method: str = "auto",
) -> KktSensitivity:
    """Jacobians of ``y*``, ``lambda`` and ``nu`` where strict complementarity holds."""
    if sets.J_zero:
        raise ScscViolated(f"weakly active constraints {sets.J_zero}; y* is not differentiable here")
    J_plus = list(sets.J_plus)
    gy, glam_plus, gnu = _augmented(prob, x, sol, J_plus, cache, method)
    grad_lambda = np.zeros((prob.m, prob.d_x))
    if J_plus:
        grad_lambda[J_plus] = glam_plus
    return KktSensitivity(grad_y_star=gy, grad_lambda=grad_lambda, grad_nu=gnu, scsc_holds=True)


def representative_gradient(
    prob: BilevelProblem,
    x,
    sol: LowerSolution,
    I_plus: Sequence[int],
    S: Sequence[int],
    cache: Optional[EvalCache] = None,
    method: str = "auto",
):
    """Jacobian of ``y*`` on the smooth piece where ``I_plus`` and ``S`` are strictly active."""
    if set(I_plus) & set(S):
        raise ValueError("I_plus and S must be disjoint")
    gy, _, _ = _augmented(prob, x, sol, list(I_plus) + list(S), cache, method)
    return gy


def phi_gradient(prob: BilevelProblem, x, sol: LowerSolution, grad_y_star, cache: Optional[EvalCache] = None):
    pt = (cache or EvalCache(1)).kkt_point(prob, x, sol.y_star, sol.lam, sol.nu)
    return pt.grad_x_f + grad_y_star.T @ pt.grad_y_f


def directional_derivative(
    prob: BilevelProblem,
    x,
    sol: LowerSolution,
    sets: ActiveSetClassification,
    d,
    probe_step: Optional[float] = None,
    opts: Optional[SolverOpts] = None,
    cache: Optional[EvalCache] = None,
    method: str = "auto",
) -> DirectionalDerivative:
    """One-sided derivative of ``(y*, lambda, nu)`` at ``x`` along unit ``d``.

    Which weakly active constraints become strictly active along ``d`` is
    decided by one lower solve at ``x + probe_step * d``: a constraint joins
    when its multiplier there exceeds its slack.
    """
    x = np.asarray(x, float)
    d = np.asarray(d, float).reshape(-1)
    if abs(np.linalg.norm(d) - 1.0) > 1e-10:
        raise ValueError("direction must have unit norm")
    opts = opts or SolverOpts()
    j0_plus: list = []
    if sets.J_zero:
        h = probe_step if probe_step is not None else 1e-6 * (1.0 + np.linalg.norm(x))
        xp = x + h * d
        probe = solve_lower(prob, xp, warm_start=sol, opts=opts)
        pp = prob.p(xp, probe.y_star)
        j0_plus = [j for j in sets.J_zero if probe.lam[j] > abs(pp[j])]
    rows = list(sets.J_plus) + j0_plus
    gy, glam, gnu = _augmented(prob, x, sol, rows, cache, method)
    d_lambda = np.zeros(prob.m)
    if rows:
        d_lambda[rows] = glam @ d
    return DirectionalDerivative(direction=d, d_y_star=gy @ d, d_lambda=d_lambda, d_nu=gnu @ d,
                                 j0_plus=tuple(j0_plus))


def phi_directional_derivative(prob: BilevelProblem, x, sol: LowerSolution, dd: DirectionalDerivative):
    return float(prob.grad_x_f(x, sol.y_star) @ dd.direction + prob.grad_y_f(x, sol.y_star) @ dd.d_y_star)


def sensitivity_at(prob, x, opts: Optional[SolverOpts] = None, warm_start=None, cache=None):
    """Convenience: solve, classify and differentiate at ``x`` in one call."""
    opts = opts or SolverOpts()
    sol = solve_lower(prob, x, warm_start=warm_start, opts=opts)
    sets = classify_active_sets(prob, x, sol, opts.tol_active)
    return sol, sets, kkt_gradient(prob, x, sol, sets, cache=cache)
