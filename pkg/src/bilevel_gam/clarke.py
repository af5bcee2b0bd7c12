"""Approximate Clarke epsilon-subdifferential of Phi.

On a ball B(x0, eps) each inequality is classified as surely strictly
active, surely inactive, or ambiguous using first-order Lipschitz estimates
of its multiplier and its value along y*(x). With no ambiguous constraints
Phi is smooth on the ball. Otherwise one representative gradient is formed
for every subset S of the ambiguous constraints, and the descent direction
is the minimum-norm element of their convex hull.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import minimize

from .errors import AllSubsetsSingular, GamError, SingularKktMatrix
from .lower import ActiveSetClassification, LowerSolution, SolverOpts, classify_active_sets, solve_lower
from .problem import BilevelProblem, EvalCache
from .sensitivity import KktSensitivity, kkt_gradient, representative_gradient

log = logging.getLogger(__name__)


@dataclass
class BallClassification:
    I_plus: tuple
    I_minus: tuple
    I_eps: tuple
    lipschitz_lambda: np.ndarray
    lipschitz_p: np.ndarray

    @property
    def differentiable_on_ball(self) -> bool:
        return len(self.I_eps) == 0


@dataclass
class SubgradientSet:
    members: list
    subset_labels: list
    min_norm_g: np.ndarray
    min_norm_value: float
    truncated: bool = False
    skipped: list = field(default_factory=list)


def estimate_lipschitz(prob: BilevelProblem, x0, sol: LowerSolution, sens: KktSensitivity, delta: float = 1e-3):
    """Local Lipschitz estimates of each multiplier and of each p_j(x, y*(x)).

    Both are the norm of the gradient at the evaluation point plus ``delta``.
    """
    x0 = np.asarray(x0, float)
    if prob.m == 0:
        return np.zeros(0), np.zeros(0)
    l_lam = np.linalg.norm(sens.grad_lambda, axis=1) + delta
    total = prob.jac_x_p(x0, sol.y_star) + prob.jac_y_p(x0, sol.y_star) @ sens.grad_y_star
    l_p = np.linalg.norm(total, axis=1) + delta
    return l_lam, l_p


def lipschitz_near(
    prob: BilevelProblem,
    x0,
    sol: LowerSolution,
    sets: ActiveSetClassification,
    delta: float = 1e-3,
    opts: Optional[SolverOpts] = None,
    rng: Optional[np.random.Generator] = None,
    probes: int = 5,
    cache: Optional[EvalCache] = None,
):
    """Lipschitz estimates at x0, or at a nearby probe point if x0 is degenerate.

    Returns ``(l_lambda, l_p, sens)`` where ``sens`` is the sensitivity at
    x0 when strict complementarity holds there and ``None`` otherwise. If
    every probe is degenerate too, the estimates fall back to ``delta``.
    """
    x0 = np.asarray(x0, float)
    opts = opts or SolverOpts()
    if sets.scsc:
        sens = kkt_gradient(prob, x0, sol, sets, cache=cache)
        l_lam, l_p = estimate_lipschitz(prob, x0, sol, sens, delta)
        return l_lam, l_p, sens
    rng = rng if rng is not None else np.random.default_rng(0)
    radius = 1e-6 * (1.0 + np.linalg.norm(x0))
    for _ in range(probes):
        u = rng.standard_normal(x0.size)
        xp = x0 + radius * u / np.linalg.norm(u)
        try:
            sp = solve_lower(prob, xp, warm_start=sol, opts=opts)
            st = classify_active_sets(prob, xp, sp, opts.tol_active)
            if not st.scsc:
                continue
            sens_p = kkt_gradient(prob, xp, sp, st)
        except GamError as exc:
            log.debug("lipschitz probe rejected: %s", exc)
            continue
        l_lam, l_p = estimate_lipschitz(prob, xp, sp, sens_p, delta)
        return l_lam, l_p, None
    log.warning("no nondegenerate probe near x0; Lipschitz estimates fall back to delta")
    return np.full(prob.m, delta), np.full(prob.m, delta), None


def check_differentiability_on_ball(
    prob: BilevelProblem,
    x0,
    sol: LowerSolution,
    sets: ActiveSetClassification,
    lip,
    eps: float,
) -> BallClassification:
    """Split the inequalities into surely active, surely inactive and ambiguous on B(x0, eps)."""
    l_lam, l_p = (np.asarray(v, float) for v in lip[:2])
    J = set(sets.J)
    p = prob.p(np.asarray(x0, float), sol.y_star)
    I_plus, I_minus, I_eps = [], [], []
    for j in range(prob.m):
        if j in J and sol.lam[j] > l_lam[j] * eps:
            I_plus.append(j)
        elif j not in J and p[j] < -l_p[j] * eps:
            I_minus.append(j)
        else:
            I_eps.append(j)
    return BallClassification(tuple(I_plus), tuple(I_minus), tuple(I_eps), l_lam, l_p)


def _subsets(prob, x0, sol, I_eps, max_subsets):
    """Subsets of ``I_eps`` in enumeration order, plus a truncation flag.

    When the full power set is too large, only the constraints closest to
    degeneracy (smallest |lambda_j| + |p_j|) are enumerated; the rest keep
    their current status (in S iff lambda_j exceeds |p_j|).
    """
    I_eps = list(I_eps)
    if 2 ** len(I_eps) <= max_subsets:
        core, fixed = I_eps, []
        truncated = False
    else:
        p = prob.p(np.asarray(x0, float), sol.y_star)
        order = sorted(I_eps, key=lambda j: abs(sol.lam[j]) + abs(p[j]))
        k = max(0, int(np.floor(np.log2(max_subsets))))
        core = sorted(order[:k])
        fixed = sorted(j for j in order[k:] if sol.lam[j] > abs(p[j]))
        truncated = True
    out = []
    for r in range(len(core) + 1):
        for S in itertools.combinations(core, r):
            out.append(tuple(sorted(S + tuple(fixed))))
    return out, truncated


def build_subgradient_set(
    prob: BilevelProblem,
    x0,
    sol: LowerSolution,
    cls: BallClassification,
    max_subsets: int = 64,
    cache: Optional[EvalCache] = None,
) -> SubgradientSet:
    """Representative Phi-gradients for every subset S of the ambiguous constraints."""
    if not cls.I_eps:
        raise ValueError("ball is differentiable; use the single gradient instead")
    x0 = np.asarray(x0, float)
    gx = prob.grad_x_f(x0, sol.y_star)
    gy = prob.grad_y_f(x0, sol.y_star)
    subsets, truncated = _subsets(prob, x0, sol, cls.I_eps, max_subsets)
    members, labels, skipped = [], [], []
    for S in subsets:
        try:
            w = representative_gradient(prob, x0, sol, cls.I_plus, S, cache=cache)
        except SingularKktMatrix as exc:
            log.info("subset %s skipped: %s", S, exc)
            skipped.append(S)
            continue
        members.append(gx + w.T @ gy)
        labels.append(S)
    if not members:
        raise AllSubsetsSingular(f"all {len(subsets)} subsets of {cls.I_eps} give singular systems")
    g, val = min_norm_element(members)
    return SubgradientSet(members, labels, g, val, truncated, skipped)


# --------------------------------------------------------------- min-norm

def _affine_min(P):
    """Weights of the min-norm point of the affine hull of the rows of P."""
    k = P.shape[0]
    K = np.zeros((k + 1, k + 1))
    K[:k, :k] = P @ P.T
    K[:k, k] = 1.0
    K[k, :k] = 1.0
    rhs = np.zeros(k + 1)
    rhs[k] = 1.0
    z = np.linalg.lstsq(K, rhs, rcond=None)[0]
    return z[:k]


def _wolfe(P, tol=1e-12, max_iter=500):
    k = P.shape[0]
    norms = np.einsum("ij,ij->i", P, P)
    scale = max(norms.max(), 1e-300)
    S = [int(np.argmin(norms))]
    w = np.array([1.0])
    x = P[S[0]].copy()
    for _ in range(max_iter):
        dots = P @ x
        j = int(np.argmin(dots))
        if x @ x - dots[j] <= tol * scale or j in S:
            break
        S.append(j)
        w = np.append(w, 0.0)
        while True:
            v = _affine_min(P[S])
            if np.all(v > tol):
                w = v
                break
            mask = v <= tol
            theta = np.min(w[mask] / (w[mask] - v[mask]))
            w = (1 - theta) * w + theta * v
            keep = w > tol
            if not np.any(keep):
                keep[np.argmax(w)] = True
            S = [s for s, kk in zip(S, keep) if kk]
            w = w[keep]
            w /= w.sum()
        x = w @ P[S]
    weights = np.zeros(k)
    weights[S] = w
    return weights


def _slsqp(P):
    k = P.shape[0]
    G = P @ P.T
    res = minimize(
        lambda w: 0.5 * w @ G @ w,
        np.full(k, 1.0 / k),
        jac=lambda w: G @ w,
        bounds=[(0.0, 1.0)] * k,
        constraints=[{"type": "eq", "fun": lambda w: w.sum() - 1.0, "jac": lambda w: np.ones(k)}],
        method="SLSQP",
        options={"ftol": 1e-16, "maxiter": 500},
    )
    w = np.clip(res.x, 0.0, None)
    return w / w.sum()


def _optimality_gap(P, g):
    return float(g @ g - np.min(P @ g))


def min_norm_element(points, tol: float = 1e-9):
    """Minimum-norm point of the convex hull of ``points``.

    Wolfe's algorithm, with an SLSQP solve over simplex weights as fallback
    when the result fails the optimality test <p_i, g> >= |g|^2 - tol.
    Returns ``(g, |g|)``.
    """
    P = np.atleast_2d(np.asarray(points, float))
    if P.size == 0:
        raise ValueError("need at least one point")
    if not np.all(np.isfinite(P)):
        raise ValueError("points must be finite")
    if P.shape[0] == 1:
        return P[0].copy(), float(np.linalg.norm(P[0]))
    g = _wolfe(P) @ P
    if _optimality_gap(P, g) > tol:
        alt = _slsqp(P) @ P
        if _optimality_gap(P, alt) < _optimality_gap(P, g):
            g = alt
    return g, float(np.linalg.norm(g))
