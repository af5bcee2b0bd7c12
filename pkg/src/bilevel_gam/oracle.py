"""Independent reference computations used by the tests and ``verify``.

Nothing here shares code paths with the production derivative machinery
beyond calling ``solve_lower`` to evaluate Phi at a point.
"""
from __future__ import annotations

import itertools
import logging
from math import comb
from typing import Callable, Optional

import numpy as np

from .errors import GamError, InfeasibleLowerLevel, SamplingExhausted
from .lower import SolverOpts, classify_active_sets, solve_lower
from .problem import BilevelProblem, ValidationReport, _rel_err, fd_step, validate_problem

log = logging.getLogger(__name__)

ORACLE_OPTS = SolverOpts(tol_kkt=1e-10)


# ------------------------------------------------------------- QP oracle

def exhaustive_qp(Q, c, G=None, h=None, A=None, b=None, tol=1e-9):
    """Solve ``min 1/2 y'Qy + c'y  s.t. Gy <= h, Ay = b`` by active-set enumeration.

    Every subset W of the inequalities is tried as the active set; the
    equality-constrained KKT system is solved directly and the candidate
    kept if it is primal feasible with nonnegative multipliers. Q must be
    positive definite, so the surviving candidate is the unique optimum.
    Returns ``(y, lam, nu)``.
    """
    Q = np.atleast_2d(np.asarray(Q, float))
    c = np.asarray(c, float).reshape(-1)
    d = Q.shape[0]
    G = np.zeros((0, d)) if G is None else np.asarray(G, float).reshape(-1, d)
    h = np.zeros(0) if h is None else np.asarray(h, float).reshape(-1)
    A = np.zeros((0, d)) if A is None else np.asarray(A, float).reshape(-1, d)
    b = np.zeros(0) if b is None else np.asarray(b, float).reshape(-1)
    m, n = G.shape[0], A.shape[0]
    best = None
    for r in range(m + 1):
        for W in itertools.combinations(range(m), r):
            W = list(W)
            R = np.vstack([G[W], A])
            k = R.shape[0]
            K = np.zeros((d + k, d + k))
            K[:d, :d] = Q
            K[:d, d:] = R.T
            K[d:, :d] = R
            if k and np.linalg.matrix_rank(R) < k:
                continue
            z = np.linalg.solve(K, np.concatenate([-c, h[W], b]))
            y = z[:d]
            lam_w = z[d:d + r]
            scale = 1.0 + np.abs(h).max(initial=0.0)
            if np.any(G @ y - h > tol * scale) or np.any(lam_w < -tol * (1.0 + np.abs(lam_w).max(initial=0.0))):
                continue
            obj = 0.5 * y @ Q @ y + c @ y
            if best is None or obj < best[0] - 1e-14:
                lam = np.zeros(m)
                lam[W] = np.maximum(lam_w, 0.0)
                best = (obj, y, lam, z[d + r:])
    if best is None:
        raise InfeasibleLowerLevel("no feasible active set found")
    return best[1], best[2], best[3]


# ------------------------------------------------------------ Phi oracles

def phi(prob: BilevelProblem, x, opts: Optional[SolverOpts] = None, warm_start=None):
    """Return ``(Phi(x), solution)`` from a full lower solve."""
    x = np.asarray(x, float).reshape(-1)
    sol = solve_lower(prob, x, warm_start=warm_start, opts=opts or ORACLE_OPTS)
    return float(prob.f(x, sol.y_star)), sol


def fd_phi_gradient(prob: BilevelProblem, x, h: float = 1e-5, opts: Optional[SolverOpts] = None):
    """Central-difference gradient of Phi; each evaluation is a full lower solve."""
    x = np.asarray(x, float).reshape(-1)
    opts = opts or ORACLE_OPTS
    _, base = phi(prob, x, opts)
    steps = fd_step(x, h)
    out = np.empty(x.size)
    for i in range(x.size):
        e = np.zeros(x.size)
        e[i] = steps[i]
        fp, _ = phi(prob, x + e, opts, warm_start=base)
        fm, _ = phi(prob, x - e, opts, warm_start=base)
        out[i] = (fp - fm) / (2 * steps[i])
    return out


def fd_y_star_jacobian(prob: BilevelProblem, x, h: float = 1e-5, opts: Optional[SolverOpts] = None):
    """Central-difference Jacobian of y*(x), shape (d_y, d_x)."""
    x = np.asarray(x, float).reshape(-1)
    opts = opts or ORACLE_OPTS
    base = solve_lower(prob, x, opts=opts)
    steps = fd_step(x, h)
    cols = []
    for i in range(x.size):
        e = np.zeros(x.size)
        e[i] = steps[i]
        yp = solve_lower(prob, x + e, warm_start=base, opts=opts).y_star
        ym = solve_lower(prob, x - e, warm_start=base, opts=opts).y_star
        cols.append((yp - ym) / (2 * steps[i]))
    return np.stack(cols, axis=1)


def one_sided_phi_derivative(prob: BilevelProblem, x, d, hs=(1e-3, 1e-4, 1e-5), opts: Optional[SolverOpts] = None):
    """Forward differences of Phi along ``d`` at each ``h``, Richardson-extrapolated to h -> 0.

    The differences are fitted by a polynomial in h and its constant term
    returned together with the raw quotients.
    """
    x = np.asarray(x, float).reshape(-1)
    d = np.asarray(d, float).reshape(-1)
    opts = opts or ORACLE_OPTS
    f0, base = phi(prob, x, opts)
    hs = np.asarray(hs, float)
    quots = np.array([(phi(prob, x + h * d, opts, warm_start=base)[0] - f0) / h for h in hs])
    coef = np.polyfit(hs, quots, deg=min(len(hs) - 1, 2))
    return float(coef[-1]), quots


def sample_ball_gradients(
    prob: BilevelProblem,
    x0,
    eps: float,
    count: int,
    seed: int = 0,
    opts: Optional[SolverOpts] = None,
    gradient: str = "kkt",
    return_points: bool = False,
):
    """Phi-gradients at uniformly random differentiable points of the ball B(x0, eps).

    Points where strict complementarity fails are redrawn. ``gradient``
    selects the per-point gradient: ``"kkt"`` (implicit differentiation) or
    ``"fd"`` (central differences of Phi, fully independent but slower).
    """
    from .sensitivity import kkt_gradient, phi_gradient

    if eps <= 0:
        raise ValueError("eps must be positive")
    x0 = np.asarray(x0, float).reshape(-1)
    d_x = x0.size
    if count < d_x + 1:
        raise ValueError(f"count must be at least d_x + 1 = {d_x + 1}")
    opts = opts or ORACLE_OPTS
    rng = np.random.default_rng(seed)
    grads, pts = [], []
    attempts = 0
    while len(grads) < count:
        if attempts >= 10 * count:
            raise SamplingExhausted(f"only {len(grads)} of {count} differentiable samples after {attempts} draws")
        attempts += 1
        u = rng.standard_normal(d_x)
        u *= eps * rng.random() ** (1.0 / d_x) / np.linalg.norm(u)
        x = x0 + u
        try:
            sol = solve_lower(prob, x, opts=opts)
            sets = classify_active_sets(prob, x, sol, opts.tol_active)
            if not sets.scsc:
                continue
            if gradient == "fd":
                grads.append(fd_phi_gradient(prob, x, h=1e-6, opts=opts))
            else:
                sens = kkt_gradient(prob, x, sol, sets)
                grads.append(phi_gradient(prob, x, sol, sens.grad_y_star))
            pts.append(x)
        except GamError as exc:
            log.debug("sample at %s rejected: %s", x, exc)
    return (grads, pts) if return_points else grads


# ------------------------------------------------------------ min-norm oracle

MAX_FULL_GRID = 200_000


def _compositions(total: int, parts: int):
    """All nonnegative integer vectors of length ``parts`` summing to ``total``."""
    if parts == 1:
        return np.array([[total]])
    bars = np.array(list(itertools.combinations(range(total + parts - 1), parts - 1)))
    edges = np.hstack([-np.ones((len(bars), 1), int), bars, np.full((len(bars), 1), total + parts - 1)])
    return np.diff(edges, axis=1) - 1


def brute_min_norm(points, grid_step: float = 1e-3):
    """Minimum-norm point of conv(points) by searching simplex weights on a grid.

    The full weight grid at ``grid_step`` is enumerated when it has at most
    ``MAX_FULL_GRID`` nodes. Otherwise a coarse full grid is searched first
    and then refined by factors of 5 in a window of +-1.5 coarse steps around
    the incumbent until the resolution reaches ``grid_step``; the objective is
    convex so the window follows the optimum.
    """
    P = np.atleast_2d(np.asarray(points, float))
    k = P.shape[0]
    if k == 1:
        return P[0].copy()
    N = int(round(1.0 / grid_step))
    if comb(N + k - 1, k - 1) <= MAX_FULL_GRID:
        W = _compositions(N, k) / N
        V = W @ P
        return V[np.argmin(np.einsum("ij,ij->i", V, V))]
    levels = [N]
    while comb(levels[-1] + k - 1, k - 1) > MAX_FULL_GRID:
        levels.append(max(1, levels[-1] // 5))
    levels.reverse()
    W = _compositions(levels[0], k) / levels[0]
    V = W @ P
    w = W[np.argmin(np.einsum("ij,ij->i", V, V))]
    for prev, cur in zip(levels[:-1], levels[1:]):
        span = int(np.ceil(1.5 * cur / prev))
        base = np.round(w * cur).astype(int)
        offs = np.indices((2 * span + 1,) * (k - 1)).reshape(k - 1, -1).T - span
        head = base[None, :k - 1] + offs
        tail = cur - head.sum(axis=1)
        cand = np.hstack([head, tail[:, None]])
        cand = cand[np.all(cand >= 0, axis=1)]
        W = cand / cur
        V = W @ P
        w = W[np.argmin(np.einsum("ij,ij->i", V, V))]
    return w @ P


# --------------------------------------------------------------- verify suite

def run_oracle_suite(
    prob: BilevelProblem,
    points,
    reference: Optional[Callable] = None,
    seed: int = 0,
    fd_tol: float = 1e-4,
) -> ValidationReport:
    """Run every applicable oracle check at ``points`` and collect a report.

    Covers callback derivatives, the lower solver against ``reference`` (an
    ``x -> (y, lam, nu)`` callable) or the analytic solution when the problem
    provides one, implicit gradients against finite differences at SCSC
    points, and the min-norm solver against the grid oracle.
    """
    from .clarke import min_norm_element
    from .sensitivity import kkt_gradient, phi_gradient

    points = [np.asarray(p, float).reshape(-1) for p in points]
    ys = []
    for x in points:
        try:
            ys.append(solve_lower(prob, x, opts=ORACLE_OPTS).y_star)
        except GamError:
            ys.append(np.zeros(prob.d_y))
    report = validate_problem(prob, list(zip(points, ys)))

    for x in points:
        tag = np.array2string(x, precision=3)
        try:
            sol = solve_lower(prob, x, opts=ORACLE_OPTS)
        except GamError as exc:
            report.add(f"lower solve {tag}", False, str(exc))
            continue
        report.add(f"lower KKT residual {tag}", sol.kkt_residual <= 1e-8, f"{sol.kkt_residual:.1e}")
        if hasattr(prob, "y_star_exact"):
            err = max(np.max(np.abs(sol.y_star - prob.y_star_exact(x))), np.max(np.abs(sol.lam - prob.lambda_exact(x))))
            report.add(f"analytic solution {tag}", err <= 1e-7, f"err {err:.1e}")
        if reference is not None:
            y_ref, lam_ref, _ = reference(x)
            err = float(np.max(np.abs(sol.y_star - y_ref)))
            report.add(f"reference solver {tag}", err <= 1e-7, f"err {err:.1e}")
        sets = classify_active_sets(prob, x, sol, ORACLE_OPTS.tol_active)
        if not sets.scsc:
            report.add(f"phi gradient {tag}", True, "skipped: SCSC fails")
            continue
        try:
            g = phi_gradient(prob, x, sol, kkt_gradient(prob, x, sol, sets).grad_y_star)
            g_fd = fd_phi_gradient(prob, x)
        except GamError as exc:
            report.add(f"phi gradient {tag}", False, str(exc))
            continue
        err = _rel_err(g, g_fd)
        report.add(f"phi gradient {tag}", err <= fd_tol, f"rel err {err:.1e}")

    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(10):
        pts = rng.standard_normal((int(rng.integers(1, 5)), int(rng.integers(1, 4))))
        g, _ = min_norm_element(list(pts))
        ref = brute_min_norm(pts, 1e-3)
        worst = max(worst, abs(np.linalg.norm(g) - np.linalg.norm(ref)))
    report.add("min-norm vs grid oracle", worst <= 2e-3, f"max |norm diff| {worst:.1e}")
    return report
