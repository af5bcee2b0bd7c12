"""Lower-level solver: primal-dual interior point with an active-set polish.

The interior-point phase follows Mehrotra's predictor-corrector scheme on the
slack formulation ``p(x, y) + s = 0, s > 0``. Once the iterate is close to
optimal the active set is guessed from ``lam > s`` and the equality-constrained
KKT system is solved by Newton's method; the polished point is accepted when
its KKT residual beats the interior-point one. Polishing recovers exact
complementarity, which the sensitivity code relies on.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import scipy.linalg

from .errors import InfeasibleLowerLevel, LicqViolation, MaxIterations
from .problem import BilevelProblem

log = logging.getLogger(__name__)


@dataclass
class SolverOpts:
    tol_kkt: float = 1e-9
    max_iter: int = 100
    tol_active: float = 1e-7
    warm_floor: float = 1e-6
    tol_licq: float = 1e-8  # relative to the largest singular value
    polish: bool = True
    check_licq: bool = True


@dataclass
class LowerSolution:
    x: np.ndarray
    y_star: np.ndarray
    lam: np.ndarray
    nu: np.ndarray
    kkt_residual: float
    iterations: int
    converged: bool
    residuals: dict = field(default_factory=dict)

    @property
    def y(self):
        return self.y_star


@dataclass(frozen=True)
class ActiveSetClassification:
    J: tuple
    J_plus: tuple
    J_zero: tuple

    @property
    def scsc(self) -> bool:
        return len(self.J_zero) == 0


def kkt_residuals(prob: BilevelProblem, x, y, lam, nu) -> dict:
    grad = prob.grad_y_g(x, y) + prob.jac_y_p(x, y).T @ lam + prob.jac_y_q(x, y).T @ nu
    p = prob.p(x, y)
    q = prob.q(x, y)
    return {
        "stationarity": float(np.max(np.abs(grad), initial=0.0)),
        "primal_ineq": float(np.max(p, initial=0.0)) if p.size else 0.0,
        "primal_eq": float(np.max(np.abs(q), initial=0.0)),
        "dual_feasibility": float(np.max(-lam, initial=0.0)),
        # natural residual: scale-consistent, unlike the product lam * p
        "complementarity": float(np.max(np.abs(np.minimum(lam, -p)), initial=0.0)),
    }


def _max_res(res: dict) -> float:
    return max(res.values()) if res else 0.0


def _hess_L(prob, x, y, lam):
    H = prob.hess_yy_g(x, y)
    if prob.m and not prob.p_affine:
        H = H + np.einsum("j,jab->ab", np.maximum(lam, 0.0), prob.hess_yy_p(x, y))
    return 0.5 * (H + H.T)


def _solve_sym(K, rhs):
    try:
        with np.errstate(all="ignore"):
            sol = scipy.linalg.solve(K, rhs, assume_a="sym", check_finite=False)
        if np.all(np.isfinite(sol)):
            return sol
    except (np.linalg.LinAlgError, ValueError):
        pass
    except scipy.linalg.LinAlgWarning:  # pragma: no cover - only when warnings are errors
        pass
    return np.linalg.lstsq(K, rhs, rcond=None)[0]


def _polish(prob, x, y, lam, nu, active, iters=8):
    """Newton on the KKT system with ``active`` inequalities treated as equalities."""
    d_y, n = prob.d_y, prob.n
    A = np.asarray(active, dtype=int)
    lam_a = lam[A].copy()
    nu = nu.copy()
    y = y.copy()
    best = None
    for _ in range(iters):
        lam_full = np.zeros(prob.m)
        lam_full[A] = lam_a
        H = _hess_L(prob, x, y, lam_full)
        Jp = prob.jac_y_p(x, y)[A]
        Jq = prob.jac_y_q(x, y)
        R = np.vstack([Jp, Jq])
        k = R.shape[0]
        K = np.zeros((d_y + k, d_y + k))
        K[:d_y, :d_y] = H
        K[:d_y, d_y:] = R.T
        K[d_y:, :d_y] = R
        rhs = np.concatenate([-prob.grad_y_g(x, y), -prob.p(x, y)[A], -prob.q(x, y)])
        sol = _solve_sym(K, rhs)
        y = y + sol[:d_y]
        lam_a = sol[d_y:d_y + len(A)]
        nu = sol[d_y + len(A):]
        lam_full = np.zeros(prob.m)
        lam_full[A] = lam_a
        res = kkt_residuals(prob, x, y, lam_full, nu)
        r = _max_res(res)
        if best is not None and r >= best[0] * 0.5:
            if r < best[0]:
                best = (r, y.copy(), lam_full.copy(), nu.copy(), res)
            break
        best = (r, y.copy(), lam_full.copy(), nu.copy(), res)
        if r < 1e-15:
            break
    return best


def _active_guesses(lam, s, max_flips=4):
    """Active-set guesses from interior-point iterates, most likely first.

    The base guess is ``lam > s``. Constraints whose ratio ``lam / s`` lies
    within two decades of 1 are ambiguous; all their flips are tried when
    there are at most ``max_flips`` of them.
    """
    base = lam > s
    ratio = lam / np.maximum(s, 1e-300)
    amb = np.flatnonzero((ratio > 1e-2) & (ratio < 1e2))
    yield list(np.flatnonzero(base))
    if 0 < len(amb) <= max_flips:
        for r in range(1, len(amb) + 1):
            for flip in itertools.combinations(amb, r):
                guess = base.copy()
                guess[list(flip)] = ~guess[list(flip)]
                yield list(np.flatnonzero(guess))


def _step_length(v, dv, tau):
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, tau * np.min(-v[neg] / dv[neg])))


def check_licq(prob, x, y, active, tol_rel=1e-8):
    """Return the relative smallest singular value of the active gradient stack."""
    rows = [prob.jac_y_p(x, y)[list(active)], prob.jac_y_q(x, y)]
    R = np.vstack(rows)
    if R.shape[0] == 0:
        return 1.0
    if R.shape[0] > prob.d_y:
        return 0.0
    sv = np.linalg.svd(R, compute_uv=False)
    if sv[0] == 0:
        return 0.0
    return float(sv[-1] / sv[0])


def solve_lower(
    prob: BilevelProblem,
    x,
    warm_start: Optional[LowerSolution] = None,
    opts: Optional[SolverOpts] = None,
    y0=None,
) -> LowerSolution:
    """Solve ``min_y g(x, y) s.t. p(x, y) <= 0, q(x, y) = 0`` to ``opts.tol_kkt``."""
    opts = opts or SolverOpts()
    if not opts.tol_kkt > 0:
        raise ValueError("tol_kkt must be positive")
    x = np.asarray(x, dtype=float).reshape(-1)
    m, n, d_y = prob.m, prob.n, prob.d_y

    if warm_start is not None:
        y = np.array(warm_start.y_star, dtype=float)
        lam = np.maximum(np.array(warm_start.lam, dtype=float), opts.warm_floor)
        nu = np.array(warm_start.nu, dtype=float)
        s = np.maximum(-prob.p(x, y), opts.warm_floor)
    else:
        y = np.zeros(d_y) if y0 is None else np.array(y0, dtype=float)
        nu = np.zeros(n)
        s = np.maximum(-prob.p(x, y), 1.0)
        lam = np.ones(m)

    def finish(y, lam, nu, it, res):
        lam = np.maximum(lam, 0.0)
        sol = LowerSolution(x=x, y_star=y, lam=lam, nu=nu, kkt_residual=_max_res(res),
                            iterations=it, converged=True, residuals=res)
        if opts.check_licq:
            p_now = prob.p(x, y)
            active = [j for j in range(m) if abs(p_now[j]) <= opts.tol_active]
            ratio = check_licq(prob, x, y, active)
            if ratio < opts.tol_licq:
                raise LicqViolation(f"active constraint gradients are rank deficient at x={x} (ratio {ratio:.2e})")
            if ratio < 1e-6:
                log.warning("multipliers ill-conditioned at x=%s: active-gradient ratio %.2e", x, ratio)
        return sol

    # warm starts often sit on the right active set already
    if opts.polish and warm_start is not None and m + n > 0:
        active = [j for j in range(m) if warm_start.lam[j] > -prob.p(x, warm_start.y_star)[j]]
        best = _polish(prob, x, warm_start.y_star, np.array(warm_start.lam, dtype=float),
                       np.array(warm_start.nu, dtype=float), active)
        if best is not None and best[0] <= 0.01 * opts.tol_kkt:
            return finish(best[1], best[2], best[3], 0, best[4])

    prim_hist = []
    res = kkt_residuals(prob, x, y, np.maximum(lam, 0), nu)
    for it in range(1, opts.max_iter + 1):
        grad_g = prob.grad_y_g(x, y)
        pval = prob.p(x, y)
        Jp = prob.jac_y_p(x, y)
        qval = prob.q(x, y)
        Jq = prob.jac_y_q(x, y)
        H = _hess_L(prob, x, y, lam)

        r_d = grad_g + Jp.T @ lam + Jq.T @ nu
        r_p = pval + s
        r_q = qval
        mu = float(s @ lam / m) if m else 0.0
        res = kkt_residuals(prob, x, y, np.maximum(lam, 0), nu)
        prim = max(float(np.max(np.abs(r_p), initial=0.0)), float(np.max(np.abs(r_q), initial=0.0)))
        prim_hist.append(prim)

        if _max_res(res) <= opts.tol_kkt and mu <= opts.tol_kkt:
            return finish(y, lam, nu, it - 1, res)

        if opts.polish and (mu < 1e-5 or _max_res(res) < 1e-5):
            for active in _active_guesses(lam, s):
                best = _polish(prob, x, y, lam, nu, active)
                if best is not None and best[0] <= min(0.01 * opts.tol_kkt, _max_res(res)):
                    return finish(best[1], best[2], best[3], it - 1, best[4])

        if m and (np.max(lam) > 1e12 or (it > 30 and prim > 1e-6 and prim > 0.5 * prim_hist[-20])):
            raise InfeasibleLowerLevel(f"lower level appears infeasible at x={x} (primal residual {prim:.2e})")

        D = lam / s if m else np.zeros(0)
        Hs = H + (Jp.T * D) @ Jp if m else H
        K = np.zeros((d_y + n, d_y + n))
        K[:d_y, :d_y] = Hs
        K[:d_y, d_y:] = Jq.T
        K[d_y:, :d_y] = Jq

        def newton(r_c):
            t = (-r_c + lam * r_p) / s if m else np.zeros(0)
            rhs = np.concatenate([-r_d - (Jp.T @ t if m else 0.0), -r_q])
            sol = _solve_sym(K, rhs)
            dy = sol[:d_y]
            dnu = sol[d_y:]
            ds = -r_p - Jp @ dy
            dlam = t + D * (Jp @ dy) if m else np.zeros(0)
            return dy, ds, dlam, dnu

        if m:
            dy, ds, dlam, dnu = newton(s * lam)
            a_aff = min(_step_length(s, ds, 1.0), _step_length(lam, dlam, 1.0))
            mu_aff = float((s + a_aff * ds) @ (lam + a_aff * dlam) / m)
            sigma = min(1.0, (mu_aff / mu) ** 3) if mu > 0 else 0.0
            dy, ds, dlam, dnu = newton(s * lam + ds * dlam - sigma * mu)
            tau = max(0.99, 1.0 - mu)
            alpha = min(_step_length(s, ds, tau), _step_length(lam, dlam, tau))
        else:
            dy, ds, dlam, dnu = newton(np.zeros(0))
            alpha = 1.0

        if not prob.p_affine and m:
            # residual-norm backtracking keeps Newton honest on curved constraints
            def merit(a):
                yy = y + a * dy
                try:
                    rr = np.concatenate([
                        prob.grad_y_g(x, yy) + prob.jac_y_p(x, yy).T @ (lam + a * dlam) + Jq.T @ (nu + a * dnu),
                        prob.p(x, yy) + s + a * ds, prob.q(x, yy),
                    ])
                except Exception:  # noqa: BLE001 - any evaluation failure rejects the step
                    return np.inf
                return float(np.linalg.norm(rr))

            m0 = float(np.linalg.norm(np.concatenate([r_d, r_p, r_q])))
            for _ in range(30):
                if merit(alpha) <= (1 - 1e-4 * alpha) * m0 + 10 * mu:
                    break
                alpha *= 0.5

        y = y + alpha * dy
        nu = nu + alpha * dnu
        if m:
            s = np.maximum(s + alpha * ds, 1e-300)
            lam = np.maximum(lam + alpha * dlam, 1e-300)

    res = kkt_residuals(prob, x, y, np.maximum(lam, 0), nu)
    if m and prim_hist and prim_hist[-1] > 1e-6:
        raise InfeasibleLowerLevel(f"lower level appears infeasible at x={x} (primal residual {prim_hist[-1]:.2e})")
    sol = LowerSolution(x=x, y_star=y, lam=np.maximum(lam, 0), nu=nu, kkt_residual=_max_res(res),
                        iterations=opts.max_iter, converged=False, residuals=res)
    raise MaxIterations(f"lower solver hit {opts.max_iter} iterations (residual {sol.kkt_residual:.2e})", sol)


def classify_active_sets(prob: BilevelProblem, x, sol: LowerSolution, tol_active: float = 1e-7) -> ActiveSetClassification:
    """Split the inequalities into active / strictly active / weakly active."""
    if not sol.converged:
        raise ValueError("cannot classify an unconverged solution")
    p = prob.p(x, sol.y_star)
    lam = np.where(sol.lam < tol_active, 0.0, sol.lam)
    J = tuple(int(j) for j in range(prob.m) if abs(p[j]) <= tol_active)
    J_plus = tuple(j for j in J if lam[j] > tol_active)
    J_zero = tuple(j for j in J if j not in J_plus)
    return ActiveSetClassification(J=J, J_plus=J_plus, J_zero=J_zero)


def with_x(sol: LowerSolution, x) -> LowerSolution:
    return replace(sol, x=np.asarray(x, dtype=float))
