"""Gradient approximation method: the outer descent loop on Phi(x)."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from .clarke import build_subgradient_set, check_differentiability_on_ball, lipschitz_near
from .errors import ConfigError, GamError, LineSearchFailed
from .lower import ActiveSetClassification, LowerSolution, SolverOpts, classify_active_sets, solve_lower
from .problem import BilevelProblem, EvalCache
from .sensitivity import phi_gradient

log = logging.getLogger(__name__)

DIFFERENTIABLE = "Differentiable"
NONSMOOTH = "Nonsmooth"
NULL_STEP = "NullStep"

TRACE_COLUMNS = ("k", "phi", "g_norm", "eps", "nu", "t", "branch", "wall_ms")


@dataclass
class GamConfig:
    eps0: float = 0.3
    nu0: float = 1.0
    beta: float = 0.5
    gamma: float = 0.3
    theta_eps: float = 0.5
    theta_nu: float = 0.5
    eps_opt: float = 1e-4
    nu_opt: float = 1e-4
    max_outer_iters: int = 500
    max_backtracks: int = 40
    lipschitz_delta: float = 1e-3
    max_subsets: int = 64
    lower_tol: float = 1e-9
    tol_active: float = 1e-7
    seed: int = 0
    step_rule: str = "armijo"  # or "fixed"
    lr: float = 0.1
    lr_decay: float = 0.0

    def __post_init__(self):
        def bad(msg):
            raise ConfigError(msg)

        for name in ("eps0", "nu0", "lipschitz_delta", "lower_tol", "tol_active", "lr"):
            if not getattr(self, name) > 0:
                bad(f"{name} must be positive")
        for name in ("beta", "gamma", "theta_eps", "theta_nu"):
            if not 0 < getattr(self, name) < 1:
                bad(f"{name} must lie in (0, 1)")
        for name in ("eps_opt", "nu_opt", "lr_decay"):
            if not getattr(self, name) >= 0:
                bad(f"{name} must be nonnegative")
        for name in ("max_outer_iters", "max_backtracks", "max_subsets"):
            if int(getattr(self, name)) < 1:
                bad(f"{name} must be at least 1")
            setattr(self, name, int(getattr(self, name)))
        if self.step_rule not in ("armijo", "fixed"):
            bad("step_rule must be 'armijo' or 'fixed'")

    @classmethod
    def from_mapping(cls, data: dict, **overrides):
        known = {f.name for f in fields(cls)}
        merged = {**data, **{k: v for k, v in overrides.items() if v is not None}}
        unknown = set(merged) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**merged)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def solver_opts(self) -> SolverOpts:
        return SolverOpts(tol_kkt=self.lower_tol, tol_active=self.tol_active)


@dataclass
class TraceRecord:
    k: int
    x_k: np.ndarray
    phi: float
    g: np.ndarray
    g_norm: float
    eps: float
    nu: float
    t: float
    branch: str
    active_sets: ActiveSetClassification
    wall_ms: float
    phi_next: Optional[float] = None
    n_members: int = 1

    def row(self):
        return [self.k, repr(self.phi), repr(self.g_norm), repr(self.eps), repr(self.nu), repr(self.t),
                self.branch, f"{self.wall_ms:.3f}"]

    def to_dict(self):
        d = asdict(self)
        d["x_k"] = self.x_k.tolist()
        d["g"] = self.g.tolist()
        d["active_sets"] = {k: list(v) for k, v in asdict(self.active_sets).items()}
        return d


@dataclass
class GamResult:
    x: np.ndarray
    phi: float
    g_norm: float
    eps: float
    nu: float
    iterations: int
    converged: bool
    reason: str
    lower: LowerSolution
    trace: list = field(default_factory=list, repr=False)


def evaluate_phi(prob: BilevelProblem, x, opts: SolverOpts, warm_start=None):
    sol = solve_lower(prob, x, warm_start=warm_start, opts=opts)
    return float(prob.f(x, sol.y_star)), sol


def line_search(
    prob: BilevelProblem,
    x,
    g,
    phi_x: float,
    beta: float = 0.5,
    gamma: float = 0.3,
    max_backtracks: int = 40,
    warm_start: Optional[LowerSolution] = None,
    opts: Optional[SolverOpts] = None,
):
    """Armijo backtracking over t in {gamma, gamma^2, ...}.

    Returns ``(t, phi(x - t g), solution)`` for the largest accepted t. A
    lower solve that fails at a trial point rejects that t.
    """
    x = np.asarray(x, float)
    g = np.asarray(g, float)
    gg = float(g @ g)
    if gg <= 0:
        raise ValueError("search direction must be nonzero")
    opts = opts or SolverOpts()
    best_gap = np.inf
    t = 1.0
    for _ in range(max_backtracks):
        t *= gamma
        try:
            val, sol = evaluate_phi(prob, x - t * g, opts, warm_start)
        except GamError as exc:
            log.debug("line search trial t=%g failed: %s", t, exc)
            continue
        gap = val - (phi_x - beta * t * gg)
        if gap < 0:
            return t, val, sol
        best_gap = min(best_gap, gap)
    raise LineSearchFailed(
        f"no step in {max_backtracks} backtracks satisfied the Armijo condition (smallest gap {best_gap:.3e})",
        armijo_gap=best_gap, t_min=t,
    )


def descent_direction(prob, x, sol, sets, eps, cfg: GamConfig, rng, cache=None):
    """Return ``(g, branch, n_members)`` for the current iterate and radius."""
    opts = cfg.solver_opts()
    lip = lipschitz_near(prob, x, sol, sets, cfg.lipschitz_delta, opts, rng, cache=cache)
    cls = check_differentiability_on_ball(prob, x, sol, sets, lip, eps)
    if cls.differentiable_on_ball:
        return phi_gradient(prob, x, sol, lip[2].grad_y_star, cache), DIFFERENTIABLE, 1
    sub = build_subgradient_set(prob, x, sol, cls, cfg.max_subsets, cache)
    return sub.min_norm_g, NONSMOOTH, len(sub.members)


def run(prob: BilevelProblem, x0, cfg: Optional[GamConfig] = None, callback=None) -> GamResult:
    """Minimize Phi from ``x0``.

    Each iteration solves the lower level (warm-started from the previous
    one), picks the gradient or the min-norm approximate subgradient,
    and either shrinks (eps, nu) on a null step or takes a step.
    """
    cfg = cfg or GamConfig()
    opts = cfg.solver_opts()
    rng = np.random.default_rng(cfg.seed)
    cache = EvalCache()
    x = np.asarray(x0, float).reshape(-1).copy()
    if x.size != prob.d_x:
        raise ValueError(f"x0 has size {x.size}, expected {prob.d_x}")
    eps, nu = float(cfg.eps0), float(cfg.nu0)
    phi_x, sol = evaluate_phi(prob, x, opts)
    trace: list = []
    converged, reason = False, "max_outer_iters reached"
    for k in range(cfg.max_outer_iters):
        start = time.perf_counter()
        sets = classify_active_sets(prob, x, sol, opts.tol_active)
        g, branch, n_members = descent_direction(prob, x, sol, sets, eps, cfg, rng, cache)
        g_norm = float(np.linalg.norm(g))
        rec = TraceRecord(k, x.copy(), phi_x, g.copy(), g_norm, eps, nu, 0.0, branch, sets, 0.0,
                          n_members=n_members)
        if g_norm <= cfg.nu_opt and eps <= cfg.eps_opt:
            converged, reason = True, "stationary"
        elif g_norm <= nu:
            rec.branch = NULL_STEP
            rec.phi_next = phi_x
            nu *= cfg.theta_nu
            eps *= cfg.theta_eps
        else:
            if cfg.step_rule == "armijo":
                t, phi_new, sol = line_search(prob, x, g, phi_x, cfg.beta, cfg.gamma, cfg.max_backtracks, sol, opts)
            else:
                t = cfg.lr / (1.0 + cfg.lr_decay * k)
                phi_new, sol = evaluate_phi(prob, x - t * g, opts, sol)
            x = x - t * g
            rec.t = t
            rec.phi_next = phi_new
            phi_x = phi_new
        rec.wall_ms = 1e3 * (time.perf_counter() - start)
        trace.append(rec)
        if callback is not None:
            callback(rec)
        if converged:
            break
    return GamResult(x=x, phi=phi_x, g_norm=trace[-1].g_norm if trace else np.nan, eps=eps, nu=nu,
                     iterations=len(trace), converged=converged, reason=reason, lower=sol, trace=trace)


def write_trace_csv(trace, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for rec in trace:
            w.writerow(rec.row())


def write_trace_json(result: GamResult, path):
    payload = {
        "x": result.x.tolist(),
        "phi": result.phi,
        "g_norm": result.g_norm,
        "eps": result.eps,
        "nu": result.nu,
        "iterations": result.iterations,
        "converged": result.converged,
        "reason": result.reason,
        "trace": [rec.to_dict() for rec in result.trace],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)
