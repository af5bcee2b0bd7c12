"""Bilevel problem container, Lagrangian helpers and numerical validation.

A :class:`BilevelProblem` bundles the upper objective ``f``, the lower
objective ``g``, inequality constraints ``p(x, y) <= 0`` and equality
constraints ``q(x, y) = 0`` together with all first and second derivatives
the sensitivity machinery needs. Derivatives are user supplied; every
callback is wrapped so that it returns a float array of the declared shape
or raises.
"""
from __future__ import annotations

import hashlib
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DimensionError, EvaluationError, GamError

Callback = Callable[[np.ndarray, np.ndarray], object]

# callback name -> shape template; letters are resolved against the dims
_SHAPES = {
    "f": (),
    "grad_x_f": ("dx",),
    "grad_y_f": ("dy",),
    "g": (),
    "grad_y_g": ("dy",),
    "hess_yy_g": ("dy", "dy"),
    "hess_xy_g": ("dy", "dx"),
    "p": ("m",),
    "jac_y_p": ("m", "dy"),
    "jac_x_p": ("m", "dx"),
    "hess_yy_p": ("m", "dy", "dy"),
    "hess_xy_p": ("m", "dy", "dx"),
    "q": ("n",),
    "jac_y_q": ("n", "dy"),
    "jac_x_q": ("n", "dx"),
    "hess_xy_q": ("n", "dy", "dx"),
}

_OPTIONAL = ("p", "jac_y_p", "jac_x_p", "hess_yy_p", "hess_xy_p", "q", "jac_y_q", "jac_x_q", "hess_xy_q")


def _zeros_callback(shape):
    def fn(x, y):
        return np.zeros(shape)

    return fn


class _Checked:
    """Callable wrapper enforcing output shape and finiteness."""

    def __init__(self, name, fn, shape, dims):
        self.name = name
        self.raw = fn
        self.shape = shape
        self._dx, self._dy = dims

    def __call__(self, x, y):
        x = np.asarray(x, dtype=float).reshape(-1)
        y = np.asarray(y, dtype=float).reshape(-1)
        if x.shape[0] != self._dx or y.shape[0] != self._dy:
            raise DimensionError(
                f"{self.name}: expected x in R^{self._dx}, y in R^{self._dy}, "
                f"got {x.shape[0]} and {y.shape[0]}"
            )
        try:
            out = np.asarray(self.raw(x, y), dtype=float)
        except GamError:
            raise
        except Exception as exc:
            raise EvaluationError(f"{self.name} failed: {exc}") from exc
        if out.shape != self.shape:
            if out.size == int(np.prod(self.shape, dtype=int)):
                out = out.reshape(self.shape)
            else:
                raise DimensionError(f"{self.name} returned shape {out.shape}, expected {self.shape}")
        if not np.all(np.isfinite(out)):
            raise EvaluationError(f"{self.name} returned non-finite values at x={x}, y={y}")
        return out


@dataclass
class BilevelProblem:
    """Callback bundle describing ``min_x f(x, y*(x))`` with a convex lower level.

    ``p`` must be convex in ``y`` and ``q`` affine in ``y``; ``g`` is
    ``mu``-strongly convex in ``y``. Constraint callbacks may be omitted
    when ``m == 0`` or ``n == 0``; omitting ``hess_yy_p``/``hess_xy_p``
    declares ``p`` affine in ``y`` (and its ``y``-gradient independent of
    ``x``). ``hess_xy_q`` is only needed when ``jac_y_q`` varies with ``x``.
    """

    d_x: int
    d_y: int
    f: Callback
    grad_x_f: Callback
    grad_y_f: Callback
    g: Callback
    grad_y_g: Callback
    hess_yy_g: Callback
    hess_xy_g: Callback
    m: int = 0
    n: int = 0
    p: Optional[Callback] = None
    jac_y_p: Optional[Callback] = None
    jac_x_p: Optional[Callback] = None
    hess_yy_p: Optional[Callback] = None
    hess_xy_p: Optional[Callback] = None
    q: Optional[Callback] = None
    jac_y_q: Optional[Callback] = None
    jac_x_q: Optional[Callback] = None
    hess_xy_q: Optional[Callback] = None
    mu: float = 1.0
    name: str = "problem"
    meta: dict = field(default_factory=dict, repr=False)
    p_affine: bool = field(init=False, default=True)

    def __post_init__(self):
        for attr in ("d_x", "d_y"):
            if int(getattr(self, attr)) < 1:
                raise DimensionError(f"{attr} must be positive")
        if self.m < 0 or self.n < 0:
            raise DimensionError("constraint counts must be nonnegative")
        if not self.mu > 0:
            raise ValueError("mu must be positive")
        self.p_affine = self.hess_yy_p is None and self.hess_xy_p is None
        if self.m > 0 and any(getattr(self, k) is None for k in ("p", "jac_y_p", "jac_x_p")):
            raise ValueError("m > 0 requires p, jac_y_p and jac_x_p")
        if self.n > 0 and any(getattr(self, k) is None for k in ("q", "jac_y_q", "jac_x_q")):
            raise ValueError("n > 0 requires q, jac_y_q and jac_x_q")
        sizes = {"dx": self.d_x, "dy": self.d_y, "m": self.m, "n": self.n}
        for name, template in _SHAPES.items():
            shape = tuple(sizes[t] for t in template)
            fn = getattr(self, name)
            if isinstance(fn, _Checked):
                fn = fn.raw
            if fn is None:
                if name not in _OPTIONAL:
                    raise ValueError(f"missing callback {name}")
                fn = _zeros_callback(shape)
            setattr(self, name, _Checked(name, fn, shape, (self.d_x, self.d_y)))

    def phi(self, x, y):
        return float(self.f(x, y))

    def grad_phi(self, x, y, grad_y_star):
        """Composite gradient ``grad_x f + (dy*/dx)^T grad_y f``."""
        return self.grad_x_f(x, y) + grad_y_star.T @ self.grad_y_f(x, y)


def evaluate_lagrangian_hessians(prob: BilevelProblem, x, y, lam, nu):
    """Return ``(hess_yy_L, hess_xy_L)`` of ``L = g + lam^T p + nu^T q``.

    ``q`` is affine in ``y``, so it contributes no second-order ``y`` term;
    its mixed term is nonzero only if ``jac_y_q`` depends on ``x``.
    """
    lam = np.asarray(lam, dtype=float).reshape(-1)
    nu = np.asarray(nu, dtype=float).reshape(-1)
    if lam.shape[0] != prob.m or nu.shape[0] != prob.n:
        raise DimensionError(f"multipliers have sizes {lam.shape[0]}/{nu.shape[0]}, expected {prob.m}/{prob.n}")
    if np.any(lam < 0):
        raise ValueError("inequality multipliers must be nonnegative")
    hyy = prob.hess_yy_g(x, y)
    hxy = prob.hess_xy_g(x, y)
    if prob.m and not prob.p_affine:
        hyy = hyy + np.einsum("j,jab->ab", lam, prob.hess_yy_p(x, y))
        hxy = hxy + np.einsum("j,jab->ab", lam, prob.hess_xy_p(x, y))
    if prob.n:
        hxy = hxy + np.einsum("i,iab->ab", nu, prob.hess_xy_q(x, y))
    return 0.5 * (hyy + hyy.T), hxy


def lagrangian_gradient_y(prob: BilevelProblem, x, y, lam, nu):
    return prob.grad_y_g(x, y) + prob.jac_y_p(x, y).T @ lam + prob.jac_y_q(x, y).T @ nu


@dataclass
class KktPoint:
    """All derivative quantities at one ``(x, y, lam, nu)``."""

    x: np.ndarray
    y: np.ndarray
    lam: np.ndarray
    nu: np.ndarray
    grad_x_f: np.ndarray
    grad_y_f: np.ndarray
    p: np.ndarray
    jac_y_p: np.ndarray
    jac_x_p: np.ndarray
    q: np.ndarray
    jac_y_q: np.ndarray
    jac_x_q: np.ndarray
    hess_yy_L: np.ndarray
    hess_xy_L: np.ndarray


def _key(*arrays):
    h = hashlib.blake2b(digest_size=16)
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype=float).tobytes())
        h.update(b"|")
    return h.digest()


class EvalCache:
    """Memoizes :class:`KktPoint` evaluations for recently seen points.

    One cache belongs to one solver run; it is not thread safe.
    """

    def __init__(self, maxsize: int = 8):
        self.maxsize = maxsize
        self._store: OrderedDict = OrderedDict()
        self.hits = 0
        self.misses = 0

    def kkt_point(self, prob: BilevelProblem, x, y, lam, nu) -> KktPoint:
        x = np.asarray(x, dtype=float).reshape(-1)
        y = np.asarray(y, dtype=float).reshape(-1)
        lam = np.maximum(np.asarray(lam, dtype=float).reshape(-1), 0.0)
        nu = np.asarray(nu, dtype=float).reshape(-1)
        key = (id(prob), _key(x, y, lam, nu))
        hit = self._store.get(key)
        if hit is not None:
            self._store.move_to_end(key)
            self.hits += 1
            return hit
        self.misses += 1
        hyy, hxy = evaluate_lagrangian_hessians(prob, x, y, lam, nu)
        pt = KktPoint(
            x=x, y=y, lam=lam, nu=nu,
            grad_x_f=prob.grad_x_f(x, y), grad_y_f=prob.grad_y_f(x, y),
            p=prob.p(x, y), jac_y_p=prob.jac_y_p(x, y), jac_x_p=prob.jac_x_p(x, y),
            q=prob.q(x, y), jac_y_q=prob.jac_y_q(x, y), jac_x_q=prob.jac_x_q(x, y),
            hess_yy_L=hyy, hess_xy_L=hxy,
        )
        self._store[key] = pt
        if len(self._store) > self.maxsize:
            self._store.popitem(last=False)
        return pt


def kkt_point(prob, x, y, lam, nu, cache: Optional[EvalCache] = None) -> KktPoint:
    return (cache or EvalCache(maxsize=1)).kkt_point(prob, x, y, lam, nu)


# ---------------------------------------------------------------- validation

def fd_step(z, h=1e-6):
    return h * (1.0 + np.abs(z))


def central_jacobian(fun, z, h=1e-6):
    """Central-difference Jacobian of ``fun`` at ``z``; shape ``out.shape + (len(z),)``."""
    z = np.asarray(z, dtype=float)
    steps = fd_step(z, h)
    base = np.asarray(fun(z), dtype=float)
    jac = np.empty(base.shape + (z.size,))
    for i in range(z.size):
        e = np.zeros_like(z)
        e[i] = steps[i]
        jac[..., i] = (np.asarray(fun(z + e)) - np.asarray(fun(z - e))) / (2 * steps[i])
    return jac


def _rel_err(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(b)))))


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class ValidationReport:
    """Per-check outcome of :func:`validate_problem`.

    Strong convexity and convexity are spot checks at the sample points
    only; a pass is evidence, not proof, that the assumptions hold globally.
    """

    checks: list = field(default_factory=list)
    notes: str = (
        "Convexity and the strong-convexity modulus are verified only at the "
        "sampled points; global verification is not possible numerically."
    )

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self):
        return [c for c in self.checks if not c.passed]

    def add(self, name, passed, detail=""):
        self.checks.append(CheckResult(name, bool(passed), detail))

    def table(self) -> str:
        width = max((len(c.name) for c in self.checks), default=10)
        rows = [f"{c.name:<{width}}  {'PASS' if c.passed else 'FAIL'}  {c.detail}" for c in self.checks]
        return "\n".join(rows)


def validate_problem(
    prob: BilevelProblem,
    sample_points: Sequence,
    fd_tol: float = 1e-5,
    tol_psd: float = 1e-8,
    h: float = 1e-6,
) -> ValidationReport:
    """Numerically check derivative consistency and the convexity assumptions."""
    if len(sample_points) == 0:
        raise ValueError("need at least one sample point")
    report = ValidationReport()
    worst = {}
    symmetric = True
    min_eig = np.inf
    p_convex = True
    affine_err = 0.0
    rng = np.random.default_rng(12345)

    def track(name, err):
        worst[name] = max(worst.get(name, 0.0), err)

    for x, y in sample_points:
        x = np.asarray(x, dtype=float).reshape(-1)
        y = np.asarray(y, dtype=float).reshape(-1)
        fy = lambda yy: prob.f(x, yy)  # noqa: E731
        fx = lambda xx: prob.f(xx, y)  # noqa: E731
        track("grad_y_f", _rel_err(prob.grad_y_f(x, y), central_jacobian(fy, y, h)))
        track("grad_x_f", _rel_err(prob.grad_x_f(x, y), central_jacobian(fx, x, h)))
        track("grad_y_g", _rel_err(prob.grad_y_g(x, y), central_jacobian(lambda yy: prob.g(x, yy), y, h)))
        track("hess_yy_g", _rel_err(prob.hess_yy_g(x, y), central_jacobian(lambda yy: prob.grad_y_g(x, yy), y, h)))
        track("hess_xy_g", _rel_err(prob.hess_xy_g(x, y), central_jacobian(lambda xx: prob.grad_y_g(xx, y), x, h)))
        if prob.m:
            track("jac_y_p", _rel_err(prob.jac_y_p(x, y), central_jacobian(lambda yy: prob.p(x, yy), y, h)))
            track("jac_x_p", _rel_err(prob.jac_x_p(x, y), central_jacobian(lambda xx: prob.p(xx, y), x, h)))
            track("hess_yy_p", _rel_err(prob.hess_yy_p(x, y), central_jacobian(lambda yy: prob.jac_y_p(x, yy), y, h)))
            track("hess_xy_p", _rel_err(prob.hess_xy_p(x, y), central_jacobian(lambda xx: prob.jac_y_p(xx, y), x, h)))
            for hp in prob.hess_yy_p(x, y):
                hp = 0.5 * (hp + hp.T)
                if np.linalg.eigvalsh(hp).min() < -tol_psd:
                    p_convex = False
        if prob.n:
            track("jac_y_q", _rel_err(prob.jac_y_q(x, y), central_jacobian(lambda yy: prob.q(x, yy), y, h)))
            track("jac_x_q", _rel_err(prob.jac_x_q(x, y), central_jacobian(lambda xx: prob.q(xx, y), x, h)))
            track("hess_xy_q", _rel_err(prob.hess_xy_q(x, y), central_jacobian(lambda xx: prob.jac_y_q(xx, y), x, h)))
            y2 = y + rng.normal(size=y.shape) * (1.0 + np.abs(y))
            lhs = prob.q(x, y) - prob.q(x, y2)
            rhs = prob.jac_y_q(x, y2) @ (y - y2)
            affine_err = max(affine_err, _rel_err(lhs, rhs))
        H = prob.hess_yy_g(x, y)
        if np.max(np.abs(H - H.T)) > 1e-10 * max(1.0, np.max(np.abs(H))):
            symmetric = False
        min_eig = min(min_eig, float(np.linalg.eigvalsh(0.5 * (H + H.T)).min()))

    for name, err in worst.items():
        report.add(f"derivative:{name}", err <= fd_tol, f"max rel err {err:.2e}")
    report.add("hessian_g_symmetric", symmetric)
    report.add("strong_convexity_g", min_eig >= prob.mu - tol_psd, f"min eig {min_eig:.3e}, mu {prob.mu:.3e}")
    if prob.n:
        report.add("q_affine_in_y", affine_err <= fd_tol, f"max rel err {affine_err:.2e}")
    if prob.m:
        report.add("p_convex_in_y", p_convex)
    return report


def random_sample_points(prob: BilevelProblem, count: int, seed: int = 0, scale: float = 1.0):
    rng = np.random.default_rng(seed)
    return [(scale * rng.normal(size=prob.d_x), scale * rng.normal(size=prob.d_y)) for _ in range(count)]


def finite_difference_problem(
    d_x, d_y, f, g, p=None, q=None, m=0, n=0, mu=1.0, h=1e-5, name="fd-problem"
) -> BilevelProblem:
    """Build a problem from value callbacks only, differentiating numerically.

    Intended for prototyping: second derivatives come from differencing
    numerical gradients and carry roughly ``sqrt(machine eps)`` error.
    """

    def grad(fun, wrt):
        def d(x, y):
            if wrt == "x":
                return central_jacobian(lambda xx: fun(xx, y), x, h)
            return central_jacobian(lambda yy: fun(x, yy), y, h)

        return d

    grad_y_g = grad(g, "y")
    kwargs = dict(
        d_x=d_x, d_y=d_y, m=m, n=n, mu=mu, name=name,
        f=f, grad_x_f=grad(f, "x"), grad_y_f=grad(f, "y"),
        g=g, grad_y_g=grad_y_g, hess_yy_g=grad(grad_y_g, "y"), hess_xy_g=grad(grad_y_g, "x"),
    )
    if m:
        jac_y_p = grad(p, "y")
        kwargs.update(p=p, jac_y_p=jac_y_p, jac_x_p=grad(p, "x"),
                      hess_yy_p=grad(jac_y_p, "y"), hess_xy_p=grad(jac_y_p, "x"))
    if n:
        jac_y_q = grad(q, "y")
        kwargs.update(q=q, jac_y_q=jac_y_q, jac_x_q=grad(q, "x"), hess_xy_q=grad(jac_y_q, "x"))
    return BilevelProblem(**kwargs)
