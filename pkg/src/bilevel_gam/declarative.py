"""JSON description of QP-representable bilevel problems.

Example::

    {
      "name": "demo", "d_x": 1, "d_y": 2,
      "lower": {
        "Q0": [[2, 0], [0, 1]],
        "Q_exp_diag": [[0, 0, 1.0]],
        "c0": [0, -1], "C": [[1], [0]],
        "G": [[1, 1]], "h0": [1], "H": [[0]]
      },
      "upper": {"type": "quadratic", "T": [[1], [0]], "rho": 0.1}
    }

Lower level: ``g = 1/2 y'Q(x)y + c(x)'y`` with ``Q(x) = Q0 + sum s * exp(x[k]) e_i e_i'``
over ``Q_exp_diag`` entries ``[i, k, s]`` and ``c(x) = c0 + C x``; inequalities
``G y <= h0 + H x``; equalities ``A y = b0 + B x``.

Upper level: ``"quadratic"`` gives ``1/2 |y - T x - t0|^2 + rho/2 |x|^2``;
``"logistic"`` gives ``mean log(1 + exp(-l_i z_i'y)) + rho/2 |x|^2`` with
rows ``Z`` and labels ``labels``.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .problem import BilevelProblem


def _mat(desc, key, shape, default_zero=True):
    if key not in desc:
        if default_zero:
            return np.zeros(shape)
        raise ConfigError(f"missing field {key!r}")
    arr = np.asarray(desc[key], float)
    try:
        return arr.reshape(shape)
    except ValueError:
        raise ConfigError(f"field {key!r} has shape {arr.shape}, expected {shape}") from None


def problem_from_dict(desc: dict) -> BilevelProblem:
    try:
        d_x, d_y = int(desc["d_x"]), int(desc["d_y"])
        low = desc["lower"]
        up = desc.get("upper", {"type": "quadratic"})
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad problem description: {exc}") from None
    Q0 = _mat(low, "Q0", (d_y, d_y), default_zero=False)
    exp_diag = [(int(i), int(k), float(s)) for i, k, s in low.get("Q_exp_diag", [])]
    for i, k, _ in exp_diag:
        if not (0 <= i < d_y and 0 <= k < d_x):
            raise ConfigError(f"Q_exp_diag entry ({i}, {k}) out of range")
    c0 = _mat(low, "c0", (d_y,))
    C = _mat(low, "C", (d_y, d_x))
    m = len(low.get("G", []))
    n = len(low.get("A", []))
    G = _mat(low, "G", (m, d_y))
    h0 = _mat(low, "h0", (m,))
    H = _mat(low, "H", (m, d_x))
    A = _mat(low, "A", (n, d_y))
    b0 = _mat(low, "b0", (n,))
    B = _mat(low, "B", (n, d_x))

    if "mu" in desc:
        mu = float(desc["mu"])
    elif all(s >= 0 for _, _, s in exp_diag):
        mu = float(np.linalg.eigvalsh(0.5 * (Q0 + Q0.T))[0])
    else:
        raise ConfigError("negative Q_exp_diag scale requires an explicit 'mu'")
    if mu <= 0:
        raise ConfigError("lower-level objective is not strongly convex (mu <= 0)")

    def Qx(x):
        Q = Q0.copy()
        for i, k, s in exp_diag:
            Q[i, i] += s * np.exp(x[k])
        return Q

    def hess_xy_g(x, y):
        out = C.copy()
        for i, k, s in exp_diag:
            out[i, k] += s * np.exp(x[k]) * y[i]
        return out

    lower = dict(
        g=lambda x, y: 0.5 * y @ Qx(x) @ y + (c0 + C @ x) @ y,
        grad_y_g=lambda x, y: Qx(x) @ y + c0 + C @ x,
        hess_yy_g=lambda x, y: Qx(x),
        hess_xy_g=hess_xy_g,
    )
    if m:
        lower.update(m=m, p=lambda x, y: G @ y - h0 - H @ x, jac_y_p=lambda x, y: G, jac_x_p=lambda x, y: -H)
    if n:
        lower.update(n=n, q=lambda x, y: A @ y - b0 - B @ x, jac_y_q=lambda x, y: A, jac_x_q=lambda x, y: -B)

    rho = float(up.get("rho", 0.0))
    kind = up.get("type", "quadratic")
    if kind == "quadratic":
        T = _mat(up, "T", (d_y, d_x))
        t0 = _mat(up, "t0", (d_y,))
        upper = dict(
            f=lambda x, y: 0.5 * np.sum((y - T @ x - t0) ** 2) + 0.5 * rho * x @ x,
            grad_x_f=lambda x, y: -T.T @ (y - T @ x - t0) + rho * x,
            grad_y_f=lambda x, y: y - T @ x - t0,
        )
    elif kind == "logistic":
        Z = np.atleast_2d(np.asarray(up.get("Z"), float))
        lab = np.asarray(up.get("labels"), float).reshape(-1)
        if Z.shape != (lab.size, d_y):
            raise ConfigError(f"logistic Z must have shape ({lab.size}, {d_y})")

        def margins(y):
            return -lab * (Z @ y)

        upper = dict(
            f=lambda x, y: float(np.mean(np.logaddexp(0.0, margins(y)))) + 0.5 * rho * x @ x,
            grad_x_f=lambda x, y: rho * x,
            grad_y_f=lambda x, y: Z.T @ (-lab / (1.0 + np.exp(-margins(y)))) / lab.size,
        )
    else:
        raise ConfigError(f"unknown upper objective type {kind!r}")

    return BilevelProblem(d_x=d_x, d_y=d_y, mu=mu, name=str(desc.get("name", "declared")), **lower, **upper)


def load_problem(path) -> BilevelProblem:
    path = Path(path)
    try:
        desc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"problem file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from None
    return problem_from_dict(desc)
