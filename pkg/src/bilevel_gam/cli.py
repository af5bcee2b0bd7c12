"""Command-line front end: ``bilevel-gam run`` and ``bilevel-gam verify``."""
from __future__ import annotations

import argparse
import importlib
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import problems as P
from .declarative import load_problem
from .errors import ConfigError, GamError
from .gam import GamConfig, run, write_trace_csv, write_trace_json
from .oracle import run_oracle_suite

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("bilevel_gam")

BUILTINS = ("example1", "qp", "degenerate-qp", "svm-toy", "hyperclean")

# flag name -> GamConfig field
FLAG_FIELDS = {
    "eps0": "eps0", "nu0": "nu0", "beta": "beta", "gamma": "gamma",
    "theta_eps": "theta_eps", "theta_nu": "theta_nu", "eps_opt": "eps_opt", "nu_opt": "nu_opt",
    "max_iters": "max_outer_iters", "lipschitz_delta": "lipschitz_delta",
    "lower_tol": "lower_tol", "tol_active": "tol_active", "seed": "seed",
}


def build_problem(name: str, seed: int = 0):
    """Return ``(problem, default_x0, reference_solver_or_None)``."""
    if name == "example1":
        return P.make_example1(), np.array([2.0]), None
    if name == "qp":
        prob, ref = P.make_bilevel_qp(seed)
        return prob, np.zeros(prob.d_x), ref
    if name == "degenerate-qp":
        prob, x0 = P.make_degenerate_qp(seed)
        return prob, x0, P.qp_reference_solver(prob)
    if name == "svm-toy":
        prob = P.make_svm_toy(seed)
        return prob, np.zeros(prob.d_x), None
    if name == "hyperclean":
        prob, _ = P.make_hyperclean(seed)
        return prob, np.zeros(prob.d_x), None
    if ":" in name:
        mod, _, attr = name.partition(":")
        try:
            factory = getattr(importlib.import_module(mod), attr)
        except (ImportError, AttributeError) as exc:
            raise ConfigError(f"cannot load problem factory {name!r}: {exc}") from None
        prob = factory()
        return prob, np.zeros(prob.d_x), None
    if Path(name).suffix == ".json" or Path(name).exists():
        prob = load_problem(name)
        return prob, np.zeros(prob.d_x), None
    raise ConfigError(f"unknown problem {name!r}; choose from {', '.join(BUILTINS)}, a JSON file or module:factory")


def load_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError:
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path} is neither valid TOML nor JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config must be a table/object")
    return data.get("gam", data)


def parse_x0(text, d_x):
    try:
        vals = np.array([float(v) for v in str(text).replace(",", " ").split()])
    except ValueError:
        raise ConfigError(f"cannot parse --x0 {text!r}") from None
    if vals.size == 1:
        return np.full(d_x, vals[0])
    if vals.size != d_x:
        raise ConfigError(f"--x0 has {vals.size} entries, problem needs {d_x}")
    return vals


def parse_seeds(text):
    seeds = []
    for part in text.split(","):
        if "-" in part:
            a, b = part.split("-")
            seeds.extend(range(int(a), int(b) + 1))
        elif part.strip():
            seeds.append(int(part))
    return seeds


def _settings(args):
    """Merge file config and flags into (problem name, x0 text, GamConfig)."""
    data = load_config(args.config) if args.config else {}
    data = dict(data)
    problem = args.problem or data.pop("problem", None)
    x0 = args.x0 if args.x0 is not None else data.pop("x0", None)
    data.pop("problem", None)
    data.pop("x0", None)
    if problem is None:
        raise ConfigError("no problem given (use --problem or a 'problem' key in the config)")
    overrides = {FLAG_FIELDS[k]: getattr(args, k) for k in FLAG_FIELDS}
    cfg = GamConfig.from_mapping(data, **overrides)
    return problem, x0, cfg


def _run_one(problem, x0_text, cfg, out):
    prob, x0, _ = build_problem(problem, cfg.seed)
    if x0_text is not None:
        x0 = parse_x0(x0_text if isinstance(x0_text, str) else " ".join(map(str, np.atleast_1d(x0_text))), prob.d_x)
    res = run(prob, x0, cfg)
    if out:
        out = Path(out)
        out.parent.mkdir(parents=True, exist_ok=True)
        if out.suffix == ".json":
            write_trace_json(res, out)
        else:
            write_trace_csv(res.trace, out)
    return res


def _summary(res, seed=None):
    head = f"seed={seed} " if seed is not None else ""
    return (f"{head}phi={res.phi:.10g} g_norm={res.g_norm:.3e} eps={res.eps:.3e} "
            f"iterations={res.iterations} converged={res.converged}")


def _sweep_task(job):
    problem, x0, cfg, out = job
    try:
        return cfg.seed, _summary(_run_one(problem, x0, cfg, out), cfg.seed), None
    except GamError as exc:
        return cfg.seed, None, f"{type(exc).__name__}: {exc}"


def cmd_run(args) -> int:
    try:
        problem, x0, cfg = _settings(args)
        if args.sweep:
            jobs = []
            for s in parse_seeds(args.sweep):
                c = GamConfig.from_mapping({**cfg.__dict__, "seed": s})
                out = None
                if args.out:
                    o = Path(args.out)
                    out = o.with_name(f"{o.stem}_seed{s}{o.suffix}")
                jobs.append((problem, x0, c, out))
            if args.jobs > 1:
                with ProcessPoolExecutor(max_workers=args.jobs) as ex:
                    results = list(ex.map(_sweep_task, jobs))
            else:
                results = [_sweep_task(j) for j in jobs]
            status = 0
            for seed, line, err in results:
                if err:
                    print(f"seed={seed} error: {err}", file=sys.stderr)
                    status = 1
                else:
                    print(line)
            return status
        res = _run_one(problem, x0, cfg, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except GamError as exc:
        print(f"solver error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(_summary(res))
    return 0


def verify_points(name, prob, x0, seed, count=4):
    if name == "example1":
        return [np.array([v]) for v in (-2, -1.5, -1, -0.5, -0.1, 0, 0.3, 1, 2)]
    rng = np.random.default_rng(seed)
    return [np.asarray(x0, float)] + [x0 + rng.standard_normal(prob.d_x) for _ in range(count - 1)]


def cmd_verify(args) -> int:
    try:
        if not args.problem:
            raise ConfigError("--problem is required")
        prob, x0, ref = build_problem(args.problem, args.seed)
        report = run_oracle_suite(prob, verify_points(args.problem, prob, x0, args.seed), reference=ref, seed=args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except GamError as exc:
        print(f"solver error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(report.table())
    print("ALL PASS" if report.passed else f"{len(report.failures())} FAILED")
    return 0 if report.passed else 1


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bilevel-gam", description="Gradient approximation method for bilevel problems")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run the descent method")
    r.add_argument("--problem", help=f"{', '.join(BUILTINS)}, a JSON file, or module:factory")
    r.add_argument("--config", help="TOML (or JSON) file with config fields")
    r.add_argument("--x0", help="initial point, comma or space separated; one value is broadcast")
    for flag, typ in [("eps0", float), ("nu0", float), ("beta", float), ("gamma", float),
                      ("theta-eps", float), ("theta-nu", float), ("eps-opt", float), ("nu-opt", float),
                      ("max-iters", int), ("lipschitz-delta", float), ("lower-tol", float),
                      ("tol-active", float)]:
        r.add_argument(f"--{flag}", type=typ)
    r.add_argument("--seed", type=int)
    r.add_argument("--out", help="trace file (.csv or .json)")
    r.add_argument("--sweep", help="seed list for repeated runs, e.g. 0-9 or 1,4,7")
    r.add_argument("--jobs", type=int, default=1, help="parallel workers for --sweep")
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("verify", help="run the oracle checks on a problem")
    v.add_argument("--problem", required=True)
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
