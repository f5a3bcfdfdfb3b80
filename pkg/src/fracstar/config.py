"""Run configuration: one TOML document with graph, discretization, problem,
regret and output blocks.

Coefficients and data are numbers or expressions in ``x``, ``t`` and
``edge`` (one-based edge number) parsed with sympy; a list gives one entry
per edge (coefficients, data) or per control (control signals).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Callable

import numpy as np
import sympy
import tomli
from sympy.parsing.sympy_parser import parse_expr

from .regret_control import DEFAULT_TAUS, RegretConfig
from .star_graph import ValidationError

__all__ = [
    "ConfigError",
    "GraphConfig",
    "DiscretizationConfig",
    "ProblemConfig",
    "RegretBlock",
    "OutputConfig",
    "RunConfig",
    "load_config",
    "parse_config",
    "compile_expression",
]


class ConfigError(ValidationError):
    """Invalid configuration; the message starts with the field path."""


_X, _T, _EDGE = sympy.symbols("x t edge", real=True)
_NAMES = {
    "x": _X, "t": _T, "edge": _EDGE, "pi": sympy.pi, "E": sympy.E,
    "exp": sympy.exp, "log": sympy.log, "sqrt": sympy.sqrt, "sin": sympy.sin,
    "cos": sympy.cos, "tan": sympy.tan, "sinh": sympy.sinh, "cosh": sympy.cosh,
    "tanh": sympy.tanh, "Abs": sympy.Abs, "abs": sympy.Abs, "Min": sympy.Min,
    "Max": sympy.Max, "Heaviside": sympy.Heaviside, "Piecewise": sympy.Piecewise,
    "Integer": sympy.Integer, "Float": sympy.Float, "Rational": sympy.Rational,
    "Symbol": sympy.Symbol,
}


def compile_expression(src, path: str, allowed=("x", "t", "edge")) -> Callable[..., np.ndarray]:
    """Vectorized ``fn(x, t, edge)`` from a number or an expression string."""
    if isinstance(src, bool):
        raise ConfigError(f"{path}: expected a number or an expression, got {src!r}")
    if isinstance(src, (int, float)):
        val = float(src)
        return lambda x, t, edge: np.full(np.broadcast(x, t).shape, val)
    if not isinstance(src, str):
        raise ConfigError(f"{path}: expected a number or an expression, got {src!r}")
    try:
        expr = parse_expr(src, local_dict=dict(_NAMES), global_dict={"__builtins__": {}})
    except Exception as exc:
        raise ConfigError(f"{path}: cannot parse {src!r} ({exc})") from exc
    if not isinstance(expr, sympy.Expr):
        raise ConfigError(f"{path}: {src!r} is not a scalar expression")
    bad = {s.name for s in expr.free_symbols} - set(allowed)
    if bad:
        raise ConfigError(f"{path}: unknown symbols {sorted(bad)} (allowed: {', '.join(allowed)})")
    fn = sympy.lambdify((_X, _T, _EDGE), expr, modules="numpy")

    def run(x, t, edge):
        out = np.asarray(fn(x, t, edge), dtype=float)
        return np.broadcast_to(out, np.broadcast(x, t).shape).copy()

    return run


def _per_edge(value, n: int, path: str) -> list:
    if isinstance(value, list):
        if len(value) != n:
            raise ConfigError(f"{path}: needs {n} entries, got {len(value)}")
        return value
    return [value] * n


@dataclass(frozen=True)
class GraphConfig:
    N: int = 3
    m: int = 2
    a: float = 0.0
    #: edge lengths, one number or one per edge
    lengths: Any = 1.0
    beta: Any = "1 + x/2"
    q: Any = 1.0


@dataclass(frozen=True)
class DiscretizationConfig:
    #: cells per edge, one number or one per edge
    n: Any = 32
    n_t: int = 32
    alpha: float = 0.6
    gamma: float = 0.6
    T: float = 1.0
    #: number of modes; None keeps all of them
    modes: int | None = None


@dataclass(frozen=True)
class ProblemConfig:
    f: Any = "x*(1 - x)*exp(-t)"
    y_d: Any = "sin(pi*x/2)/2"
    #: initial datum for the solve command
    y0: Any = 0.0
    #: control signals for the solve command, one per controlled edge
    controls: Any = 0.0
    zeta: float = 1.0
    n_eigen_samples: int = 10
    n_random_samples: int = 5
    seed: int = 0


@dataclass(frozen=True)
class RegretBlock:
    taus: tuple[float, ...] = DEFAULT_TAUS
    #: single tau for the low-regret command
    tau: float = 1e-3
    cg_tol: float = 1e-10
    cg_max_iter: int = 500
    warm_start: bool = True


@dataclass(frozen=True)
class OutputConfig:
    dir: str = "out"
    formats: tuple[str, ...] = ("json", "csv")


@dataclass(frozen=True)
class RunConfig:
    graph: GraphConfig = field(default_factory=GraphConfig)
    discretization: DiscretizationConfig = field(default_factory=DiscretizationConfig)
    problem: ProblemConfig = field(default_factory=ProblemConfig)
    regret: RegretBlock = field(default_factory=RegretBlock)
    output: OutputConfig = field(default_factory=OutputConfig)

    def regret_config(self) -> RegretConfig:
        p, r = self.problem, self.regret
        return RegretConfig(
            zeta=p.zeta, taus=r.taus, cg_tol=r.cg_tol, cg_max_iter=r.cg_max_iter,
            n_eigen_samples=p.n_eigen_samples, n_random_samples=p.n_random_samples,
            seed=p.seed, warm_start=r.warm_start,
        )


_BLOCKS = {
    "graph": GraphConfig,
    "discretization": DiscretizationConfig,
    "problem": ProblemConfig,
    "regret": RegretBlock,
    "output": OutputConfig,
}


def _check_number(path: str, value, lo=None, hi=None, integer=False, lo_open=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{path}: expected a number, got {value!r}")
    if integer and int(value) != value:
        raise ConfigError(f"{path}: expected an integer, got {value!r}")
    if not math.isfinite(value):
        raise ConfigError(f"{path}: must be finite")
    if lo is not None and (value < lo or (lo_open and value == lo)):
        raise ConfigError(f"{path}: must be {'>' if lo_open else '>='} {lo}, got {value}")
    if hi is not None and value > hi:
        raise ConfigError(f"{path}: must be <= {hi}, got {value}")


def _validate(cfg: RunConfig) -> None:
    g, d, p, r = cfg.graph, cfg.discretization, cfg.problem, cfg.regret
    _check_number("graph.N", g.N, lo=1, integer=True)
    _check_number("graph.m", g.m, lo=1, hi=g.N, integer=True)
    for j, ln in enumerate(_per_edge(g.lengths, g.N, "graph.lengths")):
        _check_number(f"graph.lengths[{j}]", ln, lo=0.0, lo_open=True)
    for name in ("beta", "q"):
        for j, src in enumerate(_per_edge(getattr(g, name), g.N, f"graph.{name}")):
            compile_expression(src, f"graph.{name}[{j}]", allowed=("x",))
    for j, ni in enumerate(_per_edge(d.n, g.N, "discretization.n")):
        _check_number(f"discretization.n[{j}]", ni, lo=2, integer=True)
    _check_number("discretization.n_t", d.n_t, lo=4, integer=True)
    _check_number("discretization.alpha", d.alpha, lo=0.0, hi=1.0, lo_open=True)
    _check_number("discretization.gamma", d.gamma, lo=0.0, hi=1.0, lo_open=True)
    _check_number("discretization.T", d.T, lo=0.0, lo_open=True)
    if d.modes is not None:
        _check_number("discretization.modes", d.modes, lo=1, integer=True)
    for name in ("f", "y_d"):
        for j, src in enumerate(_per_edge(getattr(p, name), g.N, f"problem.{name}")):
            compile_expression(src, f"problem.{name}[{j}]")
    for j, src in enumerate(_per_edge(p.y0, g.N, "problem.y0")):
        compile_expression(src, f"problem.y0[{j}]", allowed=("x", "edge"))
    for j, src in enumerate(_per_edge(p.controls, g.N - 1, "problem.controls")):
        compile_expression(src, f"problem.controls[{j}]", allowed=("t",))
    _check_number("problem.zeta", p.zeta, lo=0.0, lo_open=True)
    _check_number("problem.n_eigen_samples", p.n_eigen_samples, lo=0, integer=True)
    _check_number("problem.n_random_samples", p.n_random_samples, lo=0, integer=True)
    _check_number("problem.seed", p.seed, lo=0, integer=True)
    if not r.taus:
        raise ConfigError("regret.taus: must not be empty")
    for j, tau in enumerate(r.taus):
        _check_number(f"regret.taus[{j}]", tau, lo=0.0, lo_open=True)
    if any(b >= a for a, b in zip(r.taus, r.taus[1:])):
        raise ConfigError("regret.taus: must be strictly decreasing")
    _check_number("regret.tau", r.tau, lo=0.0, lo_open=True)
    _check_number("regret.cg_tol", r.cg_tol, lo=0.0, hi=0.5, lo_open=True)
    _check_number("regret.cg_max_iter", r.cg_max_iter, lo=1, integer=True)
    if not isinstance(r.warm_start, bool):
        raise ConfigError("regret.warm_start: expected true or false")
    for fmt in cfg.output.formats:
        if fmt not in ("json", "csv"):
            raise ConfigError(f"output.formats: unknown format {fmt!r} (json, csv)")


def parse_config(doc: dict) -> RunConfig:
    """Build and validate a :class:`RunConfig` from a parsed TOML mapping."""
    unknown = set(doc) - set(_BLOCKS)
    if unknown:
        raise ConfigError(f"{sorted(unknown)[0]}: unknown block (expected {', '.join(_BLOCKS)})")
    blocks = {}
    for name, cls in _BLOCKS.items():
        raw = doc.get(name, {})
        if not isinstance(raw, dict):
            raise ConfigError(f"{name}: expected a table")
        names = {f.name for f in fields(cls)}
        extra = set(raw) - names
        if extra:
            raise ConfigError(f"{name}.{sorted(extra)[0]}: unknown field")
        vals = dict(raw)
        for key in ("taus", "formats"):
            if key in vals:
                if not isinstance(vals[key], list):
                    raise ConfigError(f"{name}.{key}: expected a list")
                vals[key] = tuple(vals[key])
        blocks[name] = cls(**vals)
    cfg = RunConfig(**blocks)
    _validate(cfg)
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return parse_config({})
    path = Path(path)
    try:
        with path.open("rb") as fh:
            doc = tomli.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config: file not found: {path}") from exc
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"config: invalid TOML in {path} ({exc})") from exc
    return parse_config(doc)
