"""Command line runner: ``fracstar eigs | solve | low-regret | tau-sweep | validate``.

Reports are schema-versioned JSON (every number carries the tag of the
equation that defines it) plus CSV files for fields and signals.

Exit codes: 0 success, 2 invalid configuration or data, 3 solver
non-convergence, 4 invariant violation.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import click
import numpy as np

from . import fractional_kernels as fk
from .config import ConfigError, RunConfig, compile_expression, load_config
from .evolution_solvers import (
    BackwardScheme,
    ControlledSystem,
    make_context,
    make_controlled_system,
    rl_weighted_trace,
    solve_backward,
    solve_caputo_forward,
    solve_controlled,
    solve_rl_forward,
    transposition_residual,
)
from .mittag_leffler import MLConvergenceError, ml
from .operator_assembly import AssemblyError, DiscreteOperator, assemble, eigensolve, kirchhoff_residual
from .regret_control import (
    NoRegretCertificate,
    OptimalityBundle,
    RegretProblem,
    cost_Jtau,
    gradient_Jtau,
    inner,
    make_problem,
    minimize_low_regret,
    regret_gap,
    tau_sweep,
)
from .star_graph import (
    BoundaryControl,
    GraphField,
    GraphGrid,
    StarGraph,
    TimeGrid,
    ValidationError,
    validate as check_coefficients,
)

__all__ = ["Instance", "build_instance", "Check", "run_checks", "main"]

SCHEMA = "fracstar.report/1"
EXIT_OK, EXIT_INVALID, EXIT_NONCONVERGED, EXIT_VIOLATION = 0, 2, 3, 4

log = logging.getLogger(__name__)


# {{{ instance


@dataclass(frozen=True)
class Instance:
    config: RunConfig
    graph: StarGraph
    grid: GraphGrid
    time: TimeGrid
    op: DiscreteOperator = field(repr=False)
    system: ControlledSystem = field(repr=False)
    f: GraphField = field(repr=False)
    y_d: GraphField = field(repr=False)
    y0: np.ndarray = field(repr=False)
    controls: BoundaryControl = field(repr=False)

    @property
    def ctx(self):
        return self.system.ctx

    def problem(self) -> RegretProblem:
        return make_problem(self.system, self.y_d, self.f, self.config.problem.zeta)


def _edge_list(value, n):
    return value if isinstance(value, list) else [value] * n


def _coefficient(src, path):
    fn = compile_expression(src, path, allowed=("x",))
    return lambda x: fn(x, 0.0, 0.0)


def _space_time(grid: GraphGrid, time: TimeGrid, src, path: str) -> GraphField:
    fns = [compile_expression(s, f"{path}[{j}]") for j, s in enumerate(_edge_list(src, grid.graph.N))]
    return GraphField.from_function(grid, time, lambda i, x, t: fns[i](x, t, float(i + 1)))


def build_instance(cfg: RunConfig) -> Instance:
    g, d, p = cfg.graph, cfg.discretization, cfg.problem
    lengths = _edge_list(g.lengths, g.N)
    betas = [_coefficient(s, f"graph.beta[{j}]") for j, s in enumerate(_edge_list(g.beta, g.N))]
    qs = [_coefficient(s, f"graph.q[{j}]") for j, s in enumerate(_edge_list(g.q, g.N))]
    graph = StarGraph(N=g.N, m=g.m, a=g.a, b=tuple(g.a + float(ln) for ln in lengths),
                      beta=tuple(betas), q=tuple(qs))
    grid = GraphGrid(graph, d.n)
    try:
        check_coefficients(grid)
    except ValidationError as exc:
        raise ConfigError(f"graph: {exc}") from exc
    time = TimeGrid(d.T, d.n_t)
    op = assemble(grid, d.alpha)
    ctx = make_context(op, time, d.gamma, k=d.modes)
    system = make_controlled_system(ctx)
    f = _space_time(grid, time, p.f, "problem.f")
    y_d = _space_time(grid, time, p.y_d, "problem.y_d")
    y0_fns = [compile_expression(s, f"problem.y0[{j}]", allowed=("x", "edge"))
              for j, s in enumerate(_edge_list(p.y0, g.N))]
    y0 = grid.sample(lambda i, x: y0_fns[i](x, 0.0, float(i + 1)))
    c_fns = [compile_expression(s, f"problem.controls[{j}]", allowed=("t",))
             for j, s in enumerate(_edge_list(p.controls, graph.n_controls))]
    tn = time.nodes
    cvals = np.array([fn(0.0 * tn, tn, 0.0) for fn in c_fns]).reshape(graph.n_controls, tn.size)
    controls = BoundaryControl(time, cvals)
    return Instance(cfg, graph, grid, time, op, system, f, y_d, y0, controls)


# }}}


# {{{ output


def _tag(value, tag: str) -> dict:
    if isinstance(value, (bool, np.bool_)):
        return {"value": bool(value), "tag": tag}
    if isinstance(value, (int, np.integer)):
        return {"value": int(value), "tag": tag}
    return {"value": float(value), "tag": tag}


def _config_summary(cfg: RunConfig) -> dict:
    return json.loads(json.dumps(asdict(cfg), default=str))


class Writer:
    def __init__(self, out: Path, formats, command: str, cfg: RunConfig, seed: int) -> None:
        self.out = out
        self.formats = set(formats)
        self.command = command
        self.cfg = cfg
        self.seed = seed
        out.mkdir(parents=True, exist_ok=True)
        self.files: list[str] = []

    def json(self, name: str, payload: dict) -> None:
        if "json" not in self.formats:
            return
        doc = {"schema": SCHEMA, "command": self.command, "seed": self.seed,
               "config": _config_summary(self.cfg), **payload}
        path = self.out / name
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        self.files.append(str(path))

    def csv(self, name: str, header, rows) -> None:
        if "csv" not in self.formats:
            return
        path = self.out / name
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in rows:
                w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
        self.files.append(str(path))

    def field(self, name: str, fld: GraphField) -> None:
        grid = fld.grid
        t = fld.time.nodes

        def rows():
            for n in range(t.size):
                if n == fld.singular_row:
                    continue
                for i, e in enumerate(grid.edges):
                    seg = fld.values[n, grid.edge_slice(i)]
                    for j, x in enumerate(e.nodes):
                        yield (float(t[n]), i + 1, j, float(x), float(seg[j]))

        self.csv(name, ("t", "edge", "node", "x", "value"), rows())

    def control(self, name: str, v: BoundaryControl) -> None:
        header = ("t",) + tuple(f"v{i + 2}" for i in range(v.values.shape[0]))
        self.csv(name, header, ((float(t), *map(float, v.values[:, n]))
                                for n, t in enumerate(v.time.nodes)))


# }}}


# {{{ records


def bundle_record(b: OptimalityBundle) -> dict:
    return {
        "tau": _tag(b.tau, "Op4"),
        "J": _tag(b.J_u, "mp2"),
        "J_00": _tag(b.J_00, "mp2"),
        "J_tau": _tag(b.J_tau, "Eq6"),
        "trace_norm": _tag(b.trace_norm, "3inter"),
        "sqrt_tau_bound": _tag(b.trace_bound, "3inter"),
        "control_norm": _tag(b.control_norm, "2inter"),
        "control_bound": _tag(b.misfit_00, "2inter"),
        "cg_iters": _tag(b.cg_iters, "inter7"),
        "grad_residual": _tag(b.grad_residual, "inter7"),
        "converged": _tag(b.converged, "inter7"),
    }


def certificate_record(c: NoRegretCertificate) -> dict:
    return {
        "cauchy": [{"tau_from": _tag(t0, "Op4"), "tau_to": _tag(t1, "Op4"), "gap": _tag(g, "Op4")}
                   for t0, t1, g in zip(c.taus, c.taus[1:], c.cauchy)],
        "trace_table": [{"tau": _tag(t, "Op4"), "trace_norm": _tag(n, "3inter"),
                         "sqrt_tau_bound": _tag(bd, "3inter")} for t, n, bd in c.trace_table],
        "pairings": [{"value": _tag(pv, "defU"), "sample_norm": _tag(sn, "defU")}
                     for pv, sn in zip(c.pairings, c.sample_norms)],
        "zeta1_norm": _tag(c.zeta1_norm, "13inter"),
        "zeta2_norm": _tag(c.zeta2_norm, "10inter"),
        "stationarity": _tag(c.stationarity, "7inter"),
        "misfit_00": _tag(c.misfit_00, "2inter"),
    }


# }}}


# {{{ checks


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str


def _test_batch(inst: Instance, count: int = 3):
    out = []
    for k in range(count):
        g = GraphField.from_function(
            inst.grid, inst.time,
            lambda i, x, t, k=k: np.cos(0.5 * np.pi * x * (i + k + 1)) * np.sin(np.pi * t * (k + 1)),
        )
        out.append((g, solve_backward(inst.ctx, None, g, BackwardScheme.ADJOINT)))
    return out


def run_checks(inst: Instance, with_regret: bool = True) -> list[Check]:
    """Module invariants on the configured instance."""
    checks: list[Check] = []
    add = lambda name, ok, detail: checks.append(Check(name, bool(ok), detail))
    op = inst.op

    # special functions
    err = max(abs(ml(1, 1, 1) / math.e - 1), abs(ml(2, 1, -1) / math.cos(1) - 1))
    add("mittag_leffler.identities", err <= 1e-10, f"max relative error {err:.2e}")

    # kernels: duality and L2 bound on each edge
    worst_dual, worst_norm = 0.0, 0.0
    rng = np.random.default_rng(inst.config.problem.seed)
    for e in inst.grid.edges:
        for order in (inst.config.discretization.alpha, 0.5):
            L = fk.build_frac_op(e, order, fk.Side.LEFT, fk.OpKind.INTEGRAL).weights
            R = fk.build_frac_op(e, order, fk.Side.RIGHT, fk.OpKind.INTEGRAL).weights
            u, w = rng.standard_normal((2, e.n + 1))
            wt = e.weights
            lhs, rhs = float(wt @ ((L @ u) * w)), float(wt @ (u * (R @ w)))
            worst_dual = max(worst_dual, abs(lhs - rhs) / max(abs(lhs), 1e-300))
            s = np.sqrt(wt)
            nrm = np.linalg.norm(s[:, None] * L / s[None, :], 2)
            bound = (e.b - e.a) ** order / math.gamma(order + 1) * (1 + 10 * e.h)
            worst_norm = max(worst_norm, nrm / bound)
    add("fractional_kernels.duality", worst_dual <= 1e-12, f"relative defect {worst_dual:.2e}")
    add("fractional_kernels.l2_bound", worst_norm <= 1.0, f"norm / bound = {worst_norm:.4f}")

    # operator
    asym = float(np.max(np.abs(op.A_full - op.A_full.T)))
    add("operator.symmetric", asym == 0.0, f"max |A - A^T| = {asym:.1e}")
    lam = inst.ctx.eigenvalues
    add("operator.positive", lam[0] > 0, f"lambda_1 = {lam[0]:.6g}")
    add("operator.ascending", np.all(np.diff(lam) >= 0), f"{lam.size} eigenvalues")

    # evolution: transposition identity without controls
    tests = _test_batch(inst)
    y = solve_controlled(inst.system, inst.f, inst.y0, None)
    res, scale = transposition_residual(inst.system, y, inst.f, inst.y0, None, tests)
    add("evolution.transposition_v0", res <= 1e-6 * max(scale, 1e-300),
        f"residual {res:.2e}, data scale {scale:.2e}")
    if inst.config.discretization.alpha == 1.0 and inst.config.discretization.gamma == 1.0:
        from .oracle_suite import classical_limit_solver

        tn = inst.time.nodes
        v = BoundaryControl(inst.time, np.array([np.sin(np.pi * tn * (k + 1)) ** 2
                                                 for k in range(inst.graph.n_controls)]))
        src = GraphField.from_function(inst.grid, inst.time,
                                       lambda i, x, t: x * (1 - x) * np.sin(np.pi * t) ** 2)
        zero = np.zeros(inst.grid.ndof)
        a = solve_controlled(inst.system, src, zero, v)
        c = classical_limit_solver(inst.grid, inst.time, zero, src, v)
        gap = np.linalg.norm(a.values - c.values) / np.linalg.norm(c.values)
        add("evolution.classical_limit", gap <= 1e-3, f"relative gap {gap:.2e}")

    if not with_regret:
        return checks

    pb = inst.problem()
    rcfg = inst.config.regret_config()
    # regret identity and gradient
    v = BoundaryControl(inst.time, rng.standard_normal(inst.controls.values.shape))
    direct, split = regret_gap(pb, v, inst.y0 + rng.standard_normal(inst.grid.ndof))
    rel = abs(direct - split) / max(abs(direct), 1e-300)
    add("regret.identity", rel <= 1e-10, f"relative defect {rel:.2e}")
    from .oracle_suite import fd_directional

    tau = rcfg.taus[0]
    w = BoundaryControl(inst.time, rng.standard_normal(v.values.shape))
    gw = inner(gradient_Jtau(pb, v, tau).gradient, w)
    fd = fd_directional(lambda s: cost_Jtau(pb, v + w * s, tau))
    rel = abs(fd.value - gw) / max(abs(gw), 1e-300)
    add("regret.gradient", rel <= 1e-6, f"relative gap to finite differences {rel:.2e}")

    bundles, cert = tau_sweep(pb, rcfg)
    slack = 1e-10
    add("regret.cg_converged", all(b.converged for b in bundles),
        f"iterations {[b.cg_iters for b in bundles]}")
    add("regret.Jtau_nonpositive", all(b.J_tau <= slack for b in bundles),
        f"max J_tau {max(b.J_tau for b in bundles):.3e}")
    add("regret.J_decrease", all(b.J_u <= b.J_00 + slack for b in bundles), "J(u,0) <= J(0,0)")
    add("regret.control_bound", all(b.control_norm <= b.misfit_00 + slack for b in bundles),
        "||u|| <= ||y(0,0) - y_d||")
    add("regret.trace_bound", all(b.trace_norm <= b.trace_bound + slack for b in bundles),
        "trace norm <= sqrt(tau) ||y(0,0) - y_d||")
    return checks


# }}}


# {{{ commands


class _Ctx:
    def __init__(self, config, out, jobs, seed):
        self.config_path = config
        self.out = out
        self.jobs = jobs
        self.seed = seed


def _load(obj: _Ctx) -> RunConfig:
    cfg = load_config(obj.config_path)
    if obj.seed is not None:
        from dataclasses import replace

        cfg = replace(cfg, problem=replace(cfg.problem, seed=obj.seed))
    return cfg


def _writer(obj: _Ctx, cfg: RunConfig, command: str) -> Writer:
    out = Path(obj.out) if obj.out is not None else Path(cfg.output.dir)
    return Writer(out, cfg.output.formats, command, cfg, cfg.problem.seed)


def _guard(fn):
    """Map exceptions to exit codes."""

    def run(*args, **kwargs):
        try:
            code = fn(*args, **kwargs)
        except (ConfigError, ValidationError, AssemblyError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_INVALID)
        except (MLConvergenceError, ArithmeticError) as exc:
            click.echo(f"solver failure: {exc}", err=True)
            sys.exit(EXIT_NONCONVERGED)
        sys.exit(code or EXIT_OK)

    run.__name__ = fn.__name__
    run.__doc__ = fn.__doc__
    return run


@click.group()
@click.option("--config", "config", type=click.Path(dir_okay=False), default=None,
              help="TOML run configuration (defaults apply when omitted).")
@click.option("--out", "out", type=click.Path(file_okay=False), default=None,
              help="Output directory (overrides output.dir).")
@click.option("--jobs", type=click.IntRange(min=1), default=1,
              help="Concurrent tau entries (only without warm starts).")
@click.option("--seed", type=click.IntRange(min=0), default=None,
              help="Seed of the random initial-state samples.")
@click.option("-v", "--verbose", is_flag=True, help="Log diagnostics.")
@click.pass_context
def main(ctx, config, out, jobs, seed, verbose):
    """Fractional parabolic control on star graphs."""
    logging.basicConfig(level=logging.INFO if verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    ctx.obj = _Ctx(config, out, jobs, seed)


@main.command()
@click.option("--count", type=click.IntRange(min=1), default=10, help="Eigenfunctions written.")
@click.pass_obj
@_guard
def eigs(obj, count):
    """Eigenvalues and eigenfunctions of the graph operator."""
    cfg = _load(obj)
    inst = build_instance(cfg)
    dec = eigensolve(inst.op, cfg.discretization.modes)
    w = _writer(obj, cfg, "eigs")
    w.json("eigs.json", {
        "dimension": _tag(inst.op.dim, "DefVstar"),
        "eigenvalues": [_tag(v, "Remark4.2") for v in dec.eigenvalues],
    })
    k = min(count, dec.k)
    grid = inst.grid

    def rows():
        for i, e in enumerate(grid.edges):
            seg = dec.full[grid.edge_slice(i), :k]
            for j, x in enumerate(e.nodes):
                yield (i + 1, j, float(x), *map(float, seg[j]))

    w.csv("eigenfunctions.csv", ("edge", "node", "x") + tuple(f"phi{j + 1}" for j in range(k)), rows())
    click.echo(f"lambda_1 = {dec.eigenvalues[0]:.10g} ({dec.k} eigenvalues) -> {w.out}")
    return EXIT_OK


@main.command()
@click.option("--which", type=click.Choice(["forward", "rl", "backward", "controlled"]),
              default="controlled", show_default=True)
@click.pass_obj
@_guard
def solve(obj, which):
    """Run one evolution solver on the configured data."""
    cfg = _load(obj)
    inst = build_instance(cfg)
    w = _writer(obj, cfg, f"solve:{which}")
    payload: dict = {"which": which}
    tn = inst.time.nodes
    if which == "forward":
        fld = solve_caputo_forward(inst.ctx, inst.y0, inst.f)
    elif which == "rl":
        fld = solve_rl_forward(inst.ctx, inst.y0, inst.f)
        tr = rl_weighted_trace(inst.ctx, inst.y0, inst.f)
        payload["note"] = ("t = 0 is omitted from the field: the solution behaves like "
                           "t^(gamma-1) there; the weighted trace is reported instead")
        w.csv("weighted_trace.csv", ("t", "edge", "node", "value"),
              ((float(tn[n]), i + 1, j, float(tr[n, inst.grid.edge_slice(i)][j]))
               for n in range(tn.size) for i, e in enumerate(inst.grid.edges) for j in range(e.n + 1)))
    elif which == "backward":
        sol = solve_backward(inst.ctx, inst.y0, inst.f)
        fld = sol.field
        payload["trace_at_zero_norm"] = _tag(
            float(np.sqrt(np.sum(sol.trace_at_zero**2 * inst.op.mass))), "Inter2")
        if fld.rl_singular:
            payload["note"] = "t = T is omitted from the field: the terminal datum is a weighted trace"
    else:
        fld = solve_controlled(inst.system, inst.f, inst.y0, inst.controls)
        res, scale = transposition_residual(inst.system, fld, inst.f, inst.y0, inst.controls,
                                            _test_batch(inst))
        payload["transposition_residual"] = _tag(res, "weak1")
        payload["transposition_scale"] = _tag(scale, "weak1")
        w.control("controls.csv", inst.controls)
    if which in ("forward", "controlled"):
        kir = [kirchhoff_residual(inst.op, fld.values[n]) for n in range(tn.size)]
        payload["kirchhoff_max"] = _tag(max(abs(k) for k in kir), "pa7")
        w.csv("kirchhoff.csv", ("t", "residual"), zip(map(float, tn), kir))
    finite = fld.values[np.isfinite(fld.values).all(axis=1)]
    payload["max_abs"] = _tag(float(np.max(np.abs(finite))) if finite.size else 0.0, "aux3")
    w.field("field.csv", fld)
    w.json("solve.json", payload)
    click.echo(f"{which} solve written to {w.out}")
    return EXIT_OK


@main.command("low-regret")
@click.option("--tau", type=float, default=None, help="Overrides regret.tau.")
@click.pass_obj
@_guard
def low_regret(obj, tau):
    """Minimize the low-regret functional for one tau."""
    cfg = _load(obj)
    inst = build_instance(cfg)
    tau = cfg.regret.tau if tau is None else tau
    if not tau > 0:
        raise ConfigError(f"--tau: must be > 0, got {tau}")
    b = minimize_low_regret(inst.problem(), tau, cfg.regret_config())
    w = _writer(obj, cfg, "low-regret")
    w.json("low_regret.json", {"record": bundle_record(b)})
    w.control("control.csv", b.u)
    click.echo(f"tau={tau:g}: J_tau={b.J_tau:.6e}, CG iterations {b.cg_iters}, "
               f"gradient residual {b.grad_residual:.2e}")
    return EXIT_OK if b.converged else EXIT_NONCONVERGED


@main.command("tau-sweep")
@click.pass_obj
@_guard
def tau_sweep_cmd(obj):
    """Minimize along the tau ladder and certify the limit."""
    cfg = _load(obj)
    inst = build_instance(cfg)
    rcfg = cfg.regret_config()
    if obj.jobs > 1 and not rcfg.warm_start:
        with ThreadPoolExecutor(max_workers=obj.jobs) as pool:
            bundles, cert = tau_sweep(inst.problem(), rcfg, map_fn=pool.map)
    else:
        if obj.jobs > 1:
            log.info("--jobs ignored: warm starts chain the ladder")
        bundles, cert = tau_sweep(inst.problem(), rcfg)
    w = _writer(obj, cfg, "tau-sweep")
    w.json("tau_sweep.json", {"records": [bundle_record(b) for b in bundles],
                              "certificate": certificate_record(cert)})
    for b in bundles:
        w.control(f"control_tau_{b.tau:.0e}.csv", b.u)
    for b in bundles:
        ok = "ok" if b.trace_norm <= b.trace_bound + 1e-10 else "VIOLATED"
        click.echo(f"tau={b.tau:8.1e}  J_tau={b.J_tau: .6e}  trace={b.trace_norm:.3e}"
                   f" <= {b.trace_bound:.3e} [{ok}]  cg={b.cg_iters}")
    if cert.cauchy:
        click.echo(f"final Cauchy gap {cert.cauchy[-1]:.3e}, max pairing {max(cert.pairings):.3e}")
    return EXIT_OK if all(cert.converged) else EXIT_NONCONVERGED


@main.command()
@click.option("--skip-regret", is_flag=True, help="Only the solver-level checks.")
@click.pass_obj
@_guard
def validate(obj, skip_regret):
    """Run the invariant suite on the configured instance."""
    cfg = _load(obj)
    inst = build_instance(cfg)
    checks = run_checks(inst, with_regret=not skip_regret)
    w = _writer(obj, cfg, "validate")
    w.json("validate.json", {"checks": [asdict(c) for c in checks]})
    for c in checks:
        click.echo(f"{'PASS' if c.passed else 'FAIL'}  {c.name}: {c.detail}")
    return EXIT_OK if all(c.passed for c in checks) else EXIT_VIOLATION


# }}}


if __name__ == "__main__":
    main()
