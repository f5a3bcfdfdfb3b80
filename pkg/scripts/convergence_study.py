"""Refinement study of the discretization.

Prints error tables for the classical eigenvalue, the spectral vs L1 gap,
the classical-limit gap and the transposition residual with and without
controls. ``--json`` writes the tables as well.
"""

import argparse
import json
import logging
from dataclasses import replace
from pathlib import Path

import numpy as np

from fracstar.cli import _test_batch, build_instance
from fracstar.config import load_config
from fracstar.evolution_solvers import (
    l1_step_forward,
    make_context,
    make_controlled_system,
    solve_caputo_forward,
    solve_controlled,
    transposition_residual,
)
from fracstar.operator_assembly import assemble, eigensolve
from fracstar.oracle_suite import classical_limit_solver
from fracstar.star_graph import BoundaryControl, GraphField, GraphGrid, StarGraph, TimeGrid

ROOT = Path(__file__).resolve().parents[1]


def orders(errs):
    e = np.asarray(errs)
    return [None] + list(np.log2(e[:-1] / e[1:]))


def eigenvalue(levels):
    exact = (np.pi / 2) ** 2 + 1
    return [abs(eigensolve(assemble(GraphGrid(StarGraph.uniform(1, 1), n), 1.0), 1)
                .eigenvalues[0] / exact - 1) for n in levels]


def l1_gap(levels, gamma=0.5):
    op = assemble(GraphGrid(StarGraph.uniform(3, 2, beta=lambda x: 1 + x / 2), 16), 0.6)
    out = []
    for nt in levels:
        time = TimeGrid(1.0, nt)
        ctx = make_context(op, time, gamma)
        f = GraphField.from_function(op.grid, time, lambda i, x, t: x * (1 - x) * np.exp(-t))
        a = solve_caputo_forward(ctx, ctx.basis[:, 0], f).values
        b = l1_step_forward(op, gamma, ctx.basis[:, 0], f, time).values
        out.append(np.linalg.norm(a - b) / np.linalg.norm(a))
    return out


def classical_gap(levels):
    out = []
    for n in levels:
        op = assemble(GraphGrid(StarGraph.uniform(3, 2, beta=lambda x: 1 + x / 2), n), 1.0)
        time = TimeGrid(1.0, n)
        tn = time.nodes
        v = BoundaryControl(time, np.array([np.sin(np.pi * tn) ** 2, np.sin(2 * tn) ** 2]))
        f = GraphField.from_function(op.grid, time, lambda i, x, t: x * (1 - x) * np.sin(np.pi * t) ** 2)
        a = solve_controlled(make_controlled_system(make_context(op, time, 1.0)), f, None, v).values
        b = classical_limit_solver(op.grid, time, None, f, v).values
        out.append(np.linalg.norm(a - b) / np.linalg.norm(b))
    return out


def transposition(levels, alpha, config, controls=True):
    cfg = load_config(config)
    out = []
    for n in levels:
        d = replace(cfg.discretization, n=n, n_t=n, alpha=alpha, gamma=alpha)
        inst = build_instance(replace(cfg, discretization=d))
        v = inst.controls if controls else None
        y = solve_controlled(inst.system, inst.f, inst.y0, v)
        r, s = transposition_residual(inst.system, y, inst.f, inst.y0, v, _test_batch(inst))
        out.append(r / s)
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--levels", type=int, nargs="+", default=[16, 32, 64, 128])
    ap.add_argument("--config", default=str(ROOT / "configs" / "default.toml"))
    ap.add_argument("--json", type=Path, default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.ERROR)

    lv = args.levels
    tables = {
        "classical eigenvalue (relative)": eigenvalue(lv),
        "spectral vs L1, gamma=0.5 (relative, n_t)": l1_gap(lv),
        "classical limit vs Crank-Nicolson": classical_gap(lv),
        "transposition, v=0, alpha=0.6": transposition(lv, 0.6, args.config, controls=False),
        "transposition, controls, alpha=0.6": transposition(lv, 0.6, args.config),
        "transposition, controls, alpha=1": transposition(lv, 1.0, args.config),
    }
    for name, errs in tables.items():
        print(name)
        for n, e, r in zip(lv, errs, orders(errs)):
            print(f"  n={n:4d}  {e:.3e}" + ("" if r is None else f"  order {r:5.2f}"))
    if args.json is not None:
        args.json.write_text(json.dumps({"levels": lv, "tables": {k: list(map(float, v)) for k, v in tables.items()}},
                                        indent=2) + "\n")


if __name__ == "__main__":
    main()
