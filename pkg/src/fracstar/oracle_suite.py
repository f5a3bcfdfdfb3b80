"""Brute-force references for the test suite.

Each oracle takes a different route from the main solvers: dense
factorizations instead of conjugate gradients, finite differences instead of
adjoints, Crank-Nicolson stepping instead of the modal solution, adaptive
quadrature instead of convolution tables, and extended-precision series
instead of the regime switch of :mod:`fracstar.mittag_leffler`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import mpmath
import numpy as np
import scipy.linalg as sla
from scipy import integrate

from .evolution_solvers import ControlledSystem, make_context, make_controlled_system
from .operator_assembly import assemble
from .regret_control import RegretProblem, cost_Jtau, gradient_Jtau, hessian_vector, make_problem
from .star_graph import BoundaryControl, GraphField, GraphGrid, StarGraph, TimeGrid

__all__ = [
    "TinyInstance",
    "tiny_instance",
    "DenseSolve",
    "dense_quadratic_solve",
    "explicit_hessian",
    "FDResult",
    "fd_directional",
    "fd_gradient",
    "classical_limit_solver",
    "ml_reference",
    "rl_integral_reference",
    "caputo_derivative_reference",
    "mode_solution_reference",
]


# {{{ tiny instance


@dataclass(frozen=True)
class TinyInstance:
    graph: StarGraph
    grid: GraphGrid
    time: TimeGrid
    system: ControlledSystem = field(repr=False)
    problem: RegretProblem = field(repr=False)


def tiny_instance(n: int = 16, steps: int = 16, alpha: float = 0.6, gamma: float = 0.6,
                  zeta: float = 1.0) -> TinyInstance:
    """Three edges, one controlled Dirichlet end, one Neumann end."""
    graph = StarGraph.uniform(3, 2, beta=lambda x: 1.0 + 0.5 * x, q=1.0)
    grid = GraphGrid(graph, n)
    time = TimeGrid(1.0, steps)
    op = assemble(grid, alpha)
    system = make_controlled_system(make_context(op, time, gamma))
    f = GraphField.from_function(grid, time, lambda i, x, t: x * (1.0 - x) * np.exp(-t))
    y_d = GraphField.from_function(
        grid, time, lambda i, x, t: 0.5 * np.sin(0.5 * np.pi * x) * (1.0 + 0.0 * t)
    )
    return TinyInstance(graph, grid, time, system, make_problem(system, y_d, f, zeta))


# }}}


# {{{ dense quadratic solve


def _unit_controls(problem: RegretProblem):
    shape = (problem.graph.n_controls, problem.time.steps + 1)
    for j in range(shape[0] * shape[1]):
        e = np.zeros(shape[0] * shape[1])
        e[j] = 1.0
        yield BoundaryControl(problem.time, e.reshape(shape))


def _omega(problem: RegretProblem) -> np.ndarray:
    """Flattened time-trapezoid weights of the control pairing."""
    nc = problem.graph.n_controls
    return np.tile(problem.time.weights, nc)


@dataclass(frozen=True)
class DenseSolve:
    u: BoundaryControl
    #: Hessian in the Euclidean pairing of flattened controls, Omega H
    hessian: np.ndarray = field(repr=False)
    symmetry_error: float
    #: relative gap between the Cholesky and LU solutions
    factorization_gap: float
    #: smallest eigenvalue of Omega H relative to Omega
    min_generalized_eig: float


def dense_quadratic_solve(problem: RegretProblem, tau: float, max_dof: int = 2000) -> DenseSolve:
    """Minimizer of ``J_tau`` from a dense Hessian assembled column by column."""
    w = _omega(problem)
    if w.size > max_dof:
        raise ValueError(f"{w.size} control dof exceed the dense limit {max_dof}")
    cols = [hessian_vector(problem, e, tau).values.ravel() for e in _unit_controls(problem)]
    H = np.array(cols).T
    G = w[:, None] * H
    asym = float(np.linalg.norm(G - G.T) / np.linalg.norm(G))
    G = 0.5 * (G + G.T)
    zero = BoundaryControl.zeros(problem.graph, problem.time)
    b = -(w * gradient_Jtau(problem, zero, tau).gradient.values.ravel())
    try:
        factor = sla.cho_factor(G)
    except np.linalg.LinAlgError as exc:
        raise ArithmeticError("dense Hessian is not positive definite") from exc
    u = sla.cho_solve(factor, b)
    u_lu = sla.lu_solve(sla.lu_factor(G), b)
    scale = max(np.linalg.norm(u), np.finfo(float).tiny)
    lam = sla.eigh(G, np.diag(w), eigvals_only=True, subset_by_index=[0, 0])[0]
    shape = (problem.graph.n_controls, problem.time.steps + 1)
    return DenseSolve(
        u=BoundaryControl(problem.time, u.reshape(shape)), hessian=G, symmetry_error=asym,
        factorization_gap=float(np.linalg.norm(u - u_lu) / scale), min_generalized_eig=float(lam),
    )


def explicit_hessian(problem: RegretProblem, tau: float) -> np.ndarray:
    """``Omega H`` from forward solves only, no adjoint cascade.

    Columns of the control-to-state map and of the control-to-trace map are
    built from unit controls; the quadratic form is then assembled as
    ``2 (S^T W S + zeta Omega + T^T M T / tau)``.
    """
    from .evolution_solvers import solve_controlled
    from .regret_control import regret_trace

    sysm = problem.system
    mass = sysm.op.mass
    tw = problem.time.weights
    S, T = [], []
    for e in _unit_controls(problem):
        S.append(solve_controlled(sysm, None, None, e).values)
        T.append(regret_trace(problem, e))
    S = np.array(S)  # (dof, n_t + 1, ndof)
    T = np.array(T)  # (dof, ndof)
    SWS = np.einsum("anx,n,x,bnx->ab", S, tw, mass, S)
    TMT = (T * mass) @ T.T
    return 2.0 * (SWS + problem.zeta * np.diag(_omega(problem)) + TMT / tau)


# }}}


# {{{ finite differences


DEFAULT_EPS = tuple(10.0 ** -k for k in np.arange(3.0, 7.5, 0.5))


@dataclass(frozen=True)
class FDResult:
    #: Richardson estimate at the plateau
    value: float
    eps: float
    #: relative spread of neighbouring estimates at the plateau
    spread: float
    ill_conditioned: bool
    #: (eps, central difference, Richardson estimate) per ladder entry
    table: tuple[tuple[float, float, float], ...]


def fd_directional(fun: Callable[[float], float], eps_ladder: Sequence[float] = DEFAULT_EPS,
                   scale: float = 1.0, plateau_tol: float = 1e-5) -> FDResult:
    """Derivative of ``s -> fun(s)`` at 0 by Richardson-extrapolated central differences."""
    rows = []
    for e in eps_ladder:
        e = e * scale
        d1 = (fun(e) - fun(-e)) / (2.0 * e)
        d2 = (fun(0.5 * e) - fun(-0.5 * e)) / e
        rows.append((e, d1, (4.0 * d2 - d1) / 3.0))
    est = np.array([r[2] for r in rows])
    mag = max(np.max(np.abs(est)), np.finfo(float).tiny)
    gaps = np.abs(np.diff(est)) / mag
    j = int(np.argmin(gaps))
    spread = float(gaps[j])
    return FDResult(value=float(est[j + 1]), eps=rows[j + 1][0], spread=spread,
                    ill_conditioned=spread > plateau_tol, table=tuple(rows))


def fd_gradient(problem: RegretProblem, v: BoundaryControl, tau: float,
                eps_ladder: Sequence[float] = DEFAULT_EPS) -> tuple[BoundaryControl, bool]:
    """Gradient of ``J_tau`` in the time-trapezoid pairing, one control dof at a time."""
    w = _omega(problem)
    scale = max(float(np.max(np.abs(v.values))), 1.0)
    out = np.zeros(w.size)
    flagged = False
    for j, e in enumerate(_unit_controls(problem)):
        res = fd_directional(lambda s, e=e: cost_Jtau(problem, v + e * s, tau), eps_ladder, scale)
        out[j] = res.value / w[j]
        flagged |= res.ill_conditioned
    return BoundaryControl(problem.time, out.reshape(v.values.shape)), flagged


# }}}


# {{{ classical limit


def _p1_blocks(grid: GraphGrid):
    """Merged-junction P1 stiffness (cell-mean beta) and lumped mass."""
    offsets = [0]
    for e in grid.edges:
        offsets.append(offsets[-1] + e.n)
    ndof = offsets[-1] + 1  # junction is index 0
    K = np.zeros((ndof, ndof))
    Mv = np.zeros(ndof)

    def gidx(i, j):
        return 0 if j == 0 else offsets[i] + j

    for i, e in enumerate(grid.edges):
        beta = grid.beta_nodes[i]
        q = grid.q_nodes[i]
        bc = 0.5 * (beta[1:] + beta[:-1])
        for c in range(e.n):
            a, b = gidx(i, c), gidx(i, c + 1)
            k = bc[c] / e.h
            K[a, a] += k
            K[b, b] += k
            K[a, b] -= k
            K[b, a] -= k
        w = e.weights
        for j in range(e.n + 1):
            K[gidx(i, j), gidx(i, j)] += q[j] * w[j]
            Mv[gidx(i, j)] += w[j]
    return K, Mv, gidx


def classical_limit_solver(grid: GraphGrid, time: TimeGrid, y0, f: GraphField | None = None,
                           v: BoundaryControl | None = None) -> GraphField:
    """Crank-Nicolson heat flow on the star graph with continuity and Kirchhoff at the junction.

    Dirichlet ends are imposed nodally (edge 0 homogeneous, edges ``1..m-1``
    the control), Neumann controls enter as point loads at the outer end.
    The result is returned in graph coordinates (junction duplicated).
    """
    graph = grid.graph
    K, Mv, gidx = _p1_blocks(grid)
    ndof = Mv.size
    nt = time.steps
    dt = time.dt

    def to_merged(vec):
        vec = np.asarray(vec, dtype=float)
        out = np.zeros(ndof)
        for i, e in enumerate(grid.edges):
            seg = vec[grid.edge_slice(i)]
            for j in range(e.n + 1):
                out[gidx(i, j)] = seg[j]
        return out

    def to_graph(vec):
        return np.concatenate([
            np.array([vec[gidx(i, j)] for j in range(e.n + 1)]) for i, e in enumerate(grid.edges)
        ])

    vals = np.zeros((graph.n_controls, nt + 1)) if v is None else v.values
    dir_nodes = [gidx(0, grid.edges[0].n)] + [gidx(i, grid.edges[i].n) for i in graph.dirichlet_controlled]

    def dir_values(n):
        return np.array([0.0] + [vals[i - 1, n] for i in graph.dirichlet_controlled])

    def load(n):
        r = np.zeros(ndof)
        if f is not None:
            fv = f.values[n]
            for i, e in enumerate(grid.edges):
                seg = fv[grid.edge_slice(i)]
                for j in range(e.n + 1):
                    r[gidx(i, j)] += e.weights[j] * seg[j]
        for i in graph.neumann_controlled:
            r[gidx(i, grid.edges[i].n)] += vals[i - 1, n]
        return r

    free = np.setdiff1d(np.arange(ndof), dir_nodes)
    lhs = np.diag(Mv) / dt + 0.5 * K
    rhs_op = np.diag(Mv) / dt - 0.5 * K
    factor = sla.cho_factor(lhs[np.ix_(free, free)])

    y = np.zeros((nt + 1, ndof))
    if y0 is not None:
        y[0] = to_merged(y0)
    y[0, dir_nodes] = dir_values(0)
    for n in range(nt):
        r = rhs_op @ y[n] + 0.5 * (load(n) + load(n + 1))
        d = dir_values(n + 1)
        r = r[free] - lhs[np.ix_(free, dir_nodes)] @ d
        y[n + 1, free] = sla.cho_solve(factor, r)
        y[n + 1, dir_nodes] = d
    return GraphField(grid, time, np.array([to_graph(row) for row in y]))


# }}}


# {{{ fractional calculus and special function references


def ml_reference(alpha: float, beta: float, z: float, digits: int = 20) -> float:
    """Taylor series of the Mittag-Leffler function in extended precision."""
    z = float(z)
    # the largest term is about exp(|z|^(1/alpha)) and the value can be as small
    # as exp(-|z|^(1/alpha)) (alpha = 1), so twice that many digits cancel
    loss = 2.0 * abs(z) ** (1.0 / alpha) / math.log(10.0) if z < 0 else 0.0
    with mpmath.workdps(int(digits + loss + 10)):
        zz = mpmath.mpf(z)
        a = mpmath.mpf(alpha)
        b = mpmath.mpf(beta)
        total = mpmath.mpf(0)
        k = 0
        tol = mpmath.mpf(10) ** (-(digits + 5))
        while True:
            term = zz**k * mpmath.rgamma(a * k + b)
            total += term
            if k > 10 and abs(term) < tol * max(abs(total), 1e-300):
                break
            k += 1
            if k > 100000:
                raise RuntimeError("reference series did not converge")
        return float(total)


def rl_integral_reference(fun: Callable[[float], float], a: float, x: float, mu: float) -> float:
    """Left integral of order ``mu`` at ``x`` by adaptive algebraic-weight quadrature."""
    if x <= a:
        return 0.0
    val, _ = integrate.quad(fun, a, x, weight="alg", wvar=(0.0, mu - 1.0), limit=200,
                            epsabs=1e-13, epsrel=1e-12)
    return val / math.gamma(mu)


def caputo_derivative_reference(dfun: Callable[[float], float], a: float, x: float,
                                alpha: float) -> float:
    """Left Caputo derivative from the derivative ``dfun``."""
    if alpha == 1.0:
        return float(dfun(x))
    return rl_integral_reference(dfun, a, x, 1.0 - alpha)


def mode_solution_reference(gamma: float, lam: float, c0: float, source: Callable[[float], float],
                            t: float) -> float:
    """Caputo relaxation of one mode with a source, by quadrature of the resolvent."""
    free = c0 * ml_reference(gamma, 1.0, -lam * t**gamma)
    if t == 0.0:
        return free

    # u = (t - s)^gamma removes the weak singularity of the resolvent
    def kern(u):
        return ml_reference(gamma, gamma, -lam * u, digits=16) * source(t - u ** (1.0 / gamma))

    val, _ = integrate.quad(kern, 0.0, t**gamma, limit=200, epsabs=1e-13, epsrel=1e-11)
    val /= gamma
    return free + val


# }}}
