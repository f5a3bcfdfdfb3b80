r"""Time evolution on the constrained graph space.

All solvers work in the eigenbasis of the reduced operator. Mode ``k``
with eigenvalue :math:`\lambda_k` obeys a scalar fractional relaxation
equation whose solution is written with Mittag-Leffler kernels; sources are
interpolated linearly between time nodes and integrated exactly against the
kernel, so the convolution weights are combinations of the first and second
kernel antiderivatives.

Backward problems come in two flavours (:class:`BackwardScheme`):

* ``SPECTRAL``: the time reversal of the Riemann-Liouville forward solve,
  i.e. the solution formula with the same product-trapezoid weights;
* ``ADJOINT``: the exact transpose of the discrete Caputo forward map in the
  time-trapezoid pairing. It is a first-order accurate approximation of the
  same backward problem and makes discrete duality identities hold to
  round-off, which is what gradients and regret identities need.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy import special

from .mittag_leffler import KernelKind, mode_kernel
from .operator_assembly import (
    DiscreteOperator,
    SpectralDecomposition,
    eigensolve,
    lift_matrix,
    neumann_matrix,
)
from .star_graph import BoundaryControl, GraphField, TimeGrid, ValidationError

__all__ = [
    "BackwardScheme",
    "SpectralSolverContext",
    "BackwardSolution",
    "ControlledSystem",
    "make_context",
    "project",
    "coverage",
    "solve_caputo_forward",
    "solve_rl_forward",
    "rl_weighted_trace",
    "solve_backward",
    "weighted_trace_at_zero",
    "weighted_trace_at_end",
    "make_controlled_system",
    "solve_controlled",
    "end_derivative",
    "transposition_residual",
    "l1_weights",
    "l1_derivative",
    "l1_step_forward",
]

log = logging.getLogger(__name__)


class BackwardScheme(enum.Enum):
    SPECTRAL = "spectral"
    ADJOINT = "adjoint"


@dataclass(frozen=True)
class SpectralSolverContext:
    op: DiscreteOperator
    decomposition: SpectralDecomposition
    gamma: float
    time: TimeGrid
    #: eigenvectors in graph coordinates, ``(ndof, k)``
    basis: np.ndarray = field(repr=False)
    #: kernels indexed by lag ``d`` (time ``d dt``), each ``(k, n_t + 1)``
    state: np.ndarray = field(repr=False)
    rl_state: np.ndarray = field(repr=False)
    cell_integral: np.ndarray = field(repr=False)
    state_integral: np.ndarray = field(repr=False)
    #: per-mode node-to-node convolution tables, ``(k, n_t + 1, n_t + 1)``
    conv: np.ndarray = field(repr=False)
    trace_conv: np.ndarray = field(repr=False)
    #: smallest accepted fraction of a datum's mass norm captured by the modes
    coverage_threshold: float = 0.999

    @property
    def k(self) -> int:
        return self.decomposition.k

    @property
    def eigenvalues(self) -> np.ndarray:
        return self.decomposition.eigenvalues


def _convolution_table(cum: np.ndarray, cum2: np.ndarray, dt: float) -> np.ndarray:
    """Node-to-node table of the product-trapezoid source convolution.

    The source is interpolated linearly between time nodes and integrated
    exactly against the kernel. ``cum[:, d]`` is the kernel integral over
    lags ``[0, d dt]`` and ``cum2`` the integral of ``cum``. Within the cell
    of lags ``[(d-1) dt, d dt]`` the later node gets
    ``(cum2[d] - cum2[d-1]) / dt - cum[d-1]`` and the earlier node the rest
    of ``cum[d] - cum[d-1]``.
    """
    k, n1 = cum.shape
    late = np.zeros((k, n1))
    early = np.zeros((k, n1))
    late[:, 1:] = (cum2[:, 1:] - cum2[:, :-1]) / dt - cum[:, :-1]
    early[:, 1:] = cum[:, 1:] - cum[:, :-1] - late[:, 1:]
    n = np.arange(n1)[:, None]
    m = np.arange(n1 - 1)[None, :]
    lag = np.clip(n - m, 0, n1 - 1)
    inside = (n - m) >= 1
    table = np.zeros((k, n1, n1))
    table[:, :, :-1] += np.where(inside, early[:, lag], 0.0)
    table[:, :, 1:] += np.where(inside, late[:, lag], 0.0)
    return table


def make_context(op: DiscreteOperator, time: TimeGrid, gamma: float,
                 k: int | None = None, decomposition: SpectralDecomposition | None = None,
                 coverage_threshold: float = 0.999) -> SpectralSolverContext:
    """Eigendecomposition plus kernel tables for one time grid and order."""
    gamma = float(gamma)
    if not (0.0 < gamma <= 1.0):
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    if decomposition is None:
        decomposition = eigensolve(op, k)
    lam = decomposition.eigenvalues[:, None]
    t = time.nodes[None, :]
    state = mode_kernel(gamma, lam, t, KernelKind.STATE)
    rl = np.full_like(state, np.nan)
    rl[:, 1:] = mode_kernel(gamma, lam, t[:, 1:], KernelKind.RL_STATE)
    cell = mode_kernel(gamma, lam, t, KernelKind.CELL_INTEGRAL)
    sint = mode_kernel(gamma, lam, t, KernelKind.STATE_INTEGRAL)
    cell2 = mode_kernel(gamma, lam, t, KernelKind.CELL_INTEGRAL2)
    sint2 = mode_kernel(gamma, lam, t, KernelKind.STATE_INTEGRAL2)
    ctx = SpectralSolverContext(
        op=op, decomposition=decomposition, gamma=gamma, time=time,
        basis=decomposition.full, state=state, rl_state=rl, cell_integral=cell,
        state_integral=sint, conv=_convolution_table(cell, cell2, time.dt),
        trace_conv=_convolution_table(sint, sint2, time.dt), coverage_threshold=coverage_threshold,
    )
    for arr in (state, rl, cell, sint, ctx.conv, ctx.trace_conv):
        arr.setflags(write=False)
    return ctx


# {{{ modal helpers


def project(ctx: SpectralSolverContext, u: np.ndarray) -> np.ndarray:
    """Mode coefficients of graph vectors (last axis), ``Psi^T M u``."""
    u = np.asarray(u, dtype=float)
    return (u * ctx.op.mass) @ ctx.basis


def coverage(ctx: SpectralSolverContext, u: np.ndarray) -> float:
    """Fraction of the mass norm of ``u`` captured by the modes (1 for u = 0)."""
    u = np.asarray(u, dtype=float)
    total = float(np.sum(u * u * ctx.op.mass))
    if total == 0.0:
        return 1.0
    c = project(ctx, u)
    return float(np.sqrt(np.sum(c * c) / total))


def _check_coverage(ctx: SpectralSolverContext, u: np.ndarray, what: str) -> None:
    cov = coverage(ctx, u)
    if cov < ctx.coverage_threshold:
        log.warning("%s: modes capture %.4f of its mass norm (threshold %.4f)",
                    what, cov, ctx.coverage_threshold)


def _source_modes(ctx: SpectralSolverContext, g: GraphField | np.ndarray | None) -> np.ndarray:
    n1 = ctx.time.steps + 1
    if g is None:
        return np.zeros((n1, ctx.k))
    vals = g.values if isinstance(g, GraphField) else np.asarray(g, dtype=float)
    if vals.shape != (n1, ctx.op.grid.ndof):
        raise ValidationError(f"source has shape {vals.shape}, expected {(n1, ctx.op.grid.ndof)}")
    if isinstance(g, GraphField) and g.rl_singular:
        raise ValidationError("sources must be defined on the full time grid")
    _check_coverage(ctx, vals, "source")
    return project(ctx, vals)


def _initial_modes(ctx: SpectralSolverContext, u0) -> np.ndarray:
    if u0 is None:
        return np.zeros(ctx.k)
    u0 = np.asarray(u0, dtype=float)
    if u0.shape != (ctx.op.grid.ndof,):
        raise ValidationError(f"spatial datum has shape {u0.shape}, expected ({ctx.op.grid.ndof},)")
    _check_coverage(ctx, u0, "initial datum")
    return project(ctx, u0)


def _convolve(table: np.ndarray, gm: np.ndarray) -> np.ndarray:
    """``out[n, k] = sum_j table[k, n, j] gm[j, k]``."""
    return np.einsum("knj,jk->nk", table, gm)


def _caputo_modes(ctx, c0, gm):
    return ctx.state.T * c0[None, :] + _convolve(ctx.conv, gm)


def _rl_modes(ctx, p0, gm):
    out = ctx.rl_state.T * p0[None, :] + _convolve(ctx.conv, gm)
    out[0] = np.nan
    return out


def _field(ctx, modes, singular_row=None) -> GraphField:
    vals = modes @ ctx.basis.T
    if singular_row is not None:
        vals[singular_row] = np.nan
    return GraphField(ctx.op.grid, ctx.time, vals, singular_row)


# }}}


# {{{ forward problems


def solve_caputo_forward(ctx: SpectralSolverContext, y0, f=None) -> GraphField:
    """Caputo relaxation ``D^gamma y + A y = f``, ``y(0) = y0``."""
    c = _caputo_modes(ctx, _initial_modes(ctx, y0), _source_modes(ctx, f))
    return _field(ctx, c)


def solve_rl_forward(ctx: SpectralSolverContext, p0, g=None) -> GraphField:
    """Riemann-Liouville relaxation with weighted datum ``I^{1-gamma} p(0) = p0``.

    The result is singular at ``t = 0`` (row 0 holds NaN and cannot be read).
    """
    c = _rl_modes(ctx, _initial_modes(ctx, p0), _source_modes(ctx, g))
    return _field(ctx, c, singular_row=0)


def rl_weighted_trace(ctx: SpectralSolverContext, p0, g=None) -> np.ndarray:
    """``I^{1-gamma} p(t_n)`` of the RL forward solution, shape ``(n_t + 1, ndof)``.

    Row 0 equals the projection of ``p0`` exactly.
    """
    c0 = _initial_modes(ctx, p0)
    gm = _source_modes(ctx, g)
    return (ctx.state.T * c0[None, :] + _convolve(ctx.trace_conv, gm)) @ ctx.basis.T


# }}}


# {{{ backward problems


@dataclass(frozen=True)
class BackwardSolution:
    field: GraphField
    scheme: BackwardScheme
    #: mode coefficients per time node, ``(n_t + 1, k)``
    modes: np.ndarray = field(repr=False)
    #: mode coefficients of ``I^{1-gamma}_T phi`` at ``t = 0``
    trace_modes: np.ndarray = field(repr=False)
    basis: np.ndarray = field(repr=False)

    @property
    def trace_at_zero(self) -> np.ndarray:
        return self.basis @ self.trace_modes


def _time_weights(time: TimeGrid) -> np.ndarray:
    return time.weights


def solve_backward(ctx: SpectralSolverContext, phiT=None, g=None,
                   scheme: BackwardScheme | str = BackwardScheme.SPECTRAL) -> BackwardSolution:
    """Backward problem ``D_T^gamma phi + A phi = g``, ``I_T^{1-gamma} phi(T) = phiT``.

    With a nonzero terminal datum the last time row is singular.
    """
    scheme = BackwardScheme(scheme)
    cT = _initial_modes(ctx, phiT)
    gm = _source_modes(ctx, g)
    nt = ctx.time.steps
    singular = nt if np.any(cT != 0.0) else None

    if scheme is BackwardScheme.SPECTRAL:
        rev = gm[::-1]
        modes = _convolve(ctx.conv, rev)[::-1].copy()
        trace = _convolve(ctx.trace_conv, rev)[nt]
    else:
        w = _time_weights(ctx.time)
        # transpose of the Caputo convolution in the trapezoid pairing
        modes = np.einsum("knj,nk->jk", ctx.conv, w[:, None] * gm) / w[:, None]
        trace = np.einsum("kn,nk->k", ctx.state, w[:, None] * gm)
    trace = trace + ctx.state[:, nt] * cT
    if singular is not None:
        # lag T - t_j; the kernel is singular at lag 0
        modes[:nt] += ctx.rl_state[:, nt:0:-1].T * cT[None, :]
        modes[nt] = np.nan
    fld = _field(ctx, modes, singular_row=singular)
    return BackwardSolution(field=fld, scheme=scheme, modes=modes, trace_modes=trace,
                            basis=ctx.basis)


def weighted_trace_at_zero(ctx: SpectralSolverContext, sol: BackwardSolution) -> np.ndarray:
    """``I_T^{1-gamma} phi(0, .)`` in graph coordinates (closed form per mode)."""
    return sol.trace_at_zero


def weighted_trace_at_end(ctx: SpectralSolverContext, sol: BackwardSolution, phiT=None) -> np.ndarray:
    """``I_T^{1-gamma} phi(T, .)``; equals the projected terminal datum per mode."""
    return ctx.basis @ (ctx.state[:, 0] * _initial_modes(ctx, phiT))


# }}}


# {{{ boundary control


def l1_weights(gamma: float, steps: int, dt: float) -> tuple[float, np.ndarray]:
    """Scale ``dt^-gamma / Gamma(2 - gamma)`` and ``b_j = (j+1)^(1-gamma) - j^(1-gamma)``."""
    j = np.arange(steps, dtype=float)
    b = (j + 1.0) ** (1.0 - gamma) - j ** (1.0 - gamma)
    return dt ** (-gamma) / special.gamma(2.0 - gamma), b


def l1_derivative(u: np.ndarray, gamma: float, time: TimeGrid) -> np.ndarray:
    """L1 Caputo derivative of node samples along axis 0; row 0 is 0."""
    a, b = l1_weights(gamma, time.steps, time.dt)
    du = np.diff(u, axis=0)
    out = np.zeros_like(u, dtype=float)
    for n in range(1, time.steps + 1):
        # sum_j b_j (u_{n-j} - u_{n-j-1}) over j = 0..n-1
        out[n] = a * np.tensordot(b[:n], du[n - 1::-1], axes=(0, 0))
    return out


@dataclass(frozen=True)
class ControlledSystem:
    ctx: SpectralSolverContext
    #: columns map control values to the minimum mass-norm Dirichlet lift
    lift: np.ndarray = field(repr=False)
    #: columns map control values to Neumann loads
    neumann: np.ndarray = field(repr=False)
    #: per-control load of the lift, ``(B - A_full L)`` projected on the modes
    control_modes: np.ndarray = field(repr=False)

    @property
    def op(self) -> DiscreteOperator:
        return self.ctx.op

    @property
    def time(self) -> TimeGrid:
        return self.ctx.time


def make_controlled_system(ctx: SpectralSolverContext) -> ControlledSystem:
    op = ctx.op
    L = lift_matrix(op)
    B = neumann_matrix(op)
    ctrl = ctx.basis.T @ (B - op.A_full @ L)
    for arr in (L, B, ctrl):
        arr.setflags(write=False)
    return ControlledSystem(ctx=ctx, lift=L, neumann=B, control_modes=ctrl)


def _control_values(system: ControlledSystem, v: BoundaryControl | None) -> np.ndarray:
    nc = system.op.grid.graph.n_controls
    if v is None:
        return np.zeros((nc, system.time.steps + 1))
    if v.values.shape != (nc, system.time.steps + 1):
        raise ValidationError(
            f"control has shape {v.values.shape}, expected {(nc, system.time.steps + 1)}"
        )
    return v.values


def solve_controlled(system: ControlledSystem, f=None, y0=None,
                     v: BoundaryControl | None = None) -> GraphField:
    """Boundary-controlled Caputo problem by lift and superposition.

    ``y = lift(v) + w`` where ``w`` lies in the constrained space and solves
    the Caputo problem with source ``f - D_t^gamma lift - A lift`` plus the
    Neumann loads. The lift is mass-orthogonal to the constrained space, so
    its (L1) time derivative drops out after projection.
    """
    ctx = system.ctx
    vals = _control_values(system, v)
    ell = (system.lift @ vals).T  # (n_t + 1, ndof)
    gm = _source_modes(ctx, f)
    gm = gm + vals.T @ system.control_modes.T
    gm = gm - project(ctx, l1_derivative(ell, ctx.gamma, ctx.time))
    c0 = _initial_modes(ctx, y0)
    c = _caputo_modes(ctx, c0, gm)
    return GraphField(ctx.op.grid, ctx.time, ell + c @ ctx.basis.T)


def end_derivative(op: DiscreteOperator, i: int, values: np.ndarray) -> np.ndarray:
    r"""Left RL derivative of edge samples at the outer end ``b-``.

    The cell values of the last two cells are extrapolated with the model
    ``s(b) + c (b - x)^alpha``, the leading behaviour of the flux near an end
    carrying a trace condition (for ``alpha = 1`` this is linear
    extrapolation). ``values`` holds edge samples along the last axis.
    """
    e = op.grid.edges[i]
    cells = values @ op.derivatives[i][-2:].T
    d1 = (0.5 * e.h) ** op.alpha
    d2 = (1.5 * e.h) ** op.alpha
    return (cells[..., -1] * d2 - cells[..., -2] * d1) / (d2 - d1)


def transposition_residual(system: ControlledSystem, y: GraphField, f, y0,
                           v: BoundaryControl | None, tests) -> tuple[float, float]:
    """Largest defect of the very-weak (transposition) identity over a test batch.

    ``tests`` is a sequence of ``(g, sol)`` pairs where ``sol`` solves the
    backward problem with source ``g`` and zero terminal datum. For each pair
    the left side pairs ``y`` with ``g``; the right side collects the source
    term, the initial pairing with ``I_T^{1-gamma} phi(0)``, the Dirichlet
    flux term ``-v beta(b) D^alpha phi(b-)`` and the Neumann trace term
    ``v I^{1-alpha} phi(b-)``. Returns ``(max |LHS - RHS|, data scale)``.
    """
    from .fractional_kernels import Endpoint, trace_row
    from .star_graph import space_time_inner

    op = system.op
    grid = op.grid
    graph = grid.graph
    time = system.time
    vals = _control_values(system, v)
    fvals = np.zeros((time.steps + 1, grid.ndof)) if f is None else (
        f.values if isinstance(f, GraphField) else np.asarray(f, dtype=float))
    y0v = np.zeros(grid.ndof) if y0 is None else np.asarray(y0, dtype=float)
    tw = time.weights

    worst, scale = 0.0, 0.0
    for g, sol in tests:
        phi = sol.field
        if phi.rl_singular:
            raise ValueError("test functions need a zero terminal datum")
        pv = phi.values
        lhs = space_time_inner(y, g if isinstance(g, GraphField) else GraphField(grid, time, g))
        terms = [
            float(tw @ ((fvals * pv) @ grid.weights)),
            float(np.sum(y0v * sol.trace_at_zero * grid.weights)),
        ]
        for i in graph.dirichlet_controlled:
            flux = grid.beta_nodes[i][-1] * end_derivative(op, i, pv[:, grid.edge_slice(i)])
            terms.append(-float(tw @ (vals[i - 1] * flux)))
        for i in graph.neumann_controlled:
            row = trace_row(grid.edges[i], op.alpha, Endpoint.END)
            terms.append(float(tw @ (vals[i - 1] * (pv[:, grid.edge_slice(i)] @ row))))
        rhs = sum(terms)
        worst = max(worst, abs(lhs - rhs))
        scale = max(scale, abs(lhs), *(abs(t) for t in terms))
    return worst, scale


# }}}


def l1_step_forward(op: DiscreteOperator, gamma: float, y0, f, time: TimeGrid) -> GraphField:
    """Implicit L1 stepping of the Caputo problem on the constrained space.

    Independent of the eigendecomposition: works with the reduced matrices
    and nodal sources. ``gamma = 1`` is backward Euler.
    """
    a, b = l1_weights(gamma, time.steps, time.dt)
    Z, A, Mv = op.Z, op.A_V, op.M_V
    mass = op.mass
    n1 = time.steps + 1
    fvals = np.zeros((n1, op.grid.ndof)) if f is None else (
        f.values if isinstance(f, GraphField) else np.asarray(f, dtype=float))
    loads = (fvals * mass) @ Z
    y0 = np.zeros(op.grid.ndof) if y0 is None else np.asarray(y0, dtype=float)
    x = np.zeros((n1, Z.shape[1]))
    x[0] = sla.cho_solve(sla.cho_factor(Mv), Z.T @ (mass * y0))
    factor = sla.cho_factor(a * b[0] * Mv + A)
    dx = np.zeros_like(x)
    for n in range(1, n1):
        hist = b[0] * x[n - 1]
        if n > 1:
            hist = hist - np.tensordot(b[1:n], dx[n - 1:0:-1], axes=(0, 0))
        x[n] = sla.cho_solve(factor, loads[n] + a * (Mv @ hist))
        dx[n] = x[n] - x[n - 1]
    return GraphField(op.grid, time, x @ Z.T)
