r"""Low-regret and no-regret boundary control.

The cost of a control ``v`` under an unknown initial state ``y0`` is

.. math::

    J(v, y^0) = \|y(v, y^0) - y_d\|^2 + \zeta \|v\|^2 .

Because the state is affine, ``J(v, y0) - J(0, y0)`` splits into a part
independent of ``y0`` and a pairing of ``y0`` with the weighted trace at
``t = 0`` of a backward solution ``phi(v)`` driven by
``y(v, 0) - y(0, 0)``. The low-regret functional penalizes that trace:

.. math::

    J_\tau(v) = J(v, 0) - J(0, 0) + \tau^{-1} \|I^{1-\gamma}_T\phi(0; v)\|^2 .

Every backward solve here uses the exact transpose of the discrete forward
map (:attr:`BackwardScheme.ADJOINT`), so gradients are exact gradients of
the discrete functional and the regret identity holds to round-off.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .evolution_solvers import (
    BackwardScheme,
    BackwardSolution,
    ControlledSystem,
    end_derivative,
    solve_backward,
    solve_caputo_forward,
    solve_controlled,
)
from .fractional_kernels import Endpoint, trace_row
from .star_graph import BoundaryControl, GraphField, ValidationError, space_time_inner

__all__ = [
    "RegretConfig",
    "RegretProblem",
    "Cascade",
    "OptimalityBundle",
    "NoRegretCertificate",
    "make_problem",
    "inner",
    "state",
    "cost_J",
    "regret_trace",
    "regret_gap",
    "cost_Jtau",
    "gradient_Jtau",
    "hessian_vector",
    "minimize_low_regret",
    "sample_initial_states",
    "noregret_residual",
    "tau_sweep",
]

log = logging.getLogger(__name__)

DEFAULT_TAUS = (1.0, 1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6)


@dataclass(frozen=True)
class RegretConfig:
    #: control cost weight
    zeta: float = 1.0
    taus: tuple[float, ...] = DEFAULT_TAUS
    #: CG stops when the gradient norm drops below cg_tol times its value at v = 0
    cg_tol: float = 1e-10
    cg_max_iter: int = 500
    #: leading eigenvectors in the initial-state sample family
    n_eigen_samples: int = 10
    n_random_samples: int = 5
    seed: int = 0
    warm_start: bool = True

    def __post_init__(self) -> None:
        if not self.zeta > 0:
            raise ValidationError(f"zeta must be positive, got {self.zeta}")
        taus = tuple(float(t) for t in self.taus)
        object.__setattr__(self, "taus", taus)
        if not taus or any(t <= 0 for t in taus):
            raise ValidationError("tau ladder must be non-empty and positive")
        if any(b >= a for a, b in zip(taus, taus[1:])):
            raise ValidationError("tau ladder must be strictly decreasing")
        if not (0 < self.cg_tol < 1):
            raise ValidationError(f"cg_tol must lie in (0, 1), got {self.cg_tol}")
        if self.cg_max_iter < 1:
            raise ValidationError("cg_max_iter must be positive")


@dataclass(frozen=True)
class RegretProblem:
    system: ControlledSystem
    f: GraphField | None
    y_d: GraphField
    zeta: float
    #: state with zero control and zero initial datum
    y00: GraphField = field(repr=False)

    @property
    def time(self):
        return self.system.time

    @property
    def graph(self):
        return self.system.op.grid.graph


def make_problem(system: ControlledSystem, y_d: GraphField, f: GraphField | None = None,
                 zeta: float = 1.0) -> RegretProblem:
    if not zeta > 0:
        raise ValidationError(f"zeta must be positive, got {zeta}")
    if y_d.rl_singular or (f is not None and f.rl_singular):
        raise ValidationError("f and y_d must be defined on the full time grid")
    y00 = solve_controlled(system, f, None, None)
    return RegretProblem(system=system, f=f, y_d=y_d, zeta=float(zeta), y00=y00)


def inner(v: BoundaryControl, w: BoundaryControl) -> float:
    """Time-trapezoid pairing of two controls."""
    return float(np.sum((v.values * w.values) @ v.time.weights))


def _zero(problem: RegretProblem) -> BoundaryControl:
    return BoundaryControl.zeros(problem.graph, problem.time)


def state(problem: RegretProblem, v: BoundaryControl | None, y0=None) -> GraphField:
    return solve_controlled(problem.system, problem.f, y0, v)


def cost_J(problem: RegretProblem, v: BoundaryControl | None, y0=None) -> float:
    y = state(problem, v, y0)
    d = y - problem.y_d
    reg = 0.0 if v is None else problem.zeta * inner(v, v)
    return space_time_inner(d, d) + reg


def _linear_state(problem: RegretProblem, v: BoundaryControl) -> GraphField:
    """``y(v, 0) - y(0, 0)``."""
    return solve_controlled(problem.system, None, None, v)


def _phi(problem: RegretProblem, dy: GraphField) -> BackwardSolution:
    return solve_backward(problem.system.ctx, None, dy, BackwardScheme.ADJOINT)


def regret_trace(problem: RegretProblem, v: BoundaryControl) -> np.ndarray:
    """``I^{1-gamma}_T phi(0; v)`` in graph coordinates."""
    return _phi(problem, _linear_state(problem, v)).trace_at_zero


def _mass_norm(problem: RegretProblem, u: np.ndarray) -> float:
    return float(np.sqrt(np.sum(u * u * problem.system.op.mass)))


def regret_gap(problem: RegretProblem, v: BoundaryControl, y0) -> tuple[float, float]:
    """``J(v, y0) - J(0, y0)`` directly and through the trace pairing."""
    direct = cost_J(problem, v, y0) - cost_J(problem, None, y0)
    tr = regret_trace(problem, v)
    pairing = float(np.sum(np.asarray(y0, dtype=float) * tr * problem.system.op.mass))
    split = cost_J(problem, v) - cost_J(problem, None) + 2.0 * pairing
    return direct, split


def _check_tau(tau: float) -> float:
    tau = float(tau)
    if not tau > 0:
        raise ValidationError(f"tau must be positive, got {tau}")
    return tau


def cost_Jtau(problem: RegretProblem, v: BoundaryControl, tau: float) -> float:
    tau = _check_tau(tau)
    tr = regret_trace(problem, v)
    return cost_J(problem, v) - cost_J(problem, None) + _mass_norm(problem, tr) ** 2 / tau


# {{{ gradient cascade


@dataclass(frozen=True)
class Cascade:
    """Intermediate fields of one gradient evaluation."""

    y: GraphField
    phi: BackwardSolution
    h: GraphField
    p: BackwardSolution
    gradient: BoundaryControl
    #: the same gradient from the boundary-trace formula (flux and trace of p)
    formula_gradient: BoundaryControl

    @property
    def trace(self) -> np.ndarray:
        return self.phi.trace_at_zero


def _adjoint_controls(problem: RegretProblem, r: GraphField, p: BackwardSolution) -> np.ndarray:
    """Transpose of ``v -> y(v, 0) - y(0, 0)`` applied to ``r``, shape ``(n_c, n_t + 1)``.

    The lift's time derivative is mass-orthogonal to the modes and
    contributes nothing, so it has no transpose term.
    """
    sysm = problem.system
    direct = (r.values * sysm.op.mass) @ sysm.lift
    through = p.modes @ sysm.control_modes
    return (direct + through).T


def _formula_gradient(problem: RegretProblem, v: BoundaryControl, p: BackwardSolution) -> np.ndarray:
    op = problem.system.op
    grid = op.grid
    graph = grid.graph
    pv = p.field.values
    out = problem.zeta * v.values.copy()
    for i in graph.dirichlet_controlled:
        flux = grid.beta_nodes[i][-1] * end_derivative(op, i, pv[:, grid.edge_slice(i)])
        out[i - 1] -= flux
    for i in graph.neumann_controlled:
        out[i - 1] += pv[:, grid.edge_slice(i)] @ trace_row(grid.edges[i], op.alpha, Endpoint.END)
    return 2.0 * out


def _cascade(problem: RegretProblem, v: BoundaryControl, tau: float, affine: bool) -> Cascade:
    """Adjoint cascade at ``v``; ``affine=False`` drops the data terms (Hessian product)."""
    ctx = problem.system.ctx
    dy = _linear_state(problem, v)
    phi = _phi(problem, dy)
    scale = 1.0 / math.sqrt(tau)
    h = solve_caputo_forward(ctx, scale * phi.trace_at_zero)
    if affine:
        y = dy + problem.y00
        r = y - problem.y_d + h * scale
    else:
        y = dy
        r = dy + h * scale
    p = solve_backward(ctx, None, r, BackwardScheme.ADJOINT)
    g = 2.0 * (problem.zeta * v.values + _adjoint_controls(problem, r, p))
    fg = _formula_gradient(problem, v, p)
    return Cascade(y=y, phi=phi, h=h, p=p, gradient=BoundaryControl(v.time, g),
                   formula_gradient=BoundaryControl(v.time, fg))


def gradient_Jtau(problem: RegretProblem, v: BoundaryControl, tau: float) -> Cascade:
    """Gradient of the discrete low-regret functional (time-trapezoid pairing)."""
    return _cascade(problem, v, _check_tau(tau), affine=True)


def hessian_vector(problem: RegretProblem, w: BoundaryControl, tau: float) -> BoundaryControl:
    """``H w`` = gradient at ``w`` minus gradient at 0."""
    return _cascade(problem, w, _check_tau(tau), affine=False).gradient


# }}}


# {{{ minimization


@dataclass(frozen=True)
class OptimalityBundle:
    tau: float
    u: BoundaryControl = field(repr=False)
    y: GraphField = field(repr=False)
    phi: BackwardSolution = field(repr=False)
    h: GraphField = field(repr=False)
    p: BackwardSolution = field(repr=False)
    #: gradient norm at u divided by the gradient norm at 0
    grad_residual: float
    cg_iters: int
    converged: bool
    J_u: float
    J_00: float
    J_tau: float
    trace_norm: float
    #: sqrt(tau) ||y(0,0) - y_d||
    trace_bound: float
    control_norm: float
    #: ||y(0,0) - y_d||
    misfit_00: float


def _cg(apply_H, b: BoundaryControl, x0: BoundaryControl, ref: float, tol: float,
        max_iter: int) -> tuple[BoundaryControl, int, bool]:
    """Conjugate gradients for ``H x = b`` in the time-trapezoid pairing."""
    x = x0
    r = b - apply_H(x) if inner(x0, x0) > 0 else b
    if ref == 0.0 or math.sqrt(inner(r, r)) <= tol * ref:
        return x, 0, True
    d = r
    rr = inner(r, r)
    for it in range(1, max_iter + 1):
        Hd = apply_H(d)
        dHd = inner(d, Hd)
        if not dHd > 0:
            raise ArithmeticError(f"Hessian is not positive definite (d^T H d = {dHd:.3e})")
        step = rr / dHd
        x = x + d * step
        r = r - Hd * step
        rr_new = inner(r, r)
        if math.sqrt(rr_new) <= tol * ref:
            return x, it, True
        d = r + d * (rr_new / rr)
        rr = rr_new
    return x, max_iter, False


def minimize_low_regret(problem: RegretProblem, tau: float, config: RegretConfig | None = None,
                        v_init: BoundaryControl | None = None) -> OptimalityBundle:
    """Unique minimizer of ``J_tau`` by conjugate gradients."""
    config = config or RegretConfig(zeta=problem.zeta)
    tau = _check_tau(tau)
    zero = _zero(problem)
    g0 = gradient_Jtau(problem, zero, tau).gradient
    ref = math.sqrt(inner(g0, g0))
    x0 = zero if v_init is None else v_init
    u, iters, ok = _cg(lambda w: hessian_vector(problem, w, tau), g0 * -1.0, x0, ref,
                       config.cg_tol, config.cg_max_iter)
    if not ok:
        log.warning("CG did not converge for tau=%g within %d iterations", tau, iters)

    cas = gradient_Jtau(problem, u, tau)
    gnorm = math.sqrt(inner(cas.gradient, cas.gradient))
    d00 = problem.y00 - problem.y_d
    J00 = space_time_inner(d00, d00)
    du = cas.y - problem.y_d
    Ju = space_time_inner(du, du) + problem.zeta * inner(u, u)
    tnorm = _mass_norm(problem, cas.trace)
    misfit = math.sqrt(J00)
    return OptimalityBundle(
        tau=tau, u=u, y=cas.y, phi=cas.phi, h=cas.h, p=cas.p,
        grad_residual=gnorm / ref if ref > 0 else 0.0, cg_iters=iters, converged=ok,
        J_u=Ju, J_00=J00, J_tau=Ju - J00 + tnorm**2 / tau, trace_norm=tnorm,
        trace_bound=math.sqrt(tau) * misfit, control_norm=math.sqrt(inner(u, u)),
        misfit_00=misfit,
    )


# }}}


# {{{ no-regret certificate


@dataclass(frozen=True)
class NoRegretCertificate:
    u: BoundaryControl = field(repr=False)
    taus: tuple[float, ...]
    #: ||u^{tau_{k+1}} - u^{tau_k}|| for consecutive ladder entries
    cauchy: tuple[float, ...]
    #: rows (tau, trace norm, sqrt(tau) ||y(0,0) - y_d||)
    trace_table: tuple[tuple[float, float, float], ...]
    #: |(y0, trace of phi(u))| for each sampled initial state
    pairings: tuple[float, ...]
    sample_norms: tuple[float, ...]
    #: mass norms of phi(u)/sqrt(tau) at t = 0 and of h/sqrt(tau) at t = 0, smallest tau
    zeta1_norm: float
    zeta2_norm: float
    stationarity: float
    converged: tuple[bool, ...]
    misfit_00: float


def sample_initial_states(problem: RegretProblem, config: RegretConfig) -> tuple[np.ndarray, ...]:
    """Leading eigenvectors plus seeded random node fields."""
    ctx = problem.system.ctx
    k = min(config.n_eigen_samples, ctx.k)
    out = [ctx.basis[:, j].copy() for j in range(k)]
    rng = np.random.default_rng(config.seed)
    ndof = problem.system.op.grid.ndof
    out += [rng.standard_normal(ndof) for _ in range(config.n_random_samples)]
    return tuple(out)


def noregret_residual(problem: RegretProblem, bundle: OptimalityBundle,
                      samples) -> tuple[list[float], float, float, float]:
    """Pairings of sampled initial states with the trace of ``phi(u)``.

    Also returns the stationarity residual of the no-regret system with the
    multiplier field replaced by its estimate ``h^tau / sqrt(tau)``, and the
    mass norms of the two multiplier estimates at ``t = 0``.
    """
    tau = bundle.tau
    tr = bundle.phi.trace_at_zero
    mass = problem.system.op.mass
    pairs = [abs(float(np.sum(np.asarray(s) * tr * mass))) for s in samples]

    scale = 1.0 / math.sqrt(tau)
    zeta2 = bundle.h * scale
    r = bundle.y - problem.y_d + zeta2
    p = solve_backward(problem.system.ctx, None, r, BackwardScheme.ADJOINT)
    g = BoundaryControl(bundle.u.time, 2.0 * (problem.zeta * bundle.u.values
                                              + _adjoint_controls(problem, r, p)))
    zero = _zero(problem)
    g0 = gradient_Jtau(problem, zero, tau).gradient
    ref = math.sqrt(inner(g0, g0))
    stat = math.sqrt(inner(g, g)) / ref if ref > 0 else 0.0
    zeta1 = _mass_norm(problem, tr) * scale
    zeta2_0 = _mass_norm(problem, zeta2.values[0])
    return pairs, stat, zeta1, zeta2_0


def tau_sweep(problem: RegretProblem, config: RegretConfig | None = None, map_fn=None):
    """Minimize along the ladder; returns ``(bundles, certificate)``.

    Without warm starts the ladder entries are independent and are
    dispatched through ``map_fn`` (e.g. an executor's ``map``) when given.
    """
    config = config or RegretConfig(zeta=problem.zeta)
    bundles: list[OptimalityBundle] = []
    if not config.warm_start and map_fn is not None:
        bundles = list(map_fn(lambda tau: minimize_low_regret(problem, tau, config), config.taus))
    else:
        prev = None
        for tau in config.taus:
            start = prev.u if (prev is not None and config.warm_start) else None
            b = minimize_low_regret(problem, tau, config, start)
            bundles.append(b)
            prev = b

    cauchy = tuple(
        math.sqrt(inner(b1.u - b0.u, b1.u - b0.u)) for b0, b1 in zip(bundles, bundles[1:])
    )
    last = bundles[-1]
    samples = sample_initial_states(problem, config)
    pairs, stat, z1, z2 = noregret_residual(problem, last, samples)
    mass = problem.system.op.mass
    cert = NoRegretCertificate(
        u=last.u,
        taus=tuple(b.tau for b in bundles),
        cauchy=cauchy,
        trace_table=tuple((b.tau, b.trace_norm, b.trace_bound) for b in bundles),
        pairings=tuple(pairs),
        sample_norms=tuple(float(np.sqrt(np.sum(s * s * mass))) for s in samples),
        zeta1_norm=z1,
        zeta2_norm=z2,
        stationarity=stat,
        converged=tuple(b.converged for b in bundles),
        misfit_00=last.misfit_00,
    )
    return bundles, cert


# }}}
