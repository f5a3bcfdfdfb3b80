r"""Discrete graph form, vertex constraints, reduction and eigenpairs.

The form

.. math::

    F(\rho, \phi) = \sum_i \int \beta^i D^\alpha_{a+}\rho^i D^\alpha_{a+}\phi^i
                  + \sum_i \int q^i \rho^i \phi^i

is assembled edge by edge. The derivative term uses the cellwise RL
derivative with the rectangle rule on cells (``beta`` averaged over the
cell), the zeroth-order term the trapezoid (lumped) mass. For ``alpha = 1``
this is the P1 stiffness with lumped mass.

Constraints, one row each:

* junction: equal start traces :math:`I^{1-\alpha}\rho^1(a^+) = I^{1-\alpha}\rho^j(a^+)`;
* Dirichlet ends of edges ``1..m``: :math:`I^{1-\alpha}\rho^i(b_i^-)`.

The constrained space is the null space of all rows (controlled Dirichlet
data enters through a lift).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .fractional_kernels import (
    Endpoint,
    OpKind,
    Side,
    build_frac_op,
    check_order,
    rl_cell_derivative,
    trace_row,
)
from .star_graph import GraphGrid, ValidationError, validate

__all__ = [
    "AssemblyError",
    "ConstraintSet",
    "DiscreteOperator",
    "SpectralDecomposition",
    "assemble",
    "constraints",
    "reduce",
    "eigensolve",
    "neumann_matrix",
    "neumann_load",
    "lift_matrix",
    "dirichlet_lift",
    "kirchhoff_residual",
    "form_value",
    "flux_by_parts",
]


class AssemblyError(RuntimeError):
    pass


@dataclass(frozen=True)
class ConstraintSet:
    C: np.ndarray
    labels: tuple[str, ...]
    #: number of leading homogeneous rows (junction + edge 1 Dirichlet)
    n_homogeneous: int
    #: control index -> constraint row, for controlled Dirichlet ends
    control_rows: dict[int, int]


@dataclass(frozen=True)
class DiscreteOperator:
    grid: GraphGrid
    alpha: float
    A_full: np.ndarray = field(repr=False)
    #: diagonal of the mass matrix
    mass: np.ndarray = field(repr=False)
    cons: ConstraintSet = field(repr=False)
    Z: np.ndarray = field(repr=False)
    A_V: np.ndarray = field(repr=False)
    M_V: np.ndarray = field(repr=False)
    #: cellwise RL derivative per edge, shape (n_i, n_i + 1)
    derivatives: tuple[np.ndarray, ...] = field(repr=False)

    @property
    def C(self) -> np.ndarray:
        return self.cons.C

    @property
    def M(self) -> np.ndarray:
        return np.diag(self.mass)

    @property
    def dim(self) -> int:
        return self.Z.shape[1]


@dataclass(frozen=True)
class SpectralDecomposition:
    eigenvalues: np.ndarray
    #: eigenvectors in reduced coordinates, M_V-orthonormal columns
    reduced: np.ndarray = field(repr=False)
    #: the same vectors lifted to graph coordinates
    full: np.ndarray = field(repr=False)

    @property
    def k(self) -> int:
        return self.eigenvalues.size


def _cell_beta(beta_nodes: np.ndarray) -> np.ndarray:
    return 0.5 * (beta_nodes[1:] + beta_nodes[:-1])


def constraints(grid: GraphGrid, alpha: float) -> ConstraintSet:
    alpha = check_order(alpha)
    g = grid.graph
    rows, labels = [], []

    def embed(i: int, row: np.ndarray) -> np.ndarray:
        full = np.zeros(grid.ndof)
        full[grid.edge_slice(i)] = row
        return full

    start = [embed(i, trace_row(e, alpha, Endpoint.START)) for i, e in enumerate(grid.edges)]
    for j in range(1, g.N):
        rows.append(start[0] - start[j])
        labels.append(f"junction:1-{j + 1}")
    rows.append(embed(0, trace_row(grid.edges[0], alpha, Endpoint.END)))
    labels.append("dirichlet:1")
    n_hom = len(rows)
    control_rows = {}
    for i in g.dirichlet_controlled:
        control_rows[i - 1] = len(rows)
        rows.append(embed(i, trace_row(grid.edges[i], alpha, Endpoint.END)))
        labels.append(f"dirichlet:{i + 1}")

    C = np.array(rows)
    sv = np.linalg.svd(C, compute_uv=False)
    if sv.size and sv[-1] <= 1e-12 * sv[0]:
        raise AssemblyError(
            f"constraint matrix is rank deficient (singular values {sv[-1]:.3e}/{sv[0]:.3e})"
        )
    return ConstraintSet(C=C, labels=tuple(labels), n_homogeneous=n_hom, control_rows=control_rows)


def reduce(A: np.ndarray, mass: np.ndarray, C: np.ndarray):
    """Null-space basis ``Z`` of ``C`` and the reduced matrices."""
    if C.shape[0] == 0:
        Z = np.eye(A.shape[0])
    else:
        Z = sla.null_space(C)
    A_V = Z.T @ A @ Z
    A_V = 0.5 * (A_V + A_V.T)
    M_V = (Z.T * mass[None, :]) @ Z
    M_V = 0.5 * (M_V + M_V.T)
    lam_min = sla.eigh(A_V, M_V, eigvals_only=True, subset_by_index=[0, 0])[0]
    if not lam_min > 0:
        raise AssemblyError(f"reduced operator is not positive definite (smallest eigenvalue {lam_min:.3e})")
    return Z, A_V, M_V


def assemble(grid: GraphGrid, alpha: float, *, check: bool = True) -> DiscreteOperator:
    alpha = check_order(alpha)
    if check:
        validate(grid)
    blocks, mass, derivs = [], [], []
    for e, beta, q in zip(grid.edges, grid.beta_nodes, grid.q_nodes):
        D = rl_cell_derivative(e, alpha)
        bh = _cell_beta(beta) * e.h
        K = D.T @ (bh[:, None] * D)
        K = 0.5 * (K + K.T)
        w = e.weights
        blocks.append(K + np.diag(q * w))
        mass.append(w)
        derivs.append(D)
    A = sla.block_diag(*blocks)
    mass = np.concatenate(mass)
    cons = constraints(grid, alpha)
    Z, A_V, M_V = reduce(A, mass, cons.C)
    for arr in (A, mass, Z, A_V, M_V):
        arr.setflags(write=False)
    return DiscreteOperator(
        grid=grid, alpha=alpha, A_full=A, mass=mass, cons=cons, Z=Z, A_V=A_V, M_V=M_V,
        derivatives=tuple(derivs),
    )


def eigensolve(op: DiscreteOperator, k: int | None = None) -> SpectralDecomposition:
    """Smallest ``k`` eigenpairs of ``A_V x = lambda M_V x`` (all if ``k`` is None)."""
    dim = op.dim
    if k is None:
        k = dim
    if not (1 <= k <= dim):
        raise ValueError(f"k must lie in [1, {dim}], got {k}")
    lam, vec = sla.eigh(op.A_V, op.M_V, subset_by_index=[0, k - 1])
    # deterministic sign: largest-magnitude entry of each lifted vector positive
    full = op.Z @ vec
    idx = np.argmax(np.abs(full), axis=0)
    sign = np.sign(full[idx, np.arange(k)])
    sign[sign == 0] = 1.0
    vec = vec * sign
    full = full * sign
    return SpectralDecomposition(eigenvalues=lam, reduced=vec, full=full)


# {{{ boundary data


def neumann_matrix(op: DiscreteOperator) -> np.ndarray:
    """Columns map control signals to weak-form loads; Dirichlet columns are zero."""
    grid = op.grid
    g = grid.graph
    B = np.zeros((grid.ndof, g.n_controls))
    for i in g.neumann_controlled:
        B[grid.edge_slice(i), i - 1] = trace_row(grid.edges[i], op.alpha, Endpoint.END)
    return B


def neumann_load(op: DiscreteOperator, v_values) -> np.ndarray:
    """Load vector (graph coordinates) of the control values at one time."""
    return neumann_matrix(op) @ np.asarray(v_values, dtype=float)


def lift_matrix(op: DiscreteOperator) -> np.ndarray:
    """Minimum mass-norm lift; Neumann columns are zero."""
    C = op.C
    n_controls = op.grid.graph.n_controls
    if not op.cons.control_rows:
        return np.zeros((op.grid.ndof, n_controls))
    Minv_Ct = C.T / op.mass[:, None]
    S = C @ Minv_Ct
    rhs = np.zeros((C.shape[0], n_controls))
    for k, r in op.cons.control_rows.items():
        rhs[r, k] = 1.0
    try:
        factor = sla.cho_factor(S)
    except np.linalg.LinAlgError as exc:
        raise AssemblyError("lift system is singular") from exc
    return Minv_Ct @ sla.cho_solve(factor, rhs)


def dirichlet_lift(op: DiscreteOperator, v_values) -> np.ndarray:
    return lift_matrix(op) @ np.asarray(v_values, dtype=float)


# }}}


def kirchhoff_residual(op: DiscreteOperator, y: np.ndarray) -> float:
    """Sum of junction fluxes, the RL derivative taken on the first cell."""
    grid = op.grid
    total = 0.0
    for i, D in enumerate(op.derivatives):
        yi = y[grid.edge_slice(i)]
        total += grid.beta_nodes[i][0] * float(D[0] @ yi)
    return total


def form_value(grid: GraphGrid, alpha: float, phi: np.ndarray, psi: np.ndarray) -> float:
    """Quadrature value of the form from node-wise kernel applications."""
    total = 0.0
    for i, e in enumerate(grid.edges):
        s = grid.edge_slice(i)
        d = build_frac_op(e, alpha, Side.LEFT, OpKind.RL_DERIVATIVE)
        dphi = d.apply(phi[s])[1:]
        dpsi = d.apply(psi[s])[1:]
        total += e.h * float(np.sum(_cell_beta(grid.beta_nodes[i]) * dphi * dpsi))
        total += float(np.sum(e.weights * grid.q_nodes[i] * phi[s] * psi[s]))
    return total


def flux_by_parts(op: DiscreteOperator, psi: np.ndarray):
    r"""Summation-by-parts form of the derivative term.

    With the cell flux :math:`s = \beta D^\alpha \psi` returns ``(r, bnd)``
    per edge, where ``r`` are node values of the right Caputo derivative of
    the flux (a difference of ``s`` pushed through the transposed memory
    table, divided by the quadrature weights) and ``bnd`` the pair of
    functionals ``phi -> s I^{1-alpha}phi`` at ``b-`` and ``a+``, so that

    .. math::

        \sum_k h s_k D^\alpha\phi_k
            = \sum_j w_j r_j \phi_j + s_{n-1} I^{1-\alpha}\phi(b^-)
              - s_0 I^{1-\alpha}\phi(a^+).
    """
    grid = op.grid
    out = []
    for i, (e, D) in enumerate(zip(grid.edges, op.derivatives)):
        yi = psi[grid.edge_slice(i)]
        s = _cell_beta(grid.beta_nodes[i]) * (D @ yi)
        # memory table G with the start trace in row 0, D = diff(G)/h
        G = np.cumsum(np.vstack([trace_row(e, op.alpha, Endpoint.START), D * e.h]), axis=0)
        jumps = s[1:] - s[:-1]
        r = -(G[1:-1].T @ jumps) / e.weights
        end = s[-1] * trace_row(e, op.alpha, Endpoint.END)
        start = s[0] * trace_row(e, op.alpha, Endpoint.START)
        out.append((r, end, start))
    return out
