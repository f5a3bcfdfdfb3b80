r"""Discrete Riemann-Liouville and Caputo operators on uniform grids.

All operators are dense triangular tables acting on node samples
:math:`f_j = f(x_j)`, :math:`x_j = a + j h`.

* Left integral: product-trapezoid rule, the piecewise-linear interpolant
  of the samples is integrated exactly against the kernel
  :math:`(x_j - s)^{\mu-1}/\Gamma(\mu)`. For :math:`\mu = 1` this is the
  running trapezoid rule. (Cell means would put the alternating vector
  ``(-1)^j`` in the null space of the operator.)
* Right integral: the adjoint of the left integral in the trapezoid-weighted
  inner product, so that the discrete integration-by-parts identity holds
  exactly.
* Riemann-Liouville derivatives: one-sided difference of the discrete
  :math:`I^{1-\alpha}`.
* Caputo derivatives: :math:`I^{1-\alpha}` of the cellwise difference quotient.

Node 0 of left derivatives (node ``n`` of right ones) is singular for
general data and is stored as a zero row.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy import special

__all__ = [
    "Side",
    "OpKind",
    "Endpoint",
    "UniformGrid1D",
    "FracConvOp",
    "check_order",
    "build_frac_op",
    "apply",
    "trace_row",
    "endpoint_trace",
    "rl_cell_derivative",
]


class Side(enum.Enum):
    LEFT = "left"
    RIGHT = "right"


class OpKind(enum.Enum):
    INTEGRAL = "integral"
    RL_DERIVATIVE = "rl_derivative"
    CAPUTO_DERIVATIVE = "caputo_derivative"


class Endpoint(enum.Enum):
    #: the start point :math:`a^+`
    START = "a+"
    #: the end point :math:`b^-`
    END = "b-"


@dataclass(frozen=True)
class UniformGrid1D:
    """Uniform grid with ``n`` cells on ``[a, b]``."""

    a: float
    b: float
    n: int

    def __post_init__(self) -> None:
        if not self.b > self.a:
            raise ValueError(f"need b > a, got a={self.a}, b={self.b}")
        if int(self.n) != self.n or self.n < 2:
            raise ValueError(f"need an integer n >= 2, got {self.n}")

    @property
    def h(self) -> float:
        return (self.b - self.a) / self.n

    @property
    def nodes(self) -> np.ndarray:
        return self.a + self.h * np.arange(self.n + 1)

    @property
    def weights(self) -> np.ndarray:
        """Trapezoid quadrature weights."""
        w = np.full(self.n + 1, self.h)
        w[0] = w[-1] = 0.5 * self.h
        return w


def check_order(order: float) -> float:
    order = float(order)
    if not (0.0 < order <= 1.0):
        raise ValueError(f"fractional order must lie in (0, 1], got {order}")
    return order


# {{{ weight tables


def _cell_kernel(n: int, h: float, mu: float) -> np.ndarray:
    r"""Exact kernel integrals over one cell at distance ``d`` cells.

    ``c[d] = h^mu/Gamma(mu+1) (d^mu - (d-1)^mu)`` for ``d = 1..n``, ``c[0] = 0``.
    """
    d = np.arange(n + 1, dtype=float)
    c = np.zeros(n + 1)
    c[1:] = (d[1:] ** mu - d[:-1] ** mu) * h**mu / special.gamma(mu + 1.0)
    return c


def _lower_toeplitz(n: int, c: np.ndarray) -> np.ndarray:
    """(n+1) x n table ``T[j, m] = c[j - m]`` for cells ``m < j``."""
    j = np.arange(n + 1)[:, None]
    m = np.arange(n)[None, :]
    d = j - m
    return np.where(d >= 1, c[np.clip(d, 0, n)], 0.0)


def _cell_difference(n: int, h: float) -> np.ndarray:
    """n x (n+1) map from node samples to cell difference quotients."""
    dif = np.zeros((n, n + 1))
    i = np.arange(n)
    dif[i, i] = -1.0 / h
    dif[i, i + 1] = 1.0 / h
    return dif


def _product_trapezoid(n: int, h: float, mu: float) -> np.ndarray:
    """Exact integral of the piecewise-linear interpolant against the kernel."""
    j = np.arange(n + 1, dtype=float)[:, None]
    k = np.arange(n + 1, dtype=float)[None, :]
    d = j - k
    p = mu + 1.0
    pos = lambda v: np.where(v > 0.0, v, 0.0) ** p
    inner = pos(d + 1.0) - 2.0 * pos(d) + pos(d - 1.0)
    first = pos(j - 1.0) - (j - mu - 1.0) * j**mu
    table = np.where(d > 0.0, inner, 0.0)
    table = np.where(k == 0.0, np.broadcast_to(first, table.shape), table)
    table = np.where((d == 0.0) & (k > 0.0), 1.0, table)
    table = np.where(d < 0.0, 0.0, table)
    table[0, :] = 0.0
    return table * h**mu / special.gamma(mu + 2.0)


def _left_integral(grid: UniformGrid1D, mu: float) -> np.ndarray:
    if mu == 0.0:
        return np.eye(grid.n + 1)
    return _product_trapezoid(grid.n, grid.h, mu)


def _right_integral(grid: UniformGrid1D, mu: float) -> np.ndarray:
    w = grid.weights
    return (_left_integral(grid, mu).T * w[None, :]) / w[:, None]


def _first_cell(grid: UniformGrid1D, mu: float) -> float:
    """Kernel integral over the cell adjacent to an endpoint."""
    return grid.h**mu / special.gamma(mu + 1.0)


def _left_memory(grid: UniformGrid1D, alpha: float) -> np.ndarray:
    """Discrete :math:`I^{1-\\alpha}_{a+}` with the start trace in row 0."""
    mu = 1.0 - alpha
    g = _left_integral(grid, mu).copy()
    g[0, :] = 0.0
    g[0, 0] = _first_cell(grid, mu)
    return g


def _right_memory(grid: UniformGrid1D, alpha: float) -> np.ndarray:
    mu = 1.0 - alpha
    g = _right_integral(grid, mu).copy()
    g[-1, :] = 0.0
    g[-1, -1] = _first_cell(grid, mu)
    return g


def rl_cell_derivative(grid: UniformGrid1D, alpha: float) -> np.ndarray:
    r"""Left RL derivative as cell values, shape ``(n, n+1)``.

    Row ``k`` is the difference quotient of the discrete
    :math:`I^{1-\alpha}_{a+} f` over cell ``k``, with the start trace used
    at node 0 so that summing the rows times ``h`` telescopes to
    ``I^{1-alpha} f(b) - I^{1-alpha} f(a+)``.
    """
    alpha = check_order(alpha)
    g = _left_memory(grid, alpha)
    return (g[1:] - g[:-1]) / grid.h


def _table(grid: UniformGrid1D, order: float, side: Side, kind: OpKind) -> np.ndarray:
    n, h = grid.n, grid.h
    if kind is OpKind.INTEGRAL:
        if side is Side.LEFT:
            return _left_integral(grid, order)
        return _right_integral(grid, order)

    mu = 1.0 - order
    if kind is OpKind.RL_DERIVATIVE:
        if side is Side.LEFT:
            table = np.zeros((n + 1, n + 1))
            table[1:] = rl_cell_derivative(grid, order)
            return table
        g = _right_memory(grid, order)
        table = np.zeros((n + 1, n + 1))
        table[:-1] = -(g[1:] - g[:-1]) / h
        return table

    dif = _cell_difference(n, h)
    if mu == 0.0:
        table = np.zeros((n + 1, n + 1))
        if side is Side.LEFT:
            table[1:] = dif
        else:
            table[:-1] = -dif
        return table
    c = _cell_kernel(n, h, mu)
    lower = _lower_toeplitz(n, c)
    if side is Side.LEFT:
        return lower @ dif
    # right-sided cells m >= j at distance m + 1 - j, the mirror of ``lower``
    upper = lower[::-1, ::-1]
    return -(upper @ dif)


# }}}


@dataclass(frozen=True)
class FracConvOp:
    """A discrete fractional operator stored as a dense triangular table."""

    side: Side
    kind: OpKind
    order: float
    grid: UniformGrid1D
    weights: np.ndarray = field(repr=False)

    def apply(self, f) -> np.ndarray:
        f = np.asarray(f, dtype=float)
        if f.shape[0] != self.grid.n + 1:
            raise ValueError(
                f"expected {self.grid.n + 1} node samples, got {f.shape[0]}"
            )
        return self.weights @ f


def build_frac_op(grid: UniformGrid1D, order: float, side: Side | str, kind: OpKind | str) -> FracConvOp:
    side = Side(side)
    kind = OpKind(kind)
    order = check_order(order)
    table = _table(grid, order, side, kind)
    table.setflags(write=False)
    return FracConvOp(side=side, kind=kind, order=order, grid=grid, weights=table)


def apply(op: FracConvOp, f) -> np.ndarray:
    return op.apply(f)


def trace_row(grid: UniformGrid1D, alpha: float, endpoint: Endpoint | str) -> np.ndarray:
    r"""Linear functional evaluating :math:`I^{1-\alpha}_{a+} f` at an endpoint.

    At ``b-`` this is the last row of the discrete left integral. At ``a+``
    the integral over an empty interval is replaced by the contribution of
    the first cell, ``h^(1-alpha) f(a) / Gamma(2-alpha)``: it tends to zero for
    bounded ``f``, reduces to ``f(a)`` for ``alpha = 1`` and stays finite for
    data behaving like ``(x-a)^(alpha-1)``.
    """
    alpha = check_order(alpha)
    endpoint = Endpoint(endpoint)
    if endpoint is Endpoint.START:
        row = np.zeros(grid.n + 1)
        row[0] = _first_cell(grid, 1.0 - alpha)
        return row
    return _left_integral(grid, 1.0 - alpha)[-1].copy()


def endpoint_trace(grid: UniformGrid1D, alpha: float, f, endpoint: Endpoint | str) -> float:
    f = np.asarray(f, dtype=float)
    if f.shape != (grid.n + 1,):
        raise ValueError(f"expected {grid.n + 1} node samples, got shape {f.shape}")
    return float(trace_row(grid, alpha, endpoint) @ f)
