"""Star graph data model, grids, space-time fields and cost inner products.

Edges are numbered ``0..N-1`` in code; edge ``i`` here is edge ``i+1`` in
the usual one-based notation. Edge 0 carries a homogeneous Dirichlet end,
edges ``1..m-1`` controlled Dirichlet ends and edges ``m..N-1`` controlled
Neumann ends. Control signal ``k`` acts on edge ``k+1``.

Graph degrees of freedom are the node samples of all edges stacked edge by
edge; the junction node is duplicated on every edge and glued by
constraints (see :mod:`fracstar.operator_assembly`).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

from .fractional_kernels import UniformGrid1D

__all__ = [
    "ValidationError",
    "Coefficient",
    "StarGraph",
    "GraphGrid",
    "TimeGrid",
    "GraphField",
    "BoundaryControl",
    "ProblemData",
    "CoefficientBounds",
    "validate",
    "space_time_inner",
    "control_norm2",
]

#: a coefficient is a constant, a vectorized function of ``x`` or node samples
Coefficient = Union[float, Callable[[np.ndarray], np.ndarray], np.ndarray]


class ValidationError(ValueError):
    """Invalid graph, coefficient or problem data."""


def _sample(coef: Coefficient, x: np.ndarray) -> np.ndarray:
    if callable(coef):
        vals = np.asarray(coef(x), dtype=float)
        return np.broadcast_to(vals, x.shape).copy()
    vals = np.asarray(coef, dtype=float)
    if vals.ndim == 0:
        return np.full(x.shape, float(vals))
    if vals.shape != x.shape:
        raise ValidationError(
            f"coefficient samples have shape {vals.shape}, grid needs {x.shape}"
        )
    return vals.copy()


@dataclass(frozen=True)
class StarGraph:
    N: int
    m: int
    a: float
    b: tuple[float, ...]
    beta: tuple[Coefficient, ...]
    q: tuple[Coefficient, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "b", tuple(float(v) for v in self.b))
        object.__setattr__(self, "beta", tuple(self.beta))
        object.__setattr__(self, "q", tuple(self.q))
        if self.N < 1:
            raise ValidationError(f"N must be at least 1, got {self.N}")
        if not (1 <= self.m <= self.N):
            raise ValidationError(f"m must satisfy 1 <= m <= N, got m={self.m}, N={self.N}")
        for name in ("b", "beta", "q"):
            if len(getattr(self, name)) != self.N:
                raise ValidationError(f"{name} needs one entry per edge ({self.N})")
        for i, bi in enumerate(self.b):
            if not bi > self.a:
                raise ValidationError(f"edge {i + 1}: end point {bi} must exceed a={self.a}")

    @classmethod
    def uniform(cls, N: int, m: int, length: float = 1.0, beta: Coefficient = 1.0,
                q: Coefficient = 1.0, a: float = 0.0) -> "StarGraph":
        return cls(N=N, m=m, a=a, b=(a + length,) * N, beta=(beta,) * N, q=(q,) * N)

    @property
    def n_controls(self) -> int:
        return self.N - 1

    @property
    def dirichlet_controlled(self) -> tuple[int, ...]:
        """Edges with a controlled Dirichlet end."""
        return tuple(range(1, self.m))

    @property
    def neumann_controlled(self) -> tuple[int, ...]:
        return tuple(range(self.m, self.N))


@dataclass(frozen=True)
class GraphGrid:
    graph: StarGraph
    n: tuple[int, ...]
    edges: tuple[UniformGrid1D, ...] = field(init=False, repr=False)
    offsets: np.ndarray = field(init=False, repr=False)
    beta_nodes: tuple[np.ndarray, ...] = field(init=False, repr=False)
    q_nodes: tuple[np.ndarray, ...] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        n = tuple(int(v) for v in (self.n if np.ndim(self.n) else (self.n,) * self.graph.N))
        if len(n) != self.graph.N:
            raise ValidationError(f"need one cell count per edge ({self.graph.N}), got {len(n)}")
        object.__setattr__(self, "n", n)
        g = self.graph
        edges = tuple(UniformGrid1D(g.a, g.b[i], n[i]) for i in range(g.N))
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "offsets", np.cumsum([0] + [ni + 1 for ni in n]))
        object.__setattr__(
            self, "beta_nodes", tuple(_sample(g.beta[i], e.nodes) for i, e in enumerate(edges))
        )
        object.__setattr__(
            self, "q_nodes", tuple(_sample(g.q[i], e.nodes) for i, e in enumerate(edges))
        )

    @property
    def ndof(self) -> int:
        return int(self.offsets[-1])

    def edge_slice(self, i: int) -> slice:
        return slice(int(self.offsets[i]), int(self.offsets[i + 1]))

    def start_index(self, i: int) -> int:
        return int(self.offsets[i])

    def end_index(self, i: int) -> int:
        return int(self.offsets[i + 1]) - 1

    @property
    def weights(self) -> np.ndarray:
        return np.concatenate([e.weights for e in self.edges])

    @property
    def x(self) -> np.ndarray:
        """Node coordinates of all degrees of freedom."""
        return np.concatenate([e.nodes for e in self.edges])

    @property
    def edge_index(self) -> np.ndarray:
        return np.concatenate([np.full(e.n + 1, i) for i, e in enumerate(self.edges)])

    def split(self, vec: np.ndarray) -> list[np.ndarray]:
        return [vec[..., self.edge_slice(i)] for i in range(self.graph.N)]

    def sample(self, fn: Callable[[int, np.ndarray], np.ndarray]) -> np.ndarray:
        """Stack ``fn(edge, x)`` over all edges into one graph vector."""
        return np.concatenate([
            np.broadcast_to(np.asarray(fn(i, e.nodes), dtype=float), e.nodes.shape)
            for i, e in enumerate(self.edges)
        ])


@dataclass(frozen=True)
class TimeGrid:
    T: float
    steps: int

    def __post_init__(self) -> None:
        if not self.T > 0:
            raise ValidationError(f"T must be positive, got {self.T}")
        if int(self.steps) != self.steps or self.steps < 4:
            raise ValidationError(f"need an integer number of steps >= 4, got {self.steps}")

    @property
    def dt(self) -> float:
        return self.T / self.steps

    @property
    def nodes(self) -> np.ndarray:
        return self.dt * np.arange(self.steps + 1)

    @property
    def weights(self) -> np.ndarray:
        w = np.full(self.steps + 1, self.dt)
        w[0] = w[-1] = 0.5 * self.dt
        return w


@dataclass(frozen=True)
class GraphField:
    """Node samples of a space-time field, shape ``(n_t + 1, ndof)``.

    ``singular_row`` marks the time row where a Riemann-Liouville type field
    is undefined (0 for forward problems, ``n_t`` for backward ones); that
    row holds NaN.
    """

    grid: GraphGrid
    time: TimeGrid
    values: np.ndarray = field(repr=False)
    singular_row: int | None = None

    def __post_init__(self) -> None:
        shape = (self.time.steps + 1, self.grid.ndof)
        if self.values.shape != shape:
            raise ValidationError(f"field has shape {self.values.shape}, expected {shape}")

    @property
    def rl_singular(self) -> bool:
        return self.singular_row is not None

    @classmethod
    def zeros(cls, grid: GraphGrid, time: TimeGrid) -> "GraphField":
        return cls(grid, time, np.zeros((time.steps + 1, grid.ndof)))

    @classmethod
    def from_function(cls, grid: GraphGrid, time: TimeGrid,
                      fn: Callable[[int, np.ndarray, np.ndarray], np.ndarray]) -> "GraphField":
        """Sample ``fn(edge, x, t)``; ``x`` and ``t`` broadcast as a mesh."""
        t = time.nodes[:, None]
        cols = [
            np.broadcast_to(np.asarray(fn(i, e.nodes[None, :], t), dtype=float),
                            (time.steps + 1, e.n + 1))
            for i, e in enumerate(grid.edges)
        ]
        return cls(grid, time, np.concatenate(cols, axis=1))

    @classmethod
    def constant_in_time(cls, grid: GraphGrid, time: TimeGrid, vec: np.ndarray) -> "GraphField":
        return cls(grid, time, np.tile(np.asarray(vec, dtype=float), (time.steps + 1, 1)))

    def edge(self, i: int) -> np.ndarray:
        return self.values[:, self.grid.edge_slice(i)]

    def at(self, n: int) -> np.ndarray:
        if n < 0:
            n += self.time.steps + 1
        if n == self.singular_row:
            raise ValueError(
                "this field is singular at that time row: Riemann-Liouville solutions "
                "behave like t^(gamma-1) there; use the weighted trace instead"
            )
        return self.values[n]

    def _like(self, values: np.ndarray) -> "GraphField":
        return GraphField(self.grid, self.time, values, self.singular_row)

    def __add__(self, other: "GraphField") -> "GraphField":
        return self._like(self.values + other.values)

    def __sub__(self, other: "GraphField") -> "GraphField":
        return self._like(self.values - other.values)

    def __mul__(self, c: float) -> "GraphField":
        return self._like(self.values * c)

    __rmul__ = __mul__


@dataclass(frozen=True)
class BoundaryControl:
    """Control signals ``v^2..v^N`` sampled on the time grid, shape ``(N-1, n_t+1)``."""

    time: TimeGrid
    values: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        if self.values.ndim != 2 or self.values.shape[1] != self.time.steps + 1:
            raise ValidationError(
                f"control has shape {self.values.shape}, expected (N-1, {self.time.steps + 1})"
            )

    @classmethod
    def zeros(cls, graph: StarGraph, time: TimeGrid) -> "BoundaryControl":
        return cls(time, np.zeros((graph.n_controls, time.steps + 1)))

    def __add__(self, other: "BoundaryControl") -> "BoundaryControl":
        return BoundaryControl(self.time, self.values + other.values)

    def __sub__(self, other: "BoundaryControl") -> "BoundaryControl":
        return BoundaryControl(self.time, self.values - other.values)

    def __mul__(self, c: float) -> "BoundaryControl":
        return BoundaryControl(self.time, self.values * c)

    __rmul__ = __mul__

    def norm(self) -> float:
        return float(np.sqrt(control_norm2(self)))


@dataclass(frozen=True)
class ProblemData:
    f: GraphField
    y_d: GraphField
    y0_samples: tuple[np.ndarray, ...]
    zeta: float

    def __post_init__(self) -> None:
        if not self.zeta > 0:
            raise ValidationError(f"zeta must be positive, got {self.zeta}")
        if self.f.rl_singular or self.y_d.rl_singular:
            raise ValidationError("f and y_d must be defined on the full time grid")


@dataclass(frozen=True)
class CoefficientBounds:
    beta_min: tuple[float, ...]
    q_min: tuple[float, ...]
    #: smallest lower bound over edges
    beta_0: float
    q_0: float
    #: largest sup norm over edges
    beta_bar: float
    q_bar: float


def validate(grid: GraphGrid) -> CoefficientBounds:
    """Check positivity of the sampled coefficients and return their bounds."""
    for name, samples in (("beta", grid.beta_nodes), ("q", grid.q_nodes)):
        for i, vals in enumerate(samples):
            if not np.all(np.isfinite(vals)):
                j = int(np.flatnonzero(~np.isfinite(vals))[0])
                raise ValidationError(f"{name} on edge {i + 1} is not finite at node {j}")
            bad = np.flatnonzero(vals <= 0.0)
            if bad.size:
                j = int(bad[0])
                raise ValidationError(
                    f"{name} on edge {i + 1} must be positive: node {j} "
                    f"(x={grid.edges[i].nodes[j]:.6g}) has value {vals[j]:.6g}"
                )
    beta_min = tuple(float(v.min()) for v in grid.beta_nodes)
    q_min = tuple(float(v.min()) for v in grid.q_nodes)
    return CoefficientBounds(
        beta_min=beta_min,
        q_min=q_min,
        beta_0=min(beta_min),
        q_0=min(q_min),
        beta_bar=max(float(np.abs(v).max()) for v in grid.beta_nodes),
        q_bar=max(float(np.abs(v).max()) for v in grid.q_nodes),
    )


def _time_weights(u: GraphField, w: GraphField) -> np.ndarray:
    if u.singular_row != w.singular_row:
        raise ValueError("fields must exclude the same singular time row")
    tw = u.time.weights.copy()
    if u.singular_row is not None:
        tw[u.singular_row] = 0.0
    return tw


def space_time_inner(u: GraphField, w: GraphField) -> float:
    """Trapezoid-in-time, trapezoid-in-space pairing of two fields."""
    if u.values.shape != w.values.shape:
        raise ValueError(f"shape mismatch {u.values.shape} vs {w.values.shape}")
    tw = _time_weights(u, w)
    uv = np.nan_to_num(u.values) if u.rl_singular else u.values
    wv = np.nan_to_num(w.values) if w.rl_singular else w.values
    return float(tw @ ((uv * wv) @ u.grid.weights))


def control_norm2(v: BoundaryControl) -> float:
    return float(np.sum(v.values**2 @ v.time.weights))
