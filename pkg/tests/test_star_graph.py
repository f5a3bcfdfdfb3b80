import numpy as np
import pytest
from hypothesis import given, strategies as st

from fracstar.star_graph import (
    BoundaryControl,
    GraphField,
    GraphGrid,
    StarGraph,
    TimeGrid,
    ValidationError,
    control_norm2,
    space_time_inner,
    validate,
)


def test_graph_layout():
    g = StarGraph(N=3, m=2, a=0.0, b=(1.0, 2.0, 0.5), beta=(1.0, 2.0, 3.0), q=(1.0,) * 3)
    assert g.n_controls == 2
    assert g.dirichlet_controlled == (1,)
    assert g.neumann_controlled == (2,)
    grid = GraphGrid(g, (4, 8, 2))
    assert grid.ndof == 5 + 9 + 3
    assert grid.start_index(1) == 5 and grid.end_index(1) == 13
    assert grid.edge_index.tolist() == [0] * 5 + [1] * 9 + [2] * 3
    np.testing.assert_allclose(grid.split(grid.x)[1], np.linspace(0.0, 2.0, 9))
    assert grid.weights.sum() == pytest.approx(3.5)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(N=0, m=0),
        dict(N=3, m=0),
        dict(N=3, m=4),
    ],
)
def test_graph_validation(kwargs):
    with pytest.raises(ValidationError):
        StarGraph.uniform(**kwargs)


def test_edges_must_have_positive_length():
    with pytest.raises(ValidationError, match="edge 2"):
        StarGraph(N=2, m=1, a=1.0, b=(2.0, 1.0), beta=(1.0, 1.0), q=(1.0, 1.0))


def test_coefficient_validation_names_the_node():
    g = StarGraph.uniform(3, 2, beta=lambda x: x - 0.5)
    with pytest.raises(ValidationError, match="beta on edge 1 must be positive: node 0"):
        validate(GraphGrid(g, 8))
    g = StarGraph.uniform(2, 1, q=lambda x: np.where(x > 0.9, np.nan, 1.0))
    with pytest.raises(ValidationError, match="not finite"):
        validate(GraphGrid(g, 10))
    with pytest.raises(ValidationError):
        GraphGrid(StarGraph.uniform(2, 1, beta=np.ones(3)), 8)


def test_coefficient_bounds():
    g = StarGraph(N=2, m=1, a=0.0, b=(1.0, 1.0), beta=(lambda x: 1 + x, 3.0), q=(2.0, 0.5))
    b = validate(GraphGrid(g, 10))
    assert b.beta_0 == 1.0 and b.beta_bar == 3.0
    assert b.q_0 == 0.5 and b.q_bar == 2.0


def test_time_grid():
    t = TimeGrid(2.0, 8)
    assert t.dt == 0.25
    assert t.weights.sum() == pytest.approx(2.0)
    for steps in (3, 4.5):
        with pytest.raises(ValidationError):
            TimeGrid(1.0, steps)
    with pytest.raises(ValidationError):
        TimeGrid(0.0, 8)


@given(c=st.floats(-3, 3), d=st.floats(-3, 3))
def test_inner_product_is_exact_for_products_of_constants(c, d):
    grid = GraphGrid(StarGraph.uniform(3, 2, length=0.7), 6)
    time = TimeGrid(1.5, 6)
    u = GraphField.constant_in_time(grid, time, np.full(grid.ndof, c))
    w = GraphField.constant_in_time(grid, time, np.full(grid.ndof, d))
    assert space_time_inner(u, w) == pytest.approx(c * d * 3 * 0.7 * 1.5, abs=1e-12)
    v = BoundaryControl(time, np.full((2, 7), c))
    assert control_norm2(v) == pytest.approx(2 * c * c * 1.5, abs=1e-12)


def test_field_algebra_and_singular_rows():
    grid = GraphGrid(StarGraph.uniform(2, 1), 4)
    time = TimeGrid(1.0, 4)
    u = GraphField.from_function(grid, time, lambda i, x, t: (i + 1) * x * t)
    assert u.values.shape == (5, 10)
    np.testing.assert_allclose(u.edge(1)[-1], 2 * grid.edges[1].nodes)
    np.testing.assert_allclose((2 * u - u).values, u.values)
    vals = u.values.copy()
    vals[0] = np.nan
    s = GraphField(grid, time, vals, singular_row=0)
    assert s.rl_singular
    with pytest.raises(ValueError, match="singular"):
        s.at(0)
    np.testing.assert_allclose(s.at(-1), u.at(4))
    with pytest.raises(ValueError):
        space_time_inner(s, u)
    with pytest.raises(ValidationError):
        GraphField(grid, time, np.zeros((4, 10)))
    with pytest.raises(ValidationError):
        BoundaryControl(time, np.zeros(5))
