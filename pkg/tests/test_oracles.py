import math

import numpy as np
import pytest
from scipy import special

from fracstar.evolution_solvers import make_context, make_controlled_system, solve_controlled
from fracstar.operator_assembly import assemble
from fracstar.oracle_suite import (
    caputo_derivative_reference,
    classical_limit_solver,
    dense_quadratic_solve,
    explicit_hessian,
    fd_directional,
    fd_gradient,
    ml_reference,
    rl_integral_reference,
    tiny_instance,
)
from fracstar.regret_control import gradient_Jtau, inner, minimize_low_regret, RegretConfig
from fracstar.star_graph import BoundaryControl, GraphField, GraphGrid, StarGraph, TimeGrid


@pytest.fixture(scope="module")
def small():
    return tiny_instance(n=8, steps=8)


def test_ml_reference_closed_forms():
    assert ml_reference(1.0, 1.0, -2.0) == pytest.approx(math.exp(-2.0), rel=1e-15)
    assert ml_reference(0.5, 1.0, -3.0) == pytest.approx(special.erfcx(3.0), rel=1e-14)
    assert ml_reference(2.0, 2.0, -4.0) == pytest.approx(math.sin(2.0) / 2.0, rel=1e-14)
    # large arguments need the extra working precision
    assert ml_reference(1.0, 1.0, -40.0) == pytest.approx(math.exp(-40.0), rel=1e-14)


def test_integral_references():
    # I^mu x^p = Gamma(p+1)/Gamma(p+mu+1) x^(p+mu)
    for mu, p in ((0.3, 1.0), (0.7, 2.5)):
        exact = special.gamma(p + 1) / special.gamma(p + mu + 1) * 0.8 ** (p + mu)
        assert rl_integral_reference(lambda s: s**p, 0.0, 0.8, mu) == pytest.approx(exact, rel=1e-10)
    # Caputo derivative of t^2 of order 0.4
    exact = 2.0 / special.gamma(2.6) * 1.3**1.6
    assert caputo_derivative_reference(lambda s: 2 * s, 0.0, 1.3, 0.4) == pytest.approx(exact, rel=1e-10)


def test_fd_on_known_functions():
    res = fd_directional(lambda s: math.exp(2 * s) * math.sin(1 + s))
    assert res.value == pytest.approx(2 * math.sin(1) + math.cos(1), rel=1e-10)
    assert not res.ill_conditioned
    rng = np.random.default_rng(0)
    noisy = fd_directional(lambda s: s + 1e-6 * rng.standard_normal())
    assert noisy.ill_conditioned


def test_dense_and_cg_minimizers_agree(small):
    for tau in (1.0, 1e-2):
        dense = dense_quadratic_solve(small.problem, tau)
        assert dense.symmetry_error < 1e-12
        assert dense.factorization_gap < 1e-10
        assert dense.min_generalized_eig >= 2 * small.problem.zeta * (1 - 1e-10)
        cg = minimize_low_regret(small.problem, tau, RegretConfig(cg_tol=1e-12)).u
        d = cg - dense.u
        assert math.sqrt(inner(d, d)) <= 1e-8 * math.sqrt(inner(dense.u, dense.u))


def test_forward_only_hessian_matches_the_adjoint_cascade(small):
    for tau in (1.0, 1e-4):
        H = explicit_hessian(small.problem, tau)
        G = dense_quadratic_solve(small.problem, tau).hessian
        assert np.linalg.norm(H - G) <= 1e-10 * np.linalg.norm(G)


def test_fd_gradient_matches_adjoint(small):
    rng = np.random.default_rng(2)
    v = BoundaryControl(small.time, rng.standard_normal((2, 9)))
    fd, flagged = fd_gradient(small.problem, v, 1e-2)
    g = gradient_Jtau(small.problem, v, 1e-2).gradient
    assert not flagged
    np.testing.assert_allclose(fd.values, g.values, rtol=1e-6, atol=1e-8 * np.abs(g.values).max())
    with pytest.raises(ValueError):
        dense_quadratic_solve(small.problem, 1.0, max_dof=5)


def test_classical_oracle_relaxes_the_first_mode():
    # one edge, free at the junction, Dirichlet at the end: cos(pi x/2) decays at (pi/2)^2 + 1
    grid = GraphGrid(StarGraph.uniform(1, 1), 128)
    time = TimeGrid(0.5, 128)
    x = grid.x
    y = classical_limit_solver(grid, time, np.cos(np.pi * x / 2))
    exact = np.exp(-((np.pi / 2) ** 2 + 1) * 0.5) * np.cos(np.pi * x / 2)
    assert np.abs(y.values[-1] - exact).max() <= 1e-3


def test_classical_oracle_against_the_modal_solver_without_controls():
    grid = GraphGrid(StarGraph.uniform(3, 2), 64)
    time = TimeGrid(1.0, 64)
    f = GraphField.from_function(grid, time, lambda i, x, t: (i + 1) * x * (1 - x) * t)
    sysm = make_controlled_system(make_context(assemble(grid, 1.0), time, 1.0))
    a = solve_controlled(sysm, f).values
    b = classical_limit_solver(grid, time, None, f).values
    assert np.linalg.norm(a - b) / np.linalg.norm(b) <= 1e-3


def test_tiny_instance_shape():
    t = tiny_instance()
    assert t.grid.ndof == 3 * 17
    assert t.time.steps == 16
    assert t.graph.n_controls == 2
