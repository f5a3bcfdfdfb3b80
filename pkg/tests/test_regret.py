import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fracstar.oracle_suite import fd_directional, tiny_instance
from fracstar.regret_control import (
    RegretConfig,
    cost_J,
    cost_Jtau,
    gradient_Jtau,
    hessian_vector,
    inner,
    make_problem,
    minimize_low_regret,
    regret_gap,
    regret_trace,
    sample_initial_states,
    tau_sweep,
)
from fracstar.star_graph import BoundaryControl, ValidationError


@pytest.fixture(scope="module")
def small():
    return tiny_instance(n=8, steps=8)


def random_control(inst, rng):
    return BoundaryControl(inst.time, rng.standard_normal((2, inst.time.steps + 1)))


@given(seed=st.integers(0, 2**16))
def test_regret_splits_into_trace_pairing(small, seed):
    rng = np.random.default_rng(seed)
    v = random_control(small, rng)
    y0 = rng.standard_normal(small.grid.ndof)
    direct, split = regret_gap(small.problem, v, y0)
    assert direct == pytest.approx(split, rel=1e-10, abs=1e-12)


@given(seed=st.integers(0, 2**16), tau=st.sampled_from([1.0, 1e-2, 1e-5]))
def test_hessian_is_symmetric_and_coercive(small, seed, tau):
    rng = np.random.default_rng(seed)
    v, w = random_control(small, rng), random_control(small, rng)
    pb = small.problem
    hv, hw = hessian_vector(pb, v, tau), hessian_vector(pb, w, tau)
    assert inner(hv, w) == pytest.approx(inner(v, hw), rel=1e-10)
    assert inner(hv, v) >= 2 * pb.zeta * inner(v, v) * (1 - 1e-12)


@given(seed=st.integers(0, 2**16), tau=st.sampled_from([1.0, 1e-3]))
def test_cost_is_exactly_quadratic(small, seed, tau):
    rng = np.random.default_rng(seed)
    v = random_control(small, rng)
    pb = small.problem
    zero = v * 0.0
    g0 = gradient_Jtau(pb, zero, tau).gradient
    model = inner(g0, v) + 0.5 * inner(hessian_vector(pb, v, tau), v)
    assert cost_Jtau(pb, v, tau) == pytest.approx(model, rel=1e-9, abs=1e-12)


@pytest.mark.parametrize("tau", [1.0, 1e-3])
def test_gradient_against_finite_differences(small, tau):
    rng = np.random.default_rng(5)
    pb = small.problem
    v = random_control(small, rng)
    g = gradient_Jtau(pb, v, tau).gradient
    for _ in range(3):
        w = random_control(small, rng)
        fd = fd_directional(lambda s: cost_Jtau(pb, v + w * s, tau))
        assert not fd.ill_conditioned
        assert fd.value == pytest.approx(inner(g, w), rel=1e-6)


def test_boundary_formula_for_the_gradient():
    gaps = []
    for n in (16, 32):
        inst = tiny_instance(n=n, steps=n, alpha=1.0, gamma=1.0)
        tn = inst.time.nodes
        v = BoundaryControl(inst.time, np.array([np.sin(np.pi * tn) ** 2, np.sin(2 * tn) ** 2]))
        c = gradient_Jtau(inst.problem, v, 1e-2)
        g, fg = c.gradient.values, c.formula_gradient.values
        # Neumann trace term is exact, the Dirichlet flux is approximated
        np.testing.assert_allclose(fg[1], g[1], rtol=1e-10, atol=1e-12)
        gaps.append(np.linalg.norm(fg[0] - g[0]) / np.linalg.norm(g[0]))
    assert gaps[1] < 0.5 * gaps[0]


def test_minimizer_is_stationary_and_satisfies_the_bounds(small):
    pb = small.problem
    for tau in (1.0, 1e-4):
        b = minimize_low_regret(pb, tau, RegretConfig(cg_tol=1e-12))
        assert b.converged and b.grad_residual <= 1e-10
        assert b.J_tau <= 1e-10
        assert b.J_u <= b.J_00 + 1e-10
        assert b.control_norm <= b.misfit_00 + 1e-10
        assert b.trace_norm <= b.trace_bound + 1e-10
        assert b.J_tau == pytest.approx(cost_Jtau(pb, b.u, tau), rel=1e-8, abs=1e-12)
        assert b.J_u == pytest.approx(cost_J(pb, b.u), rel=1e-12)


def test_sweep_is_deterministic_and_map_agnostic(small):
    cfg = RegretConfig(taus=(1.0, 1e-2, 1e-4), warm_start=False, n_eigen_samples=3,
                       n_random_samples=2, seed=7)
    b1, c1 = tau_sweep(small.problem, cfg)
    b2, c2 = tau_sweep(small.problem, cfg, map_fn=map)
    for x, y in zip(b1, b2):
        assert np.array_equal(x.u.values, y.u.values)
    assert c1.pairings == c2.pairings and c1.cauchy == c2.cauchy
    assert len(c1.pairings) == len(c1.sample_norms) == 5
    assert c1.taus == (1.0, 1e-2, 1e-4)
    assert all(c1.converged)
    # the trace shrinks along the ladder
    norms = [row[1] for row in c1.trace_table]
    assert norms[0] > norms[1] > norms[2]


def test_warm_start_reaches_the_same_minimizers(small):
    cold, _ = tau_sweep(small.problem, RegretConfig(taus=(1.0, 1e-3), warm_start=False))
    warm, _ = tau_sweep(small.problem, RegretConfig(taus=(1.0, 1e-3), warm_start=True))
    for a, b in zip(cold, warm):
        d = a.u - b.u
        assert math.sqrt(inner(d, d)) <= 1e-8 * max(a.control_norm, 1.0)


def test_samples_are_seeded(small):
    cfg = RegretConfig(n_eigen_samples=2, n_random_samples=3, seed=11)
    s1 = sample_initial_states(small.problem, cfg)
    s2 = sample_initial_states(small.problem, cfg)
    assert len(s1) == 5
    assert all(np.array_equal(a, b) for a, b in zip(s1, s2))


def test_target_on_the_free_state_gives_zero_control(small):
    pb = make_problem(small.system, small.problem.y00, small.problem.f)
    for tau in (1.0, 1e-6):
        b = minimize_low_regret(pb, tau)
        assert b.cg_iters == 0
        assert np.max(np.abs(b.u.values)) == 0.0
    assert np.max(np.abs(regret_trace(pb, b.u))) == 0.0


def test_configuration_validation(small):
    with pytest.raises(ValidationError):
        cost_Jtau(small.problem, BoundaryControl.zeros(small.graph, small.time), 0.0)
    with pytest.raises(ValidationError):
        RegretConfig(taus=(1.0, 1.0))
    with pytest.raises(ValidationError):
        RegretConfig(zeta=-1.0)
    with pytest.raises(ValidationError):
        make_problem(small.system, small.problem.y_d, zeta=0.0)
