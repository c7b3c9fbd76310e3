from __future__ import annotations

import math

import numpy as np
import pytest

from anticipating_mv.forward import solve_forward
from anticipating_mv.measure import EmpiricalMeasure
from anticipating_mv.optimizer import (
    StepRule,
    _adjoint_gradient,
    evaluate_cost,
    gateaux_gradient_check,
    hamiltonian,
    hamiltonian_u_gradient,
    kkt_flags,
    optimize,
)
from anticipating_mv.problems import Control, ProblemSpec, TimeGrid, builtin, lq_mean_riccati

from .oracles import lq_cost_at_zero, lq_open_loop_optimum


def _spec(**kw):
    base = dict(
        x0=0.0, T=1.0, delta=0.0, lipschitz_C=1.0, control_lo=-1.0, control_hi=1.0,
        b=lambda t, x, mu, u: 0.0 * x, sigma=lambda t, x, mu, u: 0.3 + 0.0 * x,
        l=lambda t, x, mu, u: 0.0, g=lambda x, mu: 0.0,
    )
    base.update(kw)
    return ProblemSpec(**base)


def _w(t):
    return 1.5 * np.sin(2 * np.pi * t)


def _tracking_spec():
    return _spec(
        l=lambda t, x, mu, u: 0.5 * (u - _w(t)) ** 2 + 0.0 * x,
        dl_du=lambda t, x, mu, u: (u - _w(t)) + 0.0 * x,
    )


def test_hamiltonian_examples():
    mu = EmpiricalMeasure(np.array([1.0]))
    zero = _spec(sigma=lambda t, x, mu, u: 0.0)
    assert hamiltonian(zero, 0.0, 1.0, mu, 0.3, 2.0, 5.0) == 0.0
    ones = _spec(
        l=lambda t, x, mu, u: 1.0, b=lambda t, x, mu, u: 2.0, sigma=lambda t, x, mu, u: 3.0
    )
    assert hamiltonian(ones, 0.0, 0.0, mu, 0.0, 1.0, 1.0) == 6.0
    lq = builtin("lq-anticipating-mean")
    # 0.5 * (1 + 0.25) + (0.5 + 1 + 0.5) * 2
    assert hamiltonian(lq, 0.0, 1.0, mu, 0.5, 2.0, 0.0) == pytest.approx(4.625, abs=1e-15)


def test_hamiltonian_u_gradient():
    mu = EmpiricalMeasure(np.array([0.2, -0.4]))
    assert hamiltonian_u_gradient(_spec(), 0.0, 1.0, mu, 0.7, 3.0, 1.0) == 0.0
    lq = builtin("lq-anticipating-mean", {"c": 1.7})
    assert hamiltonian_u_gradient(lq, 0.3, 0.1, mu, 0.4, 2.0, 9.0) == pytest.approx(0.4 + 1.7 * 2.0)


def test_hamiltonian_gradient_central_differences():
    spec = builtin("lq-anticipating-mean", {"sin_amp": 0.1})
    rng = np.random.default_rng(4)
    eps = 1e-3
    for _ in range(20):
        t, x, u, p, q = rng.uniform(-1, 1, 5)
        mu = EmpiricalMeasure(rng.normal(size=5))
        fd = (hamiltonian(spec, t, x, mu, u + eps, p, q) - hamiltonian(spec, t, x, mu, u - eps, p, q)) / (2 * eps)
        assert abs(fd - hamiltonian_u_gradient(spec, t, x, mu, u, p, q)) <= 1e-8


def test_cost_trivial_cases():
    spec = _spec(x0=0.8, sigma=lambda t, x, mu, u: 0.0 * x, g=lambda x, mu: x)
    g = TimeGrid(1.0, 10)
    J, se = evaluate_cost(spec, Control.constant(g, 0.0), 16, 0)
    assert J == pytest.approx(0.8, abs=1e-15) and se == 0.0
    unit = _spec(T=2.0, l=lambda t, x, mu, u: 1.0)
    J, _ = evaluate_cost(unit, Control.constant(TimeGrid(2.0, 10), 0.0), 16, 0)
    assert J == pytest.approx(2.0, abs=1e-14)
    with pytest.raises(ValueError, match="admissible"):
        evaluate_cost(spec, Control(np.full(10, 3.0), g), 4, 0)


def test_lq_cost_at_zero_against_moment_odes():
    spec = builtin("lq-anticipating-mean", {"delta": 0.1})
    N = 1000
    J, se = evaluate_cost(spec, Control.constant(TimeGrid.for_problem(spec, N), 0.0), 4000, 11)
    ref = lq_cost_at_zero(0.5, 1.0, 0.5, 1.0, 1.0, 0.1)
    # the mean grows like e^{1.5}, so the Euler bias is about 60 dt here
    assert abs(J - ref) <= 3 * se + 60.0 / N


def test_lq_cost_bias_is_first_order():
    spec = builtin("lq-anticipating-mean", {"delta": 0.1, "sigma0": 0.0})
    ref = lq_cost_at_zero(0.5, 1.0, 1e-12, 1.0, 1.0, 0.1)
    errs = [abs(evaluate_cost(spec, Control.constant(TimeGrid.for_problem(spec, N), 0.0), 2, 0)[0] - ref)
            for N in (100, 200, 400)]
    assert 1.6 <= errs[0] / errs[1] <= 2.4 and 1.6 <= errs[1] / errs[2] <= 2.4


def test_kkt_flags():
    grad = np.array([0.0, 0.5, -0.5, 0.5, -0.5, 1e-4])
    vals = np.array([0.0, -1.0, -1.0, 1.0, 1.0, 0.2])
    viol, interior, at_lo, at_hi = kkt_flags(grad, vals, -1.0, 1.0, 1e-3)
    assert viol.tolist() == [False, False, True, True, False, False]
    assert interior.tolist() == [True, False, False, False, False, True]
    assert at_lo.tolist() == [False, True, True, False, False, False]
    assert at_hi.tolist() == [False, False, False, True, True, False]


def test_pointwise_problem_already_optimal():
    spec = _tracking_spec()
    grid = TimeGrid(1.0, 40)
    w = _w(grid.times[:-1])
    u0 = Control.clamped(w, grid, spec)
    res = optimize(spec, u0, 50, 0)
    assert res.report.passed() and res.report.iterations == 0
    np.testing.assert_array_equal(res.control.values, np.clip(w, -1, 1))


def test_pointwise_problem_one_step():
    spec = _tracking_spec()
    grid = TimeGrid(1.0, 40)
    res = optimize(spec, Control.constant(grid, 0.0, spec), 50, 0)
    assert res.report.passed() and res.report.iterations <= 1
    np.testing.assert_allclose(res.control.values, np.clip(_w(grid.times[:-1]), -1, 1), atol=1e-12)
    # clamped cells sit at the bound with the gradient pointing outward
    assert np.all(res.report.boundary_ok)


@pytest.mark.slow
def test_lq_delta_zero_recovers_riccati_optimum():
    spec = builtin("lq-anticipating-mean")
    grid = TimeGrid.for_problem(spec, 100)
    res = optimize(spec, Control.constant(grid, 0.0, spec), 4000, 7)
    assert res.report.passed() and not res.report.stalled
    t, u_ref = lq_open_loop_optimum(0.5, 1.0, 1.0, 1.0, 1.0, n=100_000)
    ref = np.interp(grid.times[:-1] + 0.5 * grid.dt, t, u_ref)
    err = math.sqrt(grid.dt * np.sum((res.control.values - ref) ** 2))
    assert err <= 5e-2
    J = res.J_trace
    assert all(b <= a for a, b in zip(J, J[1:]))
    # the package's own reference agrees with the oracle
    _, _, _, u_pkg = lq_mean_riccati(spec, n_steps=20_000)
    np.testing.assert_allclose(u_pkg, np.interp(np.linspace(0, 1, 20_001), t, u_ref), atol=1e-8)


def test_max_outer_zero_reports_violations():
    spec = builtin("lq-anticipating-mean")
    grid = TimeGrid.for_problem(spec, 20)
    res = optimize(spec, Control.constant(grid, 0.0, spec), 200, 0, max_outer=0)
    assert not res.report.passed() and res.report.iterations == 0
    assert res.report.violated_cells and len(res.trace) == 1
    d = res.report.as_dict()
    assert d["passed"] is False and d["violated_cells"] == res.report.violated_cells


def test_wrong_gradient_stalls():
    spec = _tracking_spec()
    bad = _spec(l=spec.l, dl_du=lambda t, x, mu, u: -(u - _w(t)) + 0.0 * x)
    grid = TimeGrid(1.0, 10)
    res = optimize(bad, Control.constant(grid, 0.0, bad), 8, 0, step_rule=StepRule(max_halvings=5))
    assert res.report.stalled and not res.report.passed()
    np.testing.assert_array_equal(res.control.values, 0.0)


def test_initial_control_must_be_admissible():
    spec = _tracking_spec()
    with pytest.raises(ValueError):
        optimize(spec, Control(np.full(10, 2.0), TimeGrid(1.0, 10)), 8, 0)


def test_scale_consistency():
    spec = builtin("lq-anticipating-mean", {"delta": 1 / 14, "sin_amp": 0.1})
    grid = TimeGrid.for_problem(spec, 70)
    u = Control(0.3 * np.sin(2 * np.pi * grid.times[:-1]), grid)
    ens, _ = solve_forward(spec, u, 500, 2, tol=1e-12)
    g1 = _adjoint_gradient(spec, ens, u, 1e-12, 2)
    g3 = _adjoint_gradient(spec.scaled_costs(3.0), ens, u, 1e-12, 2)
    np.testing.assert_allclose(g3, 3.0 * g1, rtol=1e-8, atol=1e-10)
    # the projected update direction is unchanged
    np.testing.assert_array_equal(np.sign(g3), np.sign(g1))


def test_gateaux_identical_controls():
    spec = builtin("lq-anticipating-mean", {"delta": 1 / 14})
    grid = TimeGrid.for_problem(spec, 70)
    u = Control.constant(grid, 0.2, spec)
    rep = gateaux_gradient_check(spec, u, u, 200, 0)
    assert rep.directional_derivative == 0.0
    assert np.all(rep.finite_differences == 0.0)


def test_gateaux_pure_quadratic():
    spec = _spec(l=lambda t, x, mu, u: 0.5 * u * u + 0.0 * x, dl_du=lambda t, x, mu, u: u + 0.0 * x)
    grid = TimeGrid(1.0, 20)
    rep = gateaux_gradient_check(spec, Control.constant(grid, 0.0), Control.constant(grid, 1.0), 10, 0)
    assert rep.directional_derivative == 0.0
    np.testing.assert_allclose(rep.gaps, rep.thetas / 2, rtol=1e-12)
    assert rep.ratio_test() and abs(rep.intercept()) <= 1e-12


def test_gateaux_ratio_test_catches_a_wrong_derivative():
    spec = _spec(l=lambda t, x, mu, u: 0.5 * u * u + 0.0 * x, dl_du=lambda t, x, mu, u: u + 0.3 + 0.0 * x)
    grid = TimeGrid(1.0, 20)
    rep = gateaux_gradient_check(spec, Control.constant(grid, 0.0), Control.constant(grid, 1.0), 10, 0)
    # the gaps tend to 0.3 instead of 0
    assert not rep.ratio_test()
    assert rep.intercept() == pytest.approx(-0.3, abs=1e-12)


def test_gateaux_lq():
    spec = builtin("lq-anticipating-mean", {"delta": 1 / 14, "sin_amp": 0.1})
    grid = TimeGrid.for_problem(spec, 70)
    M = 1000
    us = Control.constant(grid, 0.0, spec)
    u = Control(0.5 * np.sin(2 * np.pi * grid.times[:-1]) + 0.5, grid)
    rep = gateaux_gradient_check(spec, us, u, M, 3)
    K = rep.slope()
    floor = 5 / math.sqrt(M) * rep.scale
    assert np.all(rep.gaps <= 1.15 * K * rep.thetas + floor)
    assert rep.ratio_test()
    # the linear part of the gap extrapolates away, leaving far less than the noise floor
    assert abs(rep.intercept()) <= 0.01 * floor
    assert set(rep.as_dict()) >= {"thetas", "gaps", "directional_derivative", "intercept"}
