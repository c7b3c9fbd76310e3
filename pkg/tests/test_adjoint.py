from __future__ import annotations

import math
import warnings

import numpy as np
import pytest

from anticipating_mv.adjoint import (
    DriverAssembly,
    Regressor,
    assemble_control_adjoint,
    beta_norm,
    bsde_beta,
    bsde_delta0,
    check_assembly,
    duality_check,
    inner_bsde_solve,
    pairwise_assembly,
    solve_adjoint,
    terminal_residual,
)
from anticipating_mv.forward import solve_forward
from anticipating_mv.measure import Separable
from anticipating_mv.problems import Control, ProblemSpec, TimeGrid, builtin
from anticipating_mv.variational import solve_variational

from .oracles import decoupled_adjoint_oracle


def _base(spec, N, M, seed=1, u=0.0):
    grid = TimeGrid.for_problem(spec, N)
    ctrl = Control.constant(grid, u, spec)
    ens, _ = solve_forward(spec, ctrl, M, seed, tol=1e-12)
    return grid, ctrl, ens


def _assembly(M, zeta, driver=None, terminal=None, d=0, C=1.0):
    return DriverAssembly(
        zeta=np.full(M, zeta) if np.isscalar(zeta) else zeta,
        driver=driver or (lambda k, a, b, c, e: np.zeros(M)),
        terminal_integrand=terminal or (lambda k, a, b: np.zeros(M)),
        delta_steps=d,
        lipschitz=C,
    )


def test_constants():
    assert bsde_beta(1.0) == 10.0
    assert bsde_delta0(1.0) == pytest.approx(math.log(3) / 10)
    assert bsde_beta(2.0) == pytest.approx(8 * 8 + 2 + 1)
    assert bsde_beta(1.0, c_rho=4.0) == 5.0


def test_inner_constant_martingale():
    spec = builtin("lq-anticipating-mean")
    _, _, ens = _base(spec, 20, 200)
    p, q, imp = inner_bsde_solve(_assembly(200, 2.5), ens, (np.zeros((21, 200)), np.zeros((20, 200))))
    np.testing.assert_allclose(p, 2.5, atol=1e-12)
    np.testing.assert_allclose(q, 0.0, atol=1e-10)
    assert np.all(imp == 0.0)


def test_inner_deterministic_integral():
    spec = builtin("lq-anticipating-mean")
    grid, _, ens = _base(spec, 20, 200)
    asm = _assembly(200, 0.0, driver=lambda k, a, b, c, e: np.ones(200))
    p, q, _ = inner_bsde_solve(asm, ens, (np.zeros((21, 200)), np.zeros((20, 200))))
    np.testing.assert_allclose(p, np.repeat((1.0 - grid.times)[:, None], 200, axis=1), atol=1e-12)
    np.testing.assert_allclose(q, 0.0, atol=1e-10)


def test_conditional_expectation_of_terminal_state():
    b0, s0 = 0.4, 0.5
    spec = builtin("constant", {"b": b0, "sigma": s0})
    M = 4000
    grid, _, ens = _base(spec, 50, M)
    asm = _assembly(M, ens.X[-1].copy())
    p, q, _ = inner_bsde_solve(asm, ens, (np.zeros((51, M)), np.zeros((50, M))))
    # the sample regression of future noise on X_k is zero only up to O(M^-1/2)
    rms = np.sqrt(np.mean((p - ens.X - b0 * (1.0 - grid.times)[:, None]) ** 2, axis=1))
    assert rms.max() <= 3 / math.sqrt(M)
    # q is noisier (each sample carries dB^2/dt) and the quadratic fit is loose in the tails
    q_rms = np.sqrt(np.mean((q - s0) ** 2, axis=1))
    assert q_rms.max() <= 3 / math.sqrt(M)


def test_regression_fallbacks():
    x = np.full(10, 3.0)
    r = Regressor(x, 2)
    assert r.B is None
    np.testing.assert_allclose(r.fit(np.arange(10.0)), 4.5)
    # two distinct points cannot support a quadratic
    x2 = np.array([0.0, 1.0] * 20)
    with pytest.warns(UserWarning, match="lowering degree"):
        r2 = Regressor(x2, 2)
    np.testing.assert_allclose(r2.fit(3 * x2 + 1), 3 * x2 + 1, atol=1e-12)


def test_non_finite_driver():
    spec = builtin("lq-anticipating-mean")
    _, _, ens = _base(spec, 10, 20)
    asm = _assembly(20, 0.0, driver=lambda k, a, b, c, e: np.full(20, np.nan))
    with pytest.raises(Exception, match="non-finite"):
        inner_bsde_solve(asm, ens, (np.zeros((11, 20)), np.zeros((10, 20))))


def test_constant_assembly_converges_in_two_iterations():
    spec = builtin("lq-anticipating-mean")
    _, _, ens = _base(spec, 20, 100)
    asm = _assembly(100, 1.0, driver=lambda k, a, b, c, e: np.full(100, 0.3), terminal=lambda k, a, b: np.ones(100), d=2)
    sol = solve_adjoint(asm, ens)
    assert sol.report.iterations == 2 and sol.report.residuals[1] == 0.0


def test_decoupled_matches_riccati():
    spec = builtin("decoupled")
    u0 = 0.3
    M = 10_000
    grid, ctrl, ens = _base(spec, 100, M, u=u0)
    asm = assemble_control_adjoint(spec, ens, ctrl)
    sol = solve_adjoint(asm, ens)
    t, P, eta = decoupled_adjoint_oracle(0.5, 1.0, 1.0, 1.0, u0)
    idx = np.arange(101) * 1000
    ref = P[idx][:, None] * ens.X + eta[idx][:, None]
    l2 = math.sqrt(np.sum(np.mean((sol.p - ref) ** 2, axis=1)[:-1] * grid.dt))
    assert l2 <= 5e-2
    assert np.all(sol.terminal_implicit_part == 0.0)


def test_decoupled_equals_plain_backward_solver():
    spec = builtin("decoupled")
    M = 500
    grid, ctrl, ens = _base(spec, 40, M, u=0.2)
    sol = solve_adjoint(assemble_control_adjoint(spec, ens, ctrl), ens, tol=1e-12)
    # classical backward LSMC sweep without any fixed point
    a, lam, kap = 0.5, 1.0, 1.0
    regs = [Regressor(ens.X[k], 2) for k in range(40)]
    p = np.empty((41, M))
    p[40] = kap * ens.X[40]
    for k in range(39, -1, -1):
        p[k] = regs[k].fit(p[k + 1] + (a * p[k + 1] + lam * ens.X[k]) * grid.dt)
    np.testing.assert_allclose(sol.p, p, atol=1e-10)


def test_classical_assembly_when_law_terms_vanish():
    spec = builtin("decoupled", {"delta": 0.1})
    grid, ctrl, ens = _base(spec, 20, 50)
    asm = assemble_control_adjoint(spec, ens, ctrl)
    U, V = np.random.default_rng(0).normal(size=(2, 50))
    k = 7
    np.testing.assert_allclose(asm.driver(k, U, V, U * 3, V * 3), 0.5 * U + 1.0 * ens.X[k], atol=1e-14)
    np.testing.assert_allclose(asm.zeta, ens.X[-1])
    assert np.all(asm.terminal_integrand(19, U, V) == 0.0)


def test_indicator_when_delta_covers_horizon():
    spec = builtin("lq-anticipating-mean", {"delta": 1.0, "a": 0.1, "abar": 0.1})
    grid, ctrl, ens = _base(spec, 10, 30)
    asm = assemble_control_adjoint(spec, ens, ctrl)
    U, V = np.ones(30), np.zeros(30)
    for k in range(10):
        np.testing.assert_allclose(asm.driver(k, U, V, 5 * U, V), 0.1 * U + ens.X[k], atol=1e-14)
    # every cell feeds the terminal integral with abar * mean(U)
    np.testing.assert_allclose(asm.terminal_integrand(0, U, V), 0.1)


def test_law_term_enters_after_delta():
    spec = builtin("lq-anticipating-mean", {"delta": 0.2, "abar": 0.5})
    grid, ctrl, ens = _base(spec, 10, 30)
    asm = assemble_control_adjoint(spec, ens, ctrl)
    U, V = np.ones(30), np.zeros(30)
    lagU = 2.0 * np.ones(30)
    np.testing.assert_allclose(asm.driver(1, U, V, lagU, V), 0.5 * U + ens.X[1], atol=1e-14)
    np.testing.assert_allclose(asm.driver(2, U, V, lagU, V), 0.5 * U + ens.X[2] + 0.5 * 2.0, atol=1e-14)


def test_pairwise_assembly_matches_control_assembly():
    spec = builtin("lq-anticipating-mean", {"delta": 0.2, "abar": 0.5})
    grid, ctrl, ens = _base(spec, 10, 40)
    d = grid.delta_steps
    X = ens.X

    def theta(k, x1, x2, x3, x4):
        return 0.5 * x1 + X[k][:, None] + (0.5 * x3 if k >= d else 0.0 * x3)

    def vartheta(k, x3, x4):
        return 0.5 * x3

    pw = pairwise_assembly(theta, vartheta, X[-1], d, spec.lipschitz_C)
    ref = assemble_control_adjoint(spec, ens, ctrl)
    a = solve_adjoint(pw, ens, tol=1e-12)
    b = solve_adjoint(ref, ens, tol=1e-12)
    np.testing.assert_allclose(a.p, b.p, atol=1e-10)
    rep = check_assembly(pw, ens)
    assert rep["driver_lipschitz"] <= spec.lipschitz_C + 1e-6
    assert rep["vartheta_at_zero"] == 0.0


def test_pairwise_swap_in_general_lions_derivative():
    # a non-separable law derivative goes through the pairwise cloud average
    def dmu(t, x, mu, y, u):
        return np.tanh(x) * y

    spec = builtin("lq-anticipating-mean", {"delta": 0.2, "abar": 0.5})
    sep = ProblemSpec(**{**spec.__dict__, "db_dmu": Separable(lambda t, x, mu, u: np.tanh(x), lambda t, mu, y, u: y)})
    gen = ProblemSpec(**{**spec.__dict__, "db_dmu": dmu})
    grid, ctrl, ens = _base(spec, 10, 64)
    U = np.random.default_rng(1).normal(size=64)
    a = assemble_control_adjoint(sep, ens, ctrl).terminal_integrand(9, U, U)
    b = assemble_control_adjoint(gen, ens, ctrl).terminal_integrand(9, U, U)
    np.testing.assert_allclose(a, b, atol=1e-13)


def _lq_run(seed, M=4000, sin_amp=0.0):
    spec = builtin("lq-anticipating-mean", {"delta": 1 / 14, "sin_amp": sin_amp})
    grid = TimeGrid.for_problem(spec, 140)
    us = Control.constant(grid, -0.5, spec)
    u = Control(np.sin(3 * grid.times[:-1]), grid)
    ens, _ = solve_forward(spec, us, M, seed, tol=1e-10)
    asm = assemble_control_adjoint(spec, ens, us)
    sol = solve_adjoint(asm, ens, tol=1e-8)
    return spec, ens, us, u, asm, sol


def test_outer_contraction_and_terminal_condition():
    spec, ens, us, u, asm, sol = _lq_run(1)
    assert spec.delta <= asm.delta0
    assert sol.report.converged
    assert max(sol.report.contraction_estimates) <= 1 / math.sqrt(2) + 0.1
    assert terminal_residual(sol, asm, ens) <= 10 * 1e-8
    # one more application barely moves the solution
    p, q, _ = inner_bsde_solve(asm, ens, (sol.p, sol.q))
    assert beta_norm(p - sol.p, q - sol.q, asm.beta, ens) <= 10 * 1e-8
    assert sol.p_paths.shape == (4000, 141) and sol.q_paths.shape == (4000, 140)
    assert np.array_equal(sol.p_at(-3), sol.p[0]) and np.all(sol.q_at(-1) == 0.0)


@pytest.mark.parametrize("sin_amp", [0.0, 0.1])
def test_duality_identity(sin_amp):
    spec, ens, us, u, asm, sol = _lq_run(2, M=2000, sin_amp=sin_amp)
    Y = solve_variational(spec, ens, us, u, tol=1e-10)
    rep = duality_check(spec, ens, us, u, Y.Y, sol, asm)
    assert rep.gap <= 5 / math.sqrt(2000) * rep.scale
    assert set(rep.as_dict()["terms"]) == {"state", "law", "driver", "control"}


def test_warning_beyond_adjoint_bound():
    spec = builtin("lq-anticipating-mean", {"delta": 1 / 7})
    _, ctrl, ens = _base(spec, 70, 200)
    asm = assemble_control_adjoint(spec, ens, ctrl)
    with pytest.warns(UserWarning, match="adjoint contraction bound"):
        solve_adjoint(asm, ens)


def test_divergence_reported():
    spec = builtin("lq-anticipating-mean")
    _, _, ens = _base(spec, 20, 50)
    asm = _assembly(50, 1.0, driver=lambda k, a, b, c, e: 400.0 * a)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        from anticipating_mv.exceptions import PicardDivergence

        asm.driver = lambda k, a, b, c, e: 400.0 * np.mean(np.abs(c)) + 50.0 * np.abs(a) + 1.0
        asm.terminal_integrand = lambda k, a, b: 100.0 * np.abs(a) + 1.0
        asm.delta_steps = 20
        with pytest.raises(PicardDivergence):
            solve_adjoint(asm, ens, max_iter=50)
