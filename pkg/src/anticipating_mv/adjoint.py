"""Delayed McKean-Vlasov adjoint BSDE with implicit terminal condition.

The general equation is

    dp(t) = -phi(law~ theta_t(p(t), q(t), p~(t - delta), q~(t - delta))) dt + q(t) dB(t),
    p(T)  = zeta + int_{T - delta}^T psi(law~ vartheta_t(p~(t), q~(t))) dt,

with p(t) = p(0), q(t) = 0 for t <= 0. It is solved by the outer fixed point
(U, V) -> (p, q): freeze the delayed, law and terminal arguments at (U, V),
solve the resulting standard BSDE backward by least-squares Monte Carlo,
repeat until the beta-weighted norm of the update falls below tolerance.

Discretisation. Cell k is [t_k, t_{k+1}). The costate paired with cell k is
p(t_{k+1}) together with q_k, which is exactly the pairing produced by
differentiating the Euler scheme of the forward equation. A driver callback
for cell k therefore receives ``U[k+1], V[k]`` as the "current" values and
``U[k-d+1], V[k-d]`` (d = delta steps) as the lagged ones; the implicit
terminal integral is a left Riemann sum over the cells in [T - delta, T).
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .exceptions import MaxIterationsReached, NonFiniteError, PicardDivergence
from .forward import FixedPointReport, ParticleEnsemble, trapezoid_weights
from .measure import cloud_average_swapped
from .problems import ZERO_TERMINAL_LIONS, Control, ProblemSpec

log = logging.getLogger(__name__)


def bsde_beta(C: float, c_rho: float | None = None) -> float:
    """Weight of the outer norm: beta = C_rho + 1 with rho = 1/(8C).

    ``C_rho`` defaults to the Young-inequality constant C**2 / rho + C.
    """
    if c_rho is None:
        rho = 1.0 / (8.0 * C)
        c_rho = C * C / rho + C
    return c_rho + 1.0


def bsde_delta0(C: float, c_rho: float | None = None) -> float:
    """Largest lag with rho = 1/(8C) and (1 + exp(beta delta)) / 8 <= 1/2."""
    return min(1.0 / (8.0 * C), math.log(3.0) / bsde_beta(C, c_rho))


@dataclass
class DriverAssembly:
    """Discrete driver data for one adjoint solve.

    ``driver(k, U_now, V_now, U_lag, V_lag)`` returns, per particle, the
    law-functional of theta for cell k; ``terminal_integrand(k, U_now, V_now)``
    does the same for vartheta on the cells of [T - delta, T).
    """

    zeta: np.ndarray
    driver: Callable
    terminal_integrand: Callable
    delta_steps: int
    lipschitz: float
    c_rho: float | None = None

    @property
    def beta(self) -> float:
        return bsde_beta(self.lipschitz, self.c_rho)

    @property
    def delta0(self) -> float:
        return bsde_delta0(self.lipschitz, self.c_rho)


@dataclass(frozen=True)
class AdjointSolution:
    p: np.ndarray  # (N + 1, M)
    q: np.ndarray  # (N, M)
    report: FixedPointReport
    terminal_implicit_part: np.ndarray  # (M,)
    zeta: np.ndarray

    @property
    def p_paths(self) -> np.ndarray:
        return self.p.T

    @property
    def q_paths(self) -> np.ndarray:
        return self.q.T

    def p_at(self, k: int) -> np.ndarray:
        """p(t_k) with p(t) = p(0) for t <= 0."""
        return self.p[max(k, 0)]

    def q_at(self, k: int) -> np.ndarray:
        """q on cell k with q = 0 for negative cells."""
        return self.q[k] if k >= 0 else np.zeros(self.q.shape[1])


# -- regression --------------------------------------------------------------


class Regressor:
    """Least-squares projection on {1, z, ..., z^degree}, z the standardised state.

    Gram matrices are accumulated with plain numpy reductions so results do
    not depend on BLAS threading.
    """

    def __init__(self, x: np.ndarray, degree: int):
        self.n = x.size
        sd = float(np.std(x))
        if degree <= 0 or sd == 0.0:
            self.B = None
            return
        z = (x - float(np.mean(x))) / sd
        while degree > 0:
            B = [np.ones_like(z)]
            for _ in range(degree):
                B.append(B[-1] * z)
            G = np.array([[np.mean(B[a] * B[b]) for b in range(degree + 1)] for a in range(degree + 1)])
            if np.linalg.cond(G) < 1e12:
                break
            warnings.warn(f"rank-deficient regression basis, lowering degree to {degree - 1}", stacklevel=3)
            degree -= 1
        if degree == 0:
            self.B = None
            return
        self.B = B
        self.G = G

    def fit(self, y: np.ndarray) -> np.ndarray:
        if self.B is None:
            return np.full(self.n, float(np.mean(y)))
        rhs = np.array([np.mean(b * y) for b in self.B])
        coef = np.linalg.solve(self.G, rhs)
        out = coef[0] * self.B[0]
        for c, b in zip(coef[1:], self.B[1:]):
            out = out + c * b
        return out


# -- solver ------------------------------------------------------------------


def _lag_index(k: int, d: int) -> tuple[int, int]:
    return max(k - d + 1, 0), k - d


def _terminal(assembly: DriverAssembly, U: np.ndarray, V: np.ndarray, dt: float) -> np.ndarray:
    N = V.shape[0]
    part = np.zeros(U.shape[1])
    for k in range(max(N - assembly.delta_steps, 0), N):
        part = part + assembly.terminal_integrand(k, U[k + 1], V[k]) * dt
    return part


def inner_bsde_solve(
    assembly: DriverAssembly,
    base: ParticleEnsemble,
    frozen: tuple[np.ndarray, np.ndarray],
    basis_degree: int = 2,
    regressors: list[Regressor] | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Solve the standard BSDE obtained by freezing the arguments at ``frozen``.

    Returns ``(p, q, implicit_terminal_part)`` on time-major arrays.
    """
    if regressors is None:
        regressors = build_regressors(base, basis_degree)
    U, V = frozen
    grid = base.grid
    N, M = base.dB.shape
    dt = grid.dt
    d = assembly.delta_steps
    p = np.empty((N + 1, M))
    q = np.empty((N, M))
    implicit = _terminal(assembly, U, V, dt)
    p[N] = assembly.zeta + implicit
    zeros = np.zeros(M)
    for k in range(N - 1, -1, -1):
        iu, iv = _lag_index(k, d)
        v_lag = V[iv] if iv >= 0 else zeros
        target = p[k + 1] + assembly.driver(k, U[k + 1], V[k], U[iu], v_lag) * dt
        reg = regressors[k]
        p[k] = reg.fit(target)
        # centred increment: the F_k-measurable part of p_{k+1} carries no martingale component
        q[k] = reg.fit((p[k + 1] - reg.fit(p[k + 1])) * base.dB[k]) / dt
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
        raise NonFiniteError("non-finite adjoint values in the backward sweep")
    return p, q, implicit


def build_regressors(base: ParticleEnsemble, basis_degree: int = 2) -> list[Regressor]:
    """One regression basis per grid time before T; reusable across outer iterations."""
    return [Regressor(base.X[k], basis_degree) for k in range(base.grid.N)]


def beta_norm(U: np.ndarray, V: np.ndarray, beta: float, base: ParticleEnsemble) -> float:
    """Discrete ``||(U, V)||_beta``: initial value plus exp(beta t)-weighted L2 in time."""
    grid = base.grid
    t = grid.times
    w = np.exp(beta * t)
    total = float(np.mean(U[0] ** 2))
    total += float(np.sum(trapezoid_weights(grid) * w * np.mean(U * U, axis=1)))
    total += float(np.sum(grid.dt * w[:-1] * np.mean(V * V, axis=1)))
    return math.sqrt(total)


def solve_adjoint(
    assembly: DriverAssembly,
    base: ParticleEnsemble,
    tol: float = 1e-8,
    max_iter: int = 200,
    basis_degree: int = 2,
    delta: float | None = None,
    raise_on_max_iter: bool = False,
) -> AdjointSolution:
    """Outer fixed-point iteration from (U, V) = (0, 0)."""
    grid = base.grid
    N, M = base.dB.shape
    delta = grid.delta if delta is None else delta
    if delta > assembly.delta0:
        warnings.warn(
            f"delta={delta:g} exceeds the adjoint contraction bound {assembly.delta0:g}",
            stacklevel=2,
        )
    beta = assembly.beta
    report = FixedPointReport(beta=beta)
    U = np.zeros((N + 1, M))
    V = np.zeros((N, M))
    implicit = np.zeros(M)
    regs = build_regressors(base, basis_degree)
    for _ in range(max_iter):
        p, q, implicit = inner_bsde_solve(assembly, base, (U, V), basis_degree, regs)
        report.record(beta_norm(p - U, q - V, beta, base))
        U, V = p, q
        if report.residuals[-1] <= tol:
            report.converged = report.strictly_decreasing()
            break
        if report.diverging():
            raise PicardDivergence("Picard divergence in the adjoint BSDE: check delta against the adjoint bound")
    else:
        log.warning("adjoint iteration stopped at max_iter=%d, residual %.3e", max_iter, report.residuals[-1])
        if raise_on_max_iter:
            raise MaxIterationsReached(f"adjoint iteration did not reach tol={tol:g} in {max_iter} iterations")
    return AdjointSolution(U, V, report, implicit, assembly.zeta)


def terminal_residual(solution: AdjointSolution, assembly: DriverAssembly, base: ParticleEnsemble) -> float:
    """Particle-average |p(T) - zeta - implicit integral recomputed from (p, q)|."""
    part = _terminal(assembly, solution.p, solution.q, base.grid.dt)
    return float(np.mean(np.abs(solution.p[-1] - assembly.zeta - part)))


def contraction_ratios(solution: AdjointSolution) -> np.ndarray:
    return np.asarray(solution.report.contraction_estimates)


# -- assemblies --------------------------------------------------------------


def assemble_control_adjoint(spec: ProblemSpec, base: ParticleEnsemble, u_star: Control) -> DriverAssembly:
    """Driver and terminal data of the adjoint of the control problem.

    Tilde expectations are cloud averages in the index-swapped form: the
    derivative is evaluated with the copy's state in the state slot and the
    particle's own (future) state in the measure-argument slot, weighted by
    the copy's costate.
    """
    grid = base.grid
    N, M = base.dB.shape
    d = grid.delta_steps
    t = grid.times
    u = u_star.values
    X = base.X
    laws = base.laws()
    bx = np.empty((N, M))
    sx = np.empty((N, M))
    lx = np.empty((N, M))
    for k in range(N):
        mu = laws[grid.ahead(k)]
        bx[k] = spec.db_dx(t[k], X[k], mu, u[k])
        sx[k] = spec.dsigma_dx(t[k], X[k], mu, u[k])
        lx[k] = spec.dl_dx(t[k], X[k], mu, u[k])
    ones = np.ones(M)
    # running-cost law term: source cell k contributes at the grid index ahead(k)
    cost_lag = [
        cloud_average_swapped(spec.dl_dmu, t[k], X[k], laws[grid.ahead(k)], X[grid.ahead(k)], u[k], ones)
        for k in range(N)
    ]

    def swapped(k, U_src, V_src):
        a = grid.ahead(k)
        mu, y = laws[a], X[a]
        return (
            cloud_average_swapped(spec.db_dmu, t[k], X[k], mu, y, u[k], U_src)
            + cloud_average_swapped(spec.dsigma_dmu, t[k], X[k], mu, y, u[k], V_src)
            + cost_lag[k]
        )

    def driver(k, U_now, V_now, U_lag, V_lag):
        out = bx[k] * U_now + sx[k] * V_now + lx[k]
        if k >= d:
            out = out + swapped(k - d, U_lag, V_lag)
        return out

    def terminal_integrand(k, U_now, V_now):
        return swapped(k, U_now, V_now)

    muN = laws[N]
    zeta = np.broadcast_to(np.asarray(spec.dg_dx(X[N], muN), dtype=float), (M,)).copy()
    if spec.dg_dmu is not ZERO_TERMINAL_LIONS:
        zeta += cloud_average_swapped(lambda _t, x, mu, y, _u: spec.dg_dmu(x, mu, y), 0.0, X[N], muN, X[N], 0.0, ones)
    return DriverAssembly(
        zeta=zeta,
        driver=driver,
        terminal_integrand=terminal_integrand,
        delta_steps=d,
        lipschitz=spec.lipschitz_C,
    )


def pairwise_assembly(
    theta: Callable,
    vartheta: Callable,
    zeta,
    delta_steps: int,
    lipschitz: float,
    phi: Callable | None = None,
    psi: Callable | None = None,
) -> DriverAssembly:
    """Assembly from the general product-space coefficients.

    ``theta(k, x1, x2, x3, x4)`` is evaluated with the particle's own values
    ``x1, x2`` of shape (M, 1) and the copy's lagged values ``x3, x4`` of shape
    (1, M); row i is omega, column j is omega-tilde. ``vartheta(k, x3, x4)``
    likewise. ``phi`` and ``psi`` map each row (the law over the copy) to a
    real and default to the row mean.
    """
    phi = phi or (lambda a: np.mean(a, axis=1))
    psi = psi or (lambda a: np.mean(a, axis=1))
    zeta = np.asarray(zeta, dtype=float)
    M = zeta.size

    def full(a):
        return np.broadcast_to(np.asarray(a, dtype=float), (M, M))

    def driver(k, U_now, V_now, U_lag, V_lag):
        return phi(full(theta(k, U_now[:, None], V_now[:, None], U_lag[None, :], V_lag[None, :])))

    def terminal_integrand(k, U_now, V_now):
        return psi(full(vartheta(k, U_now[None, :], V_now[None, :])))

    return DriverAssembly(zeta, driver, terminal_integrand, delta_steps, lipschitz)


def check_assembly(assembly: DriverAssembly, base: ParticleEnsemble, n_probes: int = 8, seed: int = 0) -> dict:
    """Sampled Lipschitz ratio of the driver and bound of vartheta at zero."""
    rng = np.random.default_rng(seed)
    N, M = base.dB.shape
    ratio = 0.0
    bound = 0.0
    for _ in range(n_probes):
        k = int(rng.integers(0, N))
        a = [rng.normal(size=M) for _ in range(4)]
        h = [rng.normal(size=M) * 1e-3 for _ in range(4)]
        d0 = assembly.driver(k, *a)
        d1 = assembly.driver(k, *(x + e for x, e in zip(a, h)))
        den = np.abs(h[0]) + np.abs(h[1]) + np.sqrt(np.mean(h[2] ** 2)) + np.sqrt(np.mean(h[3] ** 2))
        ratio = max(ratio, float(np.max(np.abs(d1 - d0) / den)))
        if assembly.delta_steps > 0:
            kt = int(rng.integers(max(N - assembly.delta_steps, 0), N))
            bound = max(bound, float(np.max(np.abs(assembly.terminal_integrand(kt, np.zeros(M), np.zeros(M))))))
    return {"driver_lipschitz": ratio, "vartheta_at_zero": bound, "declared_C": assembly.lipschitz}


# -- duality -----------------------------------------------------------------


@dataclass
class DualityReport:
    lhs: float
    rhs: float
    terms: dict

    @property
    def gap(self) -> float:
        return abs(self.lhs - self.rhs)

    @property
    def scale(self) -> float:
        return 1.0 + max(abs(self.lhs), abs(self.rhs))

    def as_dict(self) -> dict:
        return {"lhs": self.lhs, "rhs": self.rhs, "gap": self.gap, "scale": self.scale, "terms": self.terms}


def duality_check(
    spec: ProblemSpec,
    base: ParticleEnsemble,
    u_star: Control,
    u: Control,
    Y: np.ndarray,
    solution: AdjointSolution,
    assembly: DriverAssembly,
) -> DualityReport:
    """Compare E[p(T) Y(T)] with the term-by-term Ito expansion of d(pY).

    Terms: state-derivative part, swapped law part, minus the driver part,
    and the control-direction part, each a left sum over cells.
    """
    grid = base.grid
    N, M = base.dB.shape
    dt = grid.dt
    d = grid.delta_steps
    t = grid.times
    X = base.X
    us = u_star.values
    du = u.values - us
    laws = base.laws()
    p, q = solution.p, solution.q
    state = law = drv = ctrl = 0.0
    zeros = np.zeros(M)
    for k in range(N):
        a = grid.ahead(k)
        mu = laws[a]
        pn, qk, y = p[k + 1], q[k], Y[k]
        bx = spec.db_dx(t[k], X[k], mu, us[k])
        sx = spec.dsigma_dx(t[k], X[k], mu, us[k])
        bu = spec.db_du(t[k], X[k], mu, us[k])
        su = spec.dsigma_du(t[k], X[k], mu, us[k])
        state += dt * float(np.mean((bx * pn + sx * qk) * y))
        sw = cloud_average_swapped(spec.db_dmu, t[k], X[k], mu, X[a], us[k], pn) + cloud_average_swapped(
            spec.dsigma_dmu, t[k], X[k], mu, X[a], us[k], qk
        )
        law += dt * float(np.mean(sw * Y[a]))
        iu, iv = _lag_index(k, d)
        alpha = assembly.driver(k, pn, qk, p[iu], q[iv] if iv >= 0 else zeros)
        drv += dt * float(np.mean(alpha * y))
        ctrl += dt * float(np.mean((bu * pn + su * qk) * du[k]))
    lhs = float(np.mean(p[N] * Y[N]) - np.mean(p[0] * Y[0]))
    rhs = state + law - drv + ctrl
    return DualityReport(lhs, rhs, {"state": state, "law": law, "driver": drv, "control": ctrl})
