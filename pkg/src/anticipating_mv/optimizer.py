"""Hamiltonian, cost evaluation and projected-gradient optimisation of open-loop controls.

The per-cell gradient is the cloud average of the control derivative of the
Hamiltonian, evaluated with the costate pairing of the adjoint module
(p at the right end of the cell, q on the cell). With common random numbers
this is the exact derivative of the discrete cost estimate up to solver
tolerances, which is what makes the Armijo search and the KKT certificate
consistent with each other.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .adjoint import AdjointSolution, assemble_control_adjoint, solve_adjoint
from .forward import ParticleEnsemble, solve_forward
from .problems import Control, ProblemSpec

log = logging.getLogger(__name__)


def hamiltonian(spec: ProblemSpec, t, x, mu, u, p, q):
    """``l + b p + sigma q``."""
    return spec.l(t, x, mu, u) + spec.b(t, x, mu, u) * p + spec.sigma(t, x, mu, u) * q


def hamiltonian_u_gradient(spec: ProblemSpec, t, x, mu, u, p, q):
    """``dl/du + (db/du) p + (dsigma/du) q``."""
    return spec.dl_du(t, x, mu, u) + spec.db_du(t, x, mu, u) * p + spec.dsigma_du(t, x, mu, u) * q


def cost_samples(spec: ProblemSpec, ens: ParticleEnsemble, control: Control) -> np.ndarray:
    """Per-particle cost ``g(X_N, mu_N) + sum_k l(t_k, X_k, mu_{k+d}, u_k) dt``."""
    grid = ens.grid
    N, M = ens.dB.shape
    t = grid.times
    laws = ens.laws()
    run = np.zeros(M)
    for k in range(N):
        run = run + np.broadcast_to(
            np.asarray(spec.l(t[k], ens.X[k], laws[grid.ahead(k)], control.values[k]), dtype=float), (M,)
        )
    term = np.broadcast_to(np.asarray(spec.g(ens.X[N], laws[N]), dtype=float), (M,))
    return term + run * grid.dt


def _estimate(samples: np.ndarray) -> tuple[float, float]:
    M = samples.size
    return float(np.mean(samples)), float(np.std(samples, ddof=1) / math.sqrt(M)) if M > 1 else 0.0


def evaluate_cost(
    spec: ProblemSpec,
    control: Control,
    M: int,
    seed: int,
    tol: float = 1e-8,
    threads: int = 1,
    mode: str = "full",
) -> tuple[float, float]:
    """Cloud estimate of J(u) and its Monte-Carlo standard error."""
    if not control.admissible(spec):
        raise ValueError("control is not admissible")
    ens, _ = solve_forward(spec, control, M, seed, tol=tol, threads=threads, mode=mode)
    return _estimate(cost_samples(spec, ens, control))


def control_gradient(
    spec: ProblemSpec, ens: ParticleEnsemble, control: Control, sol: AdjointSolution
) -> np.ndarray:
    """Per-cell ``mean_i dH/du`` with p taken at the right end of each cell."""
    grid = ens.grid
    t = grid.times
    laws = ens.laws()
    out = np.empty(grid.N)
    for k in range(grid.N):
        gk = hamiltonian_u_gradient(
            spec, t[k], ens.X[k], laws[grid.ahead(k)], control.values[k], sol.p[k + 1], sol.q[k]
        )
        out[k] = float(np.mean(np.broadcast_to(np.asarray(gk, dtype=float), (ens.M,))))
    return out


def kkt_flags(grad: np.ndarray, values: np.ndarray, lo: float, hi: float, tol: float):
    """Per-cell violation flags of the first-order box conditions."""
    span = hi - lo
    eps = 1e-12 * max(1.0, span)
    at_lo = values <= lo + eps
    at_hi = values >= hi - eps
    interior = ~(at_lo | at_hi)
    viol = np.zeros(grad.shape, dtype=bool)
    viol[interior] = np.abs(grad[interior]) > tol
    viol[at_lo] |= grad[at_lo] < -tol
    viol[at_hi] |= grad[at_hi] > tol
    return viol, interior, at_lo, at_hi


@dataclass
class OptimalityReport:
    gradient: np.ndarray
    violations: np.ndarray
    interior: np.ndarray
    boundary_ok: np.ndarray
    grad_tol: float
    scale: float
    stalled: bool = False
    iterations: int = 0

    @property
    def max_interior_gradient(self) -> float:
        g = np.abs(self.gradient[self.interior])
        return float(g.max()) if g.size else 0.0

    @property
    def violated_cells(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.violations)]

    def passed(self) -> bool:
        return not bool(np.any(self.violations))

    def as_dict(self) -> dict:
        return {
            "passed": self.passed(),
            "stalled": self.stalled,
            "iterations": self.iterations,
            "grad_tol": self.grad_tol,
            "scale": self.scale,
            "max_interior_gradient": self.max_interior_gradient,
            "violated_cells": self.violated_cells,
            "gradient": self.gradient.tolist(),
            "boundary_ok": self.boundary_ok.tolist(),
        }


def optimality_report(spec: ProblemSpec, control: Control, grad: np.ndarray, tol: float, scale: float) -> OptimalityReport:
    viol, interior, at_lo, at_hi = kkt_flags(grad, control.values, spec.control_lo, spec.control_hi, tol)
    boundary_ok = ~(viol & ~interior)
    return OptimalityReport(grad, viol, interior, boundary_ok, tol, scale)


@dataclass(frozen=True)
class StepRule:
    """Backtracking Armijo rule on the common-noise cost estimate."""

    initial: float = 1.0
    c: float = 1e-4
    factor: float = 0.5
    max_halvings: int = 30


@dataclass
class TraceRow:
    iteration: int
    J: float
    SE: float
    max_grad: float
    step_size: float


@dataclass
class OptimizationResult:
    control: Control
    report: OptimalityReport
    trace: list[TraceRow] = field(default_factory=list)

    @property
    def J_trace(self) -> list[float]:
        return [r.J for r in self.trace]


def _adjoint_gradient(spec, ens, control, bsde_tol, basis_degree):
    asm = assemble_control_adjoint(spec, ens, control)
    sol = solve_adjoint(asm, ens, tol=bsde_tol, basis_degree=basis_degree)
    return control_gradient(spec, ens, control, sol)


def optimize(
    spec: ProblemSpec,
    u_init: Control,
    M: int,
    seed: int,
    step_rule: StepRule | None = None,
    grad_tol: float = 1e-3,
    max_outer: int = 50,
    picard_tol: float = 1e-10,
    bsde_tol: float = 1e-8,
    basis_degree: int = 2,
    threads: int = 1,
    mode: str = "full",
) -> OptimizationResult:
    """Projected gradient descent with Armijo backtracking.

    ``grad_tol`` is relative: the KKT test uses ``grad_tol * (1 + |J(u_init)|)``.
    Stops when the KKT report passes, after ``max_outer`` updates, or when
    the line search fails after ``step_rule.max_halvings`` halvings.
    """
    rule = step_rule or StepRule()
    if not u_init.admissible(spec):
        raise ValueError("initial control is not admissible")
    grid = u_init.grid
    dt = grid.dt
    lo, hi = spec.control_lo, spec.control_hi

    def forward(u):
        ens, _ = solve_forward(spec, u, M, seed, tol=picard_tol, threads=threads, mode=mode)
        return ens, _estimate(cost_samples(spec, ens, u))

    u = u_init
    ens, (J, se) = forward(u)
    scale = 1.0 + abs(J)
    tol = grad_tol * scale
    trace: list[TraceRow] = []
    step = rule.initial
    stalled = False
    it = 0
    while True:
        grad = _adjoint_gradient(spec, ens, u, bsde_tol, basis_degree)
        report = optimality_report(spec, u, grad, tol, scale)
        trace.append(TraceRow(it, J, se, float(np.max(np.abs(grad))), step if it else 0.0))
        log.info("iter %d J=%.10g max|g|=%.3e", it, J, trace[-1].max_grad)
        if report.passed() or it >= max_outer:
            break
        # try a larger step first after an accepted one, as the rule allows growth back to ``initial``
        step = min(rule.initial, step / rule.factor) if it else rule.initial
        for _ in range(rule.max_halvings + 1):
            cand = Control(np.clip(u.values - step * grad, lo, hi), grid)
            decrease = rule.c * dt * float(np.dot(grad, cand.values - u.values))
            ens_c, (Jc, sec) = forward(cand)
            if Jc <= J + decrease:
                break
            step *= rule.factor
        else:
            stalled = True
            break
        u, ens, J, se = cand, ens_c, Jc, sec
        it += 1
    report.stalled = stalled
    report.iterations = it
    return OptimizationResult(u, report, trace)


@dataclass
class GateauxReport:
    thetas: np.ndarray
    finite_differences: np.ndarray
    directional_derivative: float
    scale: float
    M: int

    @property
    def gaps(self) -> np.ndarray:
        return np.abs(self.finite_differences - self.directional_derivative)

    def slope(self) -> float:
        """K fitted at the largest theta: gap_0 = K theta_0 + noise floor."""
        floor = 5.0 / math.sqrt(self.M) * self.scale
        return float(max(self.gaps[0] - floor, 0.0) / self.thetas[0])

    def ratio_test(self, slack: float = 0.15) -> bool:
        """Halving theta at least roughly halves the gap; only gaps at rounding level are exempt."""
        floor = 1e-12 * self.scale
        g = self.gaps
        th = self.thetas
        for i in range(len(g) - 1):
            if g[i + 1] <= floor:
                continue
            if g[i + 1] > (th[i + 1] / th[i] + slack) * g[i]:
                return False
        return True

    def intercept(self) -> float:
        """Richardson extrapolation of the signed gap to theta = 0 from the two smallest thetas."""
        if len(self.thetas) < 2:
            return float(self.finite_differences[-1] - self.directional_derivative)
        t1, t2 = self.thetas[-2], self.thetas[-1]
        f1, f2 = self.finite_differences[-2], self.finite_differences[-1]
        return float((t1 * f2 - t2 * f1) / (t1 - t2) - self.directional_derivative)

    def as_dict(self) -> dict:
        return {
            "thetas": self.thetas.tolist(),
            "finite_differences": self.finite_differences.tolist(),
            "directional_derivative": self.directional_derivative,
            "gaps": self.gaps.tolist(),
            "scale": self.scale,
            "ratio_test": self.ratio_test(),
            "intercept": self.intercept(),
        }


def gateaux_gradient_check(
    spec: ProblemSpec,
    u_star: Control,
    u: Control,
    M: int,
    seed: int,
    theta_seq=(0.2, 0.1, 0.05),
    picard_tol: float = 1e-12,
    bsde_tol: float = 1e-10,
    basis_degree: int = 2,
) -> GateauxReport:
    """Finite differences of J along ``u - u_star`` against ``E int dH/du (u - u_star) dt``."""
    thetas = np.asarray(theta_seq, dtype=float)
    ens, _ = solve_forward(spec, u_star, M, seed, tol=picard_tol, max_iter=500)
    J0 = float(np.mean(cost_samples(spec, ens, u_star)))
    grad = _adjoint_gradient(spec, ens, u_star, bsde_tol, basis_degree)
    dd = float(u_star.grid.dt * np.dot(grad, u.values - u_star.values))
    fds = []
    for th in thetas:
        ut = u_star.blend(u, th)
        e, _ = solve_forward(spec, ut, M, seed, tol=picard_tol, max_iter=500)
        fds.append((float(np.mean(cost_samples(spec, e, ut))) - J0) / th)
    return GateauxReport(thetas, np.array(fds), dd, 1.0 + abs(J0), M)
