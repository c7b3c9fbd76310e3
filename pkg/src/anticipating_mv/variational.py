"""Variational (Gateaux derivative) process of the state with respect to the control.

Y solves the linearisation of the forward equation around ``(X*, u*)`` in the
direction ``u - u*``. Its law term reads the cloud at ``t + delta``, so the
solve is a Picard iteration over whole Y-paths, stopped with the forward
weighted norm.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import PicardDivergence
from .forward import FixedPointReport, ParticleEnsemble, _weighted_norm_tm, _check_finite, solve_forward
from .measure import EmpiricalMeasure, cloud_average
from .problems import Control, ProblemSpec


@dataclass(frozen=True)
class VariationalEnsemble:
    Y: np.ndarray  # (N + 1, M), time-major
    base: ParticleEnsemble
    direction: np.ndarray  # u - u*, per cell
    report: FixedPointReport

    @property
    def y_paths(self) -> np.ndarray:
        return self.Y.T

    def at(self, k: int) -> np.ndarray:
        return self.Y[min(k, self.base.grid.N)]


def _partials(spec: ProblemSpec, base: ParticleEnsemble, u_star: Control):
    grid = base.grid
    N, M = base.dB.shape
    t = grid.times
    out = {key: np.empty((N, M)) for key in ("bx", "sx", "bu", "su")}
    laws = [base.measure(grid.ahead(k)) for k in range(N)]
    for k in range(N):
        x, mu, uk = base.X[k], laws[k], u_star.values[k]
        out["bx"][k] = spec.db_dx(t[k], x, mu, uk)
        out["sx"][k] = spec.dsigma_dx(t[k], x, mu, uk)
        out["bu"][k] = spec.db_du(t[k], x, mu, uk)
        out["su"][k] = spec.dsigma_du(t[k], x, mu, uk)
    return out, laws


def solve_variational(
    spec: ProblemSpec,
    base: ParticleEnsemble,
    u_star: Control,
    u: Control,
    tol: float = 1e-8,
    max_iter: int = 200,
) -> VariationalEnsemble:
    grid = base.grid
    N, M = base.dB.shape
    dt = grid.dt
    t = grid.times
    du = u.values - u_star.values
    P, laws = _partials(spec, base, u_star)
    src_b = P["bu"] * du[:, None]
    src_s = P["su"] * du[:, None]
    beta = spec.forward_beta
    report = FixedPointReport(beta=beta)
    Yp = np.zeros((N + 1, M))
    for _ in range(max_iter):
        Y = np.zeros((N + 1, M))
        for k in range(N):
            ka = grid.ahead(k)
            xa, ya = base.X[ka], Yp[ka]
            lb = cloud_average(spec.db_dmu, t[k], base.X[k], laws[k], xa, u_star.values[k], ya)
            ls = cloud_average(spec.dsigma_dmu, t[k], base.X[k], laws[k], xa, u_star.values[k], ya)
            y = Y[k]
            Y[k + 1] = y + (P["bx"][k] * y + lb + src_b[k]) * dt + (P["sx"][k] * y + ls + src_s[k]) * base.dB[k]
        _check_finite(Y)
        report.record(_weighted_norm_tm(Y - Yp, beta, grid))
        Yp = Y
        if report.residuals[-1] <= tol:
            report.converged = report.strictly_decreasing()
            break
        if report.diverging():
            raise PicardDivergence("Picard divergence in the variational equation: check delta <= 1/(7C)")
    return VariationalEnsemble(Yp, base, du, report)


def _drift_free_regime(spec: ProblemSpec, rng_seed: int = 0, n: int = 16) -> bool:
    """True when b vanishes and sigma ignores the state on random probes."""
    rng = np.random.default_rng(rng_seed)
    for _ in range(n):
        t = rng.uniform(0, spec.T)
        x = rng.normal(0, 2, 4)
        mu = EmpiricalMeasure(rng.normal(0, 1, 8))
        u = rng.uniform(spec.control_lo, spec.control_hi)
        if np.any(np.asarray(spec.b(t, x, mu, u)) != 0) or np.any(np.asarray(spec.dsigma_dx(t, x, mu, u)) != 0):
            return False
    return True


@dataclass
class DifferenceQuotientReport:
    thetas: np.ndarray
    errors: np.ndarray
    regime: str

    def monotone(self) -> bool:
        return bool(np.all(np.diff(self.errors) < 0))

    def as_dict(self) -> dict:
        return {"thetas": self.thetas.tolist(), "errors": self.errors.tolist(), "regime": self.regime}


def difference_quotient_check(
    spec: ProblemSpec,
    u_star: Control,
    u: Control,
    theta_sequence,
    M: int,
    seed: int,
    tol: float = 1e-12,
    max_iter: int = 500,
) -> DifferenceQuotientReport:
    """Mean squared sup-distance between Y and (X^theta - X*)/theta for each theta.

    The forward solves share the noise of the base run. Problems outside the
    simplified setting (b = 0, sigma independent of the state) are labelled
    ``"conjectured extension"``.
    """
    thetas = np.asarray(theta_sequence, dtype=float)
    if np.any(thetas <= 0) or np.any(thetas > 1):
        raise ValueError("theta values must lie in (0, 1]")
    base, _ = solve_forward(spec, u_star, M, seed, tol=tol, max_iter=max_iter)
    var = solve_variational(spec, base, u_star, u, tol=tol, max_iter=max_iter)
    errors = []
    for th in thetas:
        Xth, _ = solve_forward(spec, u_star.blend(u, th), M, seed, tol=tol, max_iter=max_iter)
        zeta = (Xth.X - base.X) / th
        errors.append(float(np.mean(np.max(np.abs(var.Y - zeta), axis=0) ** 2)))
    regime = "drift-free case" if _drift_free_regime(spec) else "conjectured extension"
    return DifferenceQuotientReport(thetas, np.array(errors), regime)
