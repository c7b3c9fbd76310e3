"""Particle simulation of the anticipating McKean-Vlasov SDE.

The solution is the pathwise fixed point of the Picard map

    V(t) = x0 + int_0^t b(s, U(s), law U(s+delta), u(s)) ds
              + int_0^t sigma(s, U(s), law U(s+delta), u(s)) dB(s),

discretised by Euler-Maruyama on a uniform grid, with the law of the
future value read from the previous iterate's particle cloud and the path
frozen at X(T) beyond the horizon. Noise is drawn once per seed and reused
across iterations (common random numbers).

Arrays are stored time-major, ``(N + 1, M)``; the public ``paths`` and
``brownian_increments`` properties expose the particle-major views.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .exceptions import GridError, MaxIterationsReached, NonFiniteError, PicardDivergence
from .measure import EmpiricalMeasure
from .problems import Control, ProblemSpec, TimeGrid

log = logging.getLogger(__name__)

# particles per work block; fixed so results do not depend on the worker count
BLOCK = 2048


@lru_cache(maxsize=16)
def _standard_normals(seed: int, M: int, N: int) -> np.ndarray:
    out = np.empty((N, M))
    for i in range(M):
        ss = np.random.SeedSequence(seed, spawn_key=(i,))
        out[:, i] = np.random.Generator(np.random.PCG64(ss)).standard_normal(N)
    out.setflags(write=False)
    return out


def brownian_increments(seed: int, M: int, grid: TimeGrid) -> np.ndarray:
    """Time-major ``(N, M)`` Brownian increments.

    Particle ``i`` draws from ``PCG64(SeedSequence(seed, spawn_key=(i,)))``, so
    a particle's noise depends only on ``(seed, i, N)`` and never on ``M``.
    """
    dB = np.sqrt(grid.dt) * _standard_normals(int(seed), int(M), grid.N)
    dB.setflags(write=False)
    return dB


@dataclass(frozen=True)
class ParticleEnsemble:
    X: np.ndarray  # (N + 1, M)
    dB: np.ndarray  # (N, M)
    grid: TimeGrid
    seed: int

    @property
    def paths(self) -> np.ndarray:
        return self.X.T

    @property
    def brownian_increments(self) -> np.ndarray:
        return self.dB.T

    @property
    def M(self) -> int:
        return self.X.shape[1]

    @property
    def brownian_paths(self) -> np.ndarray:
        B = np.zeros_like(self.X)
        np.cumsum(self.dB, axis=0, out=B[1:])
        return B

    def at(self, k: int) -> np.ndarray:
        """Particle states at t_k, with X(t) = X(T) for t >= T."""
        return self.X[min(k, self.grid.N)]

    def measure(self, k: int) -> EmpiricalMeasure:
        return EmpiricalMeasure._trusted(self.at(k))

    def laws(self) -> list[EmpiricalMeasure]:
        return [EmpiricalMeasure._trusted(self.X[k]) for k in range(self.grid.N + 1)]

    def check_increments(self, n_sigma: float = 5.0) -> bool:
        """Sanity bound on the empirical mean and per-step variance of the noise."""
        N, M = self.dB.shape
        dt = self.grid.dt
        mean_ok = abs(float(np.mean(self.dB))) <= n_sigma * np.sqrt(dt / (M * N))
        if M < 2:
            return mean_ok
        var = np.var(self.dB, axis=1, ddof=1) / dt
        return mean_ok and bool(np.all(np.abs(var - 1.0) <= n_sigma * np.sqrt(2.0 / (M - 1))))


@dataclass
class FixedPointReport:
    iterations: int = 0
    residuals: list[float] = field(default_factory=list)
    beta: float = 0.0
    converged: bool = False
    contraction_estimates: list[float] = field(default_factory=list)

    def record(self, r: float) -> None:
        if self.residuals and self.residuals[-1] > 0:
            self.contraction_estimates.append(r / self.residuals[-1])
        self.residuals.append(float(r))
        self.iterations = len(self.residuals)

    def diverging(self, run: int = 3) -> bool:
        r = self.residuals
        return len(r) > run and all(r[-i] > r[-i - 1] for i in range(1, run + 1))

    def strictly_decreasing(self) -> bool:
        r = self.residuals
        return all(b < a for a, b in zip(r, r[1:]))

    def as_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "residuals": list(self.residuals),
            "beta": self.beta,
            "converged": self.converged,
            "contraction_estimates": list(self.contraction_estimates),
        }


def trapezoid_weights(grid: TimeGrid) -> np.ndarray:
    w = np.full(grid.N + 1, grid.dt)
    w[0] = w[-1] = 0.5 * grid.dt
    return w


def _weighted_norm_tm(D: np.ndarray, beta: float, grid: TimeGrid) -> float:
    msq = np.mean(D * D, axis=1)
    t = grid.times
    total = np.exp(-beta * grid.T) * msq[-1]
    total += (6.0 / 7.0) * beta * float(np.sum(trapezoid_weights(grid) * np.exp(-beta * t) * msq))
    if not np.isfinite(total):
        raise NonFiniteError("non-finite weighted norm")
    return float(np.sqrt(total))


def weighted_norm(diff, beta: float, T: float) -> float:
    """Discrete ``||U||_{-beta}``: terminal atom plus trapezoid rule in time.

    ``diff`` is particle-major, shape ``(M, N + 1)``, on a uniform grid over [0, T].
    """
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    D = np.asarray(diff, dtype=float)
    if D.ndim == 1:
        D = D[None, :]
    grid = TimeGrid(T, D.shape[1] - 1)
    return _weighted_norm_tm(D.T, beta, grid)


def _check_finite(V: np.ndarray) -> None:
    if not np.all(np.isfinite(V)):
        k, i = np.argwhere(~np.isfinite(V))[0]
        raise NonFiniteError(f"non-finite state at particle {i}, step {k}")


def _run_blocks(fn, M: int, threads: int) -> None:
    blocks = [slice(s, min(s + BLOCK, M)) for s in range(0, M, BLOCK)]
    if threads <= 1 or len(blocks) == 1:
        for blk in blocks:
            fn(blk)
        return
    with ThreadPoolExecutor(max_workers=threads) as ex:
        list(ex.map(fn, blocks))


def picard_map(
    U: np.ndarray,
    dB: np.ndarray,
    spec: ProblemSpec,
    control: Control,
    mode: str = "full",
    threads: int = 1,
) -> np.ndarray:
    """One application of the Picard map on time-major arrays."""
    grid = control.grid
    N, M = dB.shape
    dt = grid.dt
    t = grid.times
    u = control.values
    laws = [EmpiricalMeasure._trusted(U[k]) for k in range(N + 1)]
    V = np.empty_like(U)

    if mode == "full":

        def work(blk):
            inc = np.empty((N + 1, blk.stop - blk.start))
            inc[0] = spec.x0
            for k in range(N):
                mu = laws[grid.ahead(k)]
                x = U[k, blk]
                inc[k + 1] = spec.b(t[k], x, mu, u[k]) * dt + spec.sigma(t[k], x, mu, u[k]) * dB[k, blk]
            np.cumsum(inc, axis=0, out=inc)
            V[:, blk] = inc

    elif mode == "law-only":

        def work(blk):
            x = np.full(blk.stop - blk.start, float(spec.x0))
            V[0, blk] = x
            for k in range(N):
                mu = laws[grid.ahead(k)]
                x = x + spec.b(t[k], x, mu, u[k]) * dt + spec.sigma(t[k], x, mu, u[k]) * dB[k, blk]
                V[k + 1, blk] = x

    else:
        raise ValueError(f"unknown picard mode {mode!r}; expected 'full' or 'law-only'")

    _run_blocks(work, M, threads)
    _check_finite(V)
    return V


def picard_step(
    prev: ParticleEnsemble,
    spec: ProblemSpec,
    control: Control,
    mode: str = "full",
    threads: int = 1,
) -> ParticleEnsemble:
    if prev.grid != control.grid:
        raise GridError("ensemble and control live on different grids")
    V = picard_map(prev.X, prev.dB, spec, control, mode, threads)
    return ParticleEnsemble(V, prev.dB, prev.grid, prev.seed)


def _check_grid(spec: ProblemSpec, grid: TimeGrid) -> None:
    if abs(grid.T - spec.T) > 1e-12 * spec.T or abs(grid.delta - spec.delta) > 1e-12 * max(1.0, spec.delta):
        raise GridError("control grid does not match the problem horizon/lag")


def solve_forward(
    spec: ProblemSpec,
    control: Control,
    M: int,
    seed: int,
    tol: float = 1e-8,
    max_iter: int = 200,
    mode: str = "full",
    threads: int = 1,
    raise_on_max_iter: bool = False,
    initial: np.ndarray | None = None,
) -> tuple[ParticleEnsemble, FixedPointReport]:
    """Iterate the Picard map to its fixed point.

    The iteration starts from the constant path x0, or from ``initial``
    (shape (N+1, M)) when warm-starting near a known solution.
    """
    if M < 2:
        raise ValueError("need at least two particles")
    if tol <= 0:
        raise ValueError("tol must be positive")
    grid = control.grid
    _check_grid(spec, grid)
    spec.check_delta()
    dB = brownian_increments(seed, M, grid)
    beta = spec.forward_beta
    report = FixedPointReport(beta=beta)
    if initial is None:
        U = np.full((grid.N + 1, M), float(spec.x0))
    else:
        U = np.array(initial, dtype=float)
        if U.shape != (grid.N + 1, M):
            raise ValueError(f"initial paths must have shape {(grid.N + 1, M)}, got {U.shape}")
    for _ in range(max_iter):
        V = picard_map(U, dB, spec, control, mode, threads)
        report.record(_weighted_norm_tm(V - U, beta, grid))
        U = V
        if report.residuals[-1] <= tol:
            report.converged = report.strictly_decreasing()
            break
        if report.diverging():
            raise PicardDivergence(
                "Picard divergence: check delta <= 1/(7C) "
                f"(delta={spec.delta:g}, 1/(7C)={spec.delta0:g})"
            )
    else:
        log.warning("Picard iteration stopped at max_iter=%d, residual %.3e", max_iter, report.residuals[-1])
        if raise_on_max_iter:
            raise MaxIterationsReached(f"Picard iteration did not reach tol={tol:g} in {max_iter} iterations")
    return ParticleEnsemble(U, dB, grid, int(seed)), report


def contraction_ratio(
    spec: ProblemSpec, control: Control, U1: np.ndarray, U2: np.ndarray, dB: np.ndarray
) -> float | None:
    """``||Phi(U1) - Phi(U2)|| / ||U1 - U2||`` in the forward weighted norm, or None."""
    grid = control.grid
    beta = spec.forward_beta
    den = _weighted_norm_tm(U1 - U2, beta, grid)
    if den == 0.0:
        return None
    V1 = picard_map(U1, dB, spec, control)
    V2 = picard_map(U2, dB, spec, control)
    return _weighted_norm_tm(V1 - V2, beta, grid) / den


def random_paths(rng: np.random.Generator, grid: TimeGrid, M: int, x0: float) -> np.ndarray:
    """Random time-major test paths: offset, trend, oscillation and a rough part."""
    t = grid.times[:, None]
    T = grid.T
    off = rng.normal(0.0, 1.0, M)
    trend = rng.normal(0.0, 1.0, M)
    amp = rng.normal(0.0, 1.0, M)
    freq = rng.uniform(0.5, 4.0, M)
    walk = np.vstack([np.zeros(M), np.cumsum(rng.normal(0.0, np.sqrt(grid.dt), (grid.N, M)), axis=0)])
    shift = rng.normal()
    return x0 + shift + off + trend * t / T + amp * np.sin(2 * np.pi * freq * t / T) + walk


def contraction_probe(
    spec: ProblemSpec, control: Control, M: int, seed: int, n_pairs: int
) -> np.ndarray:
    """Measured contraction ratios of the Picard map over random ensemble pairs."""
    if spec.delta > spec.delta0 * (1 + 1e-12):
        raise ValueError(f"contraction probe needs delta <= 1/(7C) = {spec.delta0:g}")
    grid = control.grid
    _check_grid(spec, grid)
    dB = brownian_increments(seed, M, grid)
    rng = np.random.default_rng([int(seed), 7])
    out = []
    for _ in range(n_pairs):
        U1 = random_paths(rng, grid, M, spec.x0)
        U2 = random_paths(rng, grid, M, spec.x0)
        r = contraction_ratio(spec, control, U1, U2, dB)
        if r is not None:
            out.append(r)
    return np.array(out)
