"""Verification probes: each suite returns a JSON-ready dict with a ``passed`` flag."""

from __future__ import annotations

import itertools
import math

import numpy as np

from .adjoint import assemble_control_adjoint, bsde_delta0, duality_check, solve_adjoint, terminal_residual
from .config import RunConfig
from .forward import contraction_probe, solve_forward
from .measure import EmpiricalMeasure, StatisticFunctional, lifted_directional_derivative_check, wasserstein2
from .optimizer import gateaux_gradient_check, hamiltonian, hamiltonian_u_gradient
from .problems import Control, TimeGrid
from .variational import difference_quotient_check, solve_variational

FORWARD_BOUND = math.sqrt(2.0 / 3.0)
BSDE_BOUND = 1.0 / math.sqrt(2.0)


def brute_force_w2(x, y) -> float:
    """Minimum over all permutation couplings; x is sorted first, which leaves the coupling set unchanged."""
    x = np.sort(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float)
    best = min(float(np.mean((x - y[list(perm)]) ** 2)) for perm in itertools.permutations(range(y.size)))
    return math.sqrt(best)


def _base_control(cfg: RunConfig, spec, grid) -> Control:
    return Control.constant(grid, float(cfg.optimize.get("u_init", 0.0)), spec)


def _direction(cfg: RunConfig, spec, grid, u_star: Control) -> Control:
    amp = float(cfg.verify.get("direction_amplitude", 0.5))
    t = grid.times[:-1]
    return Control.clamped(u_star.values + amp * np.sin(2 * np.pi * t / grid.T) + amp, grid, spec)


def ratio_test(errors, factor: float, slack: float = 1.5, floor: float = 0.0) -> bool:
    """Each error is at most ``factor * slack`` times its predecessor, unless below ``floor``."""
    e = np.asarray(errors)
    return all(b <= floor or b <= factor * slack * a for a, b in zip(e, e[1:]))


_FAMILIES = {
    "mean": StatisticFunctional(lambda x: x, lambda x: np.ones_like(x), lambda m: m, lambda m: 1.0),
    "second-moment": StatisticFunctional(lambda x: x * x, lambda x: 2 * x, lambda m: m, lambda m: 1.0),
    "exp-of-sin": StatisticFunctional(np.sin, np.cos, np.exp, np.exp),
}


def suite_wasserstein(cfg: RunConfig) -> dict:
    rng = np.random.default_rng([cfg.seed, 101])
    brute_max = 0.0
    for _ in range(100):
        M = int(rng.integers(1, 7))
        x, y = rng.normal(size=M), rng.normal(size=M)
        brute_max = max(brute_max, abs(wasserstein2(x, y) - brute_force_w2(x, y)))
    axiom_max = 0.0
    for _ in range(100):
        M = int(rng.integers(2, 64))
        a, b, c = (EmpiricalMeasure(rng.normal(rng.normal(), rng.uniform(0.1, 3), M)) for _ in range(3))
        axiom_max = max(
            axiom_max,
            wasserstein2(a, a),
            abs(wasserstein2(a, b) - wasserstein2(b, a)),
            wasserstein2(a, c) - wasserstein2(a, b) - wasserstein2(b, c),
        )
    lifted = {}
    epss = [1e-2, 5e-3, 2.5e-3, 1.25e-3]
    for name, phi in _FAMILIES.items():
        zeta, eta = rng.normal(size=32), rng.normal(size=32)
        errs = []
        for eps in epss:
            fd, an = lifted_directional_derivative_check(phi, zeta, eta, eps)
            errs.append(abs(fd - an))
        lifted[name] = {"eps": epss, "errors": errs, "ratio_test": ratio_test(errs, 0.5, floor=1e-9)}
    passed = brute_max == 0.0 and axiom_max <= 1e-12 and all(v["ratio_test"] for v in lifted.values())
    return {
        "suite": "wasserstein",
        "passed": passed,
        "brute_force_max_abs_diff": brute_max,
        "metric_axiom_max_violation": axiom_max,
        "metric_axiom_bound": 1e-12,
        "lifted_checks": lifted,
    }


def suite_contraction_forward(cfg: RunConfig, n_pairs: int | None = None, slack: float = 0.05) -> dict:
    spec = cfg.spec()
    n_pairs = int(n_pairs or cfg.verify.get("n_pairs", 20))
    out = {"suite": "contraction-forward", "bound": FORWARD_BOUND + slack, "delta": spec.delta, "delta0": spec.delta0}
    if spec.delta > spec.delta0 * (1 + 1e-12):
        out.update(passed=False, error="delta exceeds 1/(7C); the contraction bound does not apply")
        return out
    M = min(cfg.particles, int(cfg.verify.get("probe_particles", 1000)))
    levels = {}
    for factor in (1, 4):
        grid = TimeGrid(spec.T, cfg.N * factor, spec.delta)
        r = contraction_probe(spec, _base_control(cfg, spec, grid), M, cfg.seed, n_pairs)
        levels[grid.N] = {"max_ratio": float(r.max()), "ratios": r.tolist(), "excess": float(r.max() - FORWARD_BOUND)}
    coarse, fine = (levels[cfg.N], levels[4 * cfg.N])
    out.update(
        passed=all(v["max_ratio"] <= FORWARD_BOUND + slack for v in levels.values()),
        levels={str(k): v for k, v in levels.items()},
        slack_shrinks=fine["excess"] <= max(coarse["excess"], 0.0) + 1e-3,
    )
    return out


def suite_contraction_bsde(cfg: RunConfig, slack: float = 0.1) -> dict:
    spec = cfg.spec()
    grid = cfg.grid()
    u = _base_control(cfg, spec, grid)
    ens, _ = solve_forward(spec, u, cfg.particles, cfg.seed, tol=cfg.picard_tol, mode=cfg.picard_mode, threads=cfg.threads)
    asm = assemble_control_adjoint(spec, ens, u)
    sol = solve_adjoint(asm, ens, tol=cfg.bsde_tol, basis_degree=cfg.basis_degree)
    ratios = np.asarray(sol.report.contraction_estimates)
    res = terminal_residual(sol, asm, ens)
    d0 = bsde_delta0(spec.lipschitz_C)
    return {
        "suite": "contraction-bsde",
        "passed": bool(spec.delta <= d0 and sol.report.converged and ratios.max() <= BSDE_BOUND + slack
                       and res <= 10 * cfg.bsde_tol),
        "delta": spec.delta,
        "delta0": d0,
        "beta": asm.beta,
        "ratios": ratios.tolist(),
        "max_ratio": float(ratios.max()),
        "bound": BSDE_BOUND + slack,
        "terminal_residual": res,
        "terminal_bound": 10 * cfg.bsde_tol,
        "report": sol.report.as_dict(),
    }


def suite_lemma_diffquot(cfg: RunConfig) -> dict:
    spec = cfg.spec()
    grid = cfg.grid()
    us = _base_control(cfg, spec, grid)
    u = _direction(cfg, spec, grid, us)
    thetas = cfg.verify.get("thetas", [0.5, 0.25, 0.125, 0.0625])
    rep = difference_quotient_check(spec, us, u, thetas, cfg.particles, cfg.seed)
    e = rep.errors
    affine = bool(np.all(e <= 1e-10))
    ratio = float(e[-1] / e[0]) if e[0] > 0 else 0.0
    return {
        "suite": "lemma-diffquot",
        "passed": affine or (rep.monotone() and ratio <= 0.1),
        "affine_floor": affine,
        "final_over_initial": ratio,
        **rep.as_dict(),
    }


def suite_duality(cfg: RunConfig) -> dict:
    spec = cfg.spec()
    grid = cfg.grid()
    us = _base_control(cfg, spec, grid)
    u = _direction(cfg, spec, grid, us)
    ens, _ = solve_forward(spec, us, cfg.particles, cfg.seed, tol=cfg.picard_tol, mode=cfg.picard_mode, threads=cfg.threads)
    asm = assemble_control_adjoint(spec, ens, us)
    sol = solve_adjoint(asm, ens, tol=cfg.bsde_tol, basis_degree=cfg.basis_degree)
    Y = solve_variational(spec, ens, us, u, tol=cfg.picard_tol)
    rep = duality_check(spec, ens, us, u, Y.Y, sol, asm)
    bound = 5.0 / math.sqrt(cfg.particles) * rep.scale
    return {"suite": "duality", "passed": rep.gap <= bound, "bound": bound, **rep.as_dict()}


def hamiltonian_probe(spec, n_probes: int = 100, seed: int = 0, eps: float = 1e-3) -> dict:
    """Central differences of H in u against the analytic gradient at random points."""
    rng = np.random.default_rng([seed, 202])
    errs = np.empty((n_probes, 2))
    for n in range(n_probes):
        t = rng.uniform(0, spec.T)
        x = rng.normal(0, 2)
        mu = EmpiricalMeasure(rng.normal(rng.normal(), 1.0, 16))
        u = rng.uniform(spec.control_lo, spec.control_hi)
        p, q = rng.normal(size=2)
        an = float(hamiltonian_u_gradient(spec, t, x, mu, u, p, q))
        for j, h in enumerate((eps, eps / 2)):
            fd = (hamiltonian(spec, t, x, mu, u + h, p, q) - hamiltonian(spec, t, x, mu, u - h, p, q)) / (2 * h)
            errs[n, j] = abs(float(fd) - an)
    floor = 1e-8
    ok = bool(np.all((errs[:, 1] <= 0.25 * 1.5 * errs[:, 0]) | (errs[:, 1] <= floor)))
    return {"eps": [eps, eps / 2], "max_errors": errs.max(axis=0).tolist(), "order2": ok, "floor": floor}


def suite_gradient(cfg: RunConfig) -> dict:
    spec = cfg.spec()
    grid = cfg.grid()
    us = _base_control(cfg, spec, grid)
    u = _direction(cfg, spec, grid, us)
    thetas = cfg.verify.get("gradient_thetas", [0.2, 0.1, 0.05])
    rep = gateaux_gradient_check(spec, us, u, cfg.particles, cfg.seed, thetas, basis_degree=cfg.basis_degree)
    K = rep.slope()
    floor = 5.0 / math.sqrt(rep.M) * rep.scale
    hp = hamiltonian_probe(spec, seed=cfg.seed)
    gaps_ok = bool(np.all(rep.gaps <= 1.15 * K * rep.thetas + floor))
    return {
        "suite": "gradient",
        "passed": gaps_ok and rep.ratio_test() and abs(rep.intercept()) <= floor and hp["order2"],
        "K": K,
        "noise_floor": floor,
        "hamiltonian_probe": hp,
        **rep.as_dict(),
    }


SUITES = {
    "contraction-forward": suite_contraction_forward,
    "contraction-bsde": suite_contraction_bsde,
    "lemma-diffquot": suite_lemma_diffquot,
    "duality": suite_duality,
    "gradient": suite_gradient,
    "wasserstein": suite_wasserstein,
}
