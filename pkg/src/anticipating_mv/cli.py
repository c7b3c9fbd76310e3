"""Command-line entry point: ``amv simulate|optimize|verify --config FILE``.

Exit codes: 0 success, 1 configuration error, 2 solver divergence,
3 optimizer stall, 4 optimizer finished without a passing KKT report or a
verification bound failed.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import export
from .config import RunConfig, load
from .exceptions import ConfigError, PicardDivergence
from .forward import solve_forward
from .measure import wasserstein2
from .optimizer import StepRule, optimize
from .problems import Control
from .verify import SUITES

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_STALL, EXIT_FAILED = 0, 1, 2, 3, 4
OUTPUT_ENV = "AMV_OUTPUT_DIR"

log = logging.getLogger("anticipating_mv")


def _out_dir(args) -> Path:
    d = Path(args.out or os.environ.get(OUTPUT_ENV) or ".")
    d.mkdir(parents=True, exist_ok=True)
    return d


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        cfg = replace(cfg, threads=args.threads)
    return cfg


def cmd_simulate(cfg: RunConfig, out: Path) -> int:
    spec = cfg.spec()
    grid = cfg.grid()
    u = Control.constant(grid, float(cfg.optimize.get("u_init", 0.0)), spec)
    ens, report = solve_forward(
        spec, u, cfg.particles, cfg.seed, tol=cfg.picard_tol, mode=cfg.picard_mode, threads=cfg.threads
    )
    export.write_ensemble(out / "ensemble.csv", ens.paths, grid.times)
    XT = ens.X[-1]
    half = cfg.particles // 2
    summary = {
        "mean": float(np.mean(XT)),
        "variance": float(np.var(XT)),
        "w2_halves": wasserstein2(XT[:half], XT[half : 2 * half]),
    }
    export.write_json(
        out / "ensemble.json",
        {"seed": cfg.seed, "grid": {"T": grid.T, "N": grid.N, "delta": grid.delta}, "report": report.as_dict(),
         "summary": summary},
    )
    print(
        f"simulate: iterations={report.iterations} converged={report.converged} "
        f"mean={export.fmt(summary['mean'])} variance={export.fmt(summary['variance'])} "
        f"w2_halves={export.fmt(summary['w2_halves'])}"
    )
    return EXIT_OK


def cmd_optimize(cfg: RunConfig, out: Path) -> int:
    spec = cfg.spec()
    grid = cfg.grid()
    opt = cfg.optimize
    u0 = Control.constant(grid, float(opt.get("u_init", 0.0)), spec)
    res = optimize(
        spec, u0, cfg.particles, cfg.seed,
        step_rule=StepRule(initial=float(opt.get("step", 1.0))),
        grad_tol=cfg.grad_tol,
        max_outer=int(opt.get("max_outer", 50)),
        picard_tol=cfg.picard_tol,
        bsde_tol=cfg.bsde_tol,
        basis_degree=cfg.basis_degree,
        threads=cfg.threads,
        mode=cfg.picard_mode,
    )
    export.write_trace(out / "trace.csv", res.trace)
    export.write_control(out / "control.csv", res.control.values, grid.times)
    export.write_json(out / "optimality.json", res.report.as_dict())
    r = res.report
    print(
        f"optimize: iterations={r.iterations} J={export.fmt(res.trace[-1].J)} "
        f"max_interior_grad={export.fmt(r.max_interior_gradient)} kkt={'pass' if r.passed() else 'fail'}"
        + (" stalled" if r.stalled else "")
    )
    if r.stalled:
        print("optimize: line search stalled after the maximum number of halvings", file=sys.stderr)
        return EXIT_STALL
    if not r.passed():
        print(f"optimize: KKT violated at cells {r.violated_cells}", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


def cmd_verify(cfg: RunConfig, out: Path, suite: str | None) -> int:
    suite = suite or cfg.verify.get("suite")
    if suite not in SUITES:
        print(f"unknown suite {suite!r}; available: {', '.join(sorted(SUITES))}", file=sys.stderr)
        return EXIT_CONFIG
    rep = SUITES[suite](cfg)
    export.write_json(out / f"verify-{suite}.json", rep)
    print(f"verify {suite}: {'PASS' if rep['passed'] else 'FAIL'}")
    return EXIT_OK if rep["passed"] else EXIT_FAILED


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="amv", description="Anticipating McKean-Vlasov simulation and control.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("simulate", "optimize", "verify"):
        s = sub.add_parser(name)
        s.add_argument("--config", required=True)
        s.add_argument("--seed", type=int)
        s.add_argument("--threads", type=int)
        s.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV} or .)")
        s.add_argument("-v", "--verbose", action="store_true")
        if name == "verify":
            s.add_argument("--suite", help=f"one of: {', '.join(sorted(SUITES))}")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
    try:
        cfg = _apply_overrides(load(args.config), args)
        out = _out_dir(args)
        if args.command == "simulate":
            return cmd_simulate(cfg, out)
        if args.command == "optimize":
            return cmd_optimize(cfg, out)
        return cmd_verify(cfg, out, args.suite)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PicardDivergence as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
