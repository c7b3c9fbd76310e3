"""Run configuration: a YAML document with nested sections.

Example::

    problem:
      name: lq-anticipating-mean
      params: {a: 0.5, abar: 1.0}
    grid: {T: 1.0, N: 140}
    delta_steps: 10          # or ``delta: 0.0714...``; must be a grid multiple
    particles: 4000
    seed: 1
    tolerances: {picard_tol: 1.0e-8, bsde_tol: 1.0e-8, grad_tol: 1.0e-3}
    picard_mode: full
    basis_degree: 2
    optimize: {u_init: 0.0, max_outer: 50, step: 1.0}
    verify: {suite: duality}
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .exceptions import ConfigError, GridError, UnknownProblem
from .problems import ProblemSpec, TimeGrid, builtin

_TOP_KEYS = {
    "problem", "grid", "delta", "delta_steps", "particles", "seed", "tolerances",
    "picard_mode", "basis_degree", "threads", "optimize", "verify",
}
_TOL_DEFAULTS = {"picard_tol": 1e-8, "bsde_tol": 1e-8, "grad_tol": 1e-3}
_OPT_DEFAULTS = {"u_init": 0.0, "max_outer": 50, "step": 1.0}


@dataclass
class RunConfig:
    problem: str
    params: dict = field(default_factory=dict)
    T: float = 1.0
    N: int = 100
    delta: float = 0.0
    particles: int = 1000
    seed: int = 0
    tolerances: dict = field(default_factory=lambda: dict(_TOL_DEFAULTS))
    picard_mode: str = "full"
    basis_degree: int = 2
    threads: int = 1
    optimize: dict = field(default_factory=lambda: dict(_OPT_DEFAULTS))
    verify: dict = field(default_factory=dict)

    @property
    def picard_tol(self) -> float:
        return float(self.tolerances["picard_tol"])

    @property
    def bsde_tol(self) -> float:
        return float(self.tolerances["bsde_tol"])

    @property
    def grad_tol(self) -> float:
        return float(self.tolerances["grad_tol"])

    def grid(self) -> TimeGrid:
        return TimeGrid(self.T, self.N, self.delta)

    def spec(self) -> ProblemSpec:
        params = dict(self.params)
        params["T"] = self.T
        params["delta"] = self.delta
        return builtin(self.problem, params)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {
            "problem": {"name": d["problem"], "params": d["params"]},
            "grid": {"T": d["T"], "N": d["N"]},
            "delta": d["delta"],
            "particles": d["particles"],
            "seed": d["seed"],
            "tolerances": d["tolerances"],
            "picard_mode": d["picard_mode"],
            "basis_degree": d["basis_degree"],
            "threads": d["threads"],
            "optimize": d["optimize"],
            "verify": d["verify"],
        }

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def _num(value, name: str, kind=float):
    if isinstance(value, bool):
        raise ConfigError(f"{name} must be a number")
    try:
        out = kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be a number, got {value!r}") from None
    if kind is int and out != value:
        raise ConfigError(f"{name} must be an integer, got {value!r}")
    return out


def from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    prob = raw.get("problem")
    if isinstance(prob, str):
        name, params = prob, {}
    elif isinstance(prob, dict) and "name" in prob:
        name, params = prob["name"], dict(prob.get("params") or {})
    else:
        raise ConfigError("problem must be a name or a mapping with 'name'")
    grid = raw.get("grid") or {}
    T = _num(grid.get("T", 1.0), "grid.T")
    N = _num(grid.get("N", 100), "grid.N", int)
    if N < 1 or not T > 0:
        raise ConfigError("grid needs T > 0 and N >= 1")
    if "delta_steps" in raw and "delta" in raw:
        raise ConfigError("give either delta or delta_steps, not both")
    if "delta_steps" in raw:
        delta = _num(raw["delta_steps"], "delta_steps", int) * T / N
    else:
        delta = _num(raw.get("delta", 0.0), "delta")
    if delta < 0:
        raise ConfigError("delta must be nonnegative")
    tols = dict(_TOL_DEFAULTS)
    tols.update({k: _num(v, f"tolerances.{k}") for k, v in (raw.get("tolerances") or {}).items()})
    if set(tols) - set(_TOL_DEFAULTS):
        raise ConfigError(f"unknown tolerances: {sorted(set(tols) - set(_TOL_DEFAULTS))}")
    if any(v <= 0 for v in tols.values()):
        raise ConfigError("all tolerances must be positive")
    M = _num(raw.get("particles", 1000), "particles", int)
    if M < 2:
        raise ConfigError("particles must be at least 2")
    mode = raw.get("picard_mode", "full")
    if mode not in ("full", "law-only"):
        raise ConfigError("picard_mode must be 'full' or 'law-only'")
    opt = dict(_OPT_DEFAULTS)
    opt.update(raw.get("optimize") or {})
    cfg = RunConfig(
        problem=str(name),
        params=params,
        T=T,
        N=N,
        delta=delta,
        particles=M,
        seed=_num(raw.get("seed", 0), "seed", int),
        tolerances=tols,
        picard_mode=mode,
        basis_degree=_num(raw.get("basis_degree", 2), "basis_degree", int),
        threads=_num(raw.get("threads", 1), "threads", int),
        optimize=opt,
        verify=dict(raw.get("verify") or {}),
    )
    try:
        cfg.grid()
        cfg.spec()
    except GridError as exc:
        raise ConfigError(str(exc)) from None
    except UnknownProblem as exc:
        raise ConfigError(str(exc)) from None
    except ValueError as exc:
        raise ConfigError(f"invalid problem parameters: {exc}") from None
    return cfg


def loads(text: str) -> RunConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    return from_dict(copy.deepcopy(raw))


def load(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return loads(text)
