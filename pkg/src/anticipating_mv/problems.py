"""Control problems: coefficients, their partial derivatives, and built-in benchmarks.

Coefficient maps are vectorised over the state: ``b(t, x, mu, u)`` receives
an array ``x`` of particle states, the :class:`EmpiricalMeasure` ``mu`` and
a scalar control ``u``, and returns an array broadcastable to ``x``. All maps
must be pure functions.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .exceptions import GridError, NonFiniteError, UnknownProblem
from .measure import (
    EmpiricalMeasure,
    Separable,
    ZERO_DERIVATIVE,
    lifted_check,
    wasserstein2,
)

Coefficient = Callable  # (t, x, mu, u) -> array
LionsCoefficient = Callable  # (t, x, mu, y, u) -> array


def _zero(t, x, mu, u):
    return 0.0


def _zero_terminal(x, mu):
    return 0.0


def _zero_terminal_lions(x, mu, y):
    return 0.0


ZERO_TERMINAL_LIONS = _zero_terminal_lions


@dataclass(frozen=True)
class ProblemSpec:
    """A controlled anticipating McKean-Vlasov problem on the real line."""

    x0: float
    T: float
    delta: float
    lipschitz_C: float
    control_lo: float
    control_hi: float
    b: Coefficient
    sigma: Coefficient
    l: Coefficient
    g: Callable
    db_dx: Coefficient = _zero
    dsigma_dx: Coefficient = _zero
    dl_dx: Coefficient = _zero
    db_du: Coefficient = _zero
    dsigma_du: Coefficient = _zero
    dl_du: Coefficient = _zero
    db_dmu: LionsCoefficient = ZERO_DERIVATIVE
    dsigma_dmu: LionsCoefficient = ZERO_DERIVATIVE
    dl_dmu: LionsCoefficient = ZERO_DERIVATIVE
    dg_dx: Callable = _zero_terminal
    dg_dmu: Callable = _zero_terminal_lions
    name: str = "custom"
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("T must be positive")
        if self.delta < 0:
            raise ValueError("delta must be nonnegative")
        if not self.lipschitz_C > 0:
            raise ValueError("lipschitz_C must be positive")
        if self.control_lo > self.control_hi:
            raise ValueError("control_lo must not exceed control_hi")

    @property
    def delta0(self) -> float:
        """Largest lag covered by the forward contraction argument, 1/(7C)."""
        return 1.0 / (7.0 * self.lipschitz_C)

    @property
    def forward_beta(self) -> float:
        return 7.0 * self.lipschitz_C

    def with_delta(self, delta: float) -> ProblemSpec:
        return replace(self, delta=float(delta), params={**self.params, "delta": float(delta)})

    def scaled_costs(self, factor: float) -> ProblemSpec:
        """Multiply running and terminal costs (and their derivatives) by ``factor``."""
        s = float(factor)

        def mul(f):
            return lambda *a: s * np.asarray(f(*a))

        def mul_lions(f):
            if isinstance(f, Separable):
                return Separable(mul(f.left), f.right)
            return mul(f)

        return replace(
            self,
            l=mul(self.l),
            g=mul(self.g),
            dl_dx=mul(self.dl_dx),
            dl_du=mul(self.dl_du),
            dl_dmu=mul_lions(self.dl_dmu),
            dg_dx=mul(self.dg_dx),
            dg_dmu=mul(self.dg_dmu),
            name=f"{self.name}*{s:g}",
        )

    def check_delta(self) -> bool:
        ok = self.delta <= self.delta0 * (1 + 1e-12)
        if not ok:
            warnings.warn(
                f"delta={self.delta:g} exceeds 1/(7C)={self.delta0:g}; "
                "the forward contraction is not guaranteed",
                stacklevel=3,
            )
        return ok


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on [0, T] with the lag an exact number of steps."""

    T: float
    N: int
    delta: float = 0.0

    def __post_init__(self):
        if self.N < 1:
            raise GridError("N must be at least 1")
        if not self.T > 0:
            raise GridError("T must be positive")
        ratio = self.delta / self.dt
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
            raise GridError("delta must be an integer multiple of dt")

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def delta_steps(self) -> int:
        return int(round(self.delta / self.dt))

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.N + 1)

    def ahead(self, k: int) -> int:
        """Grid index of t_k + delta, frozen at N beyond the horizon."""
        return min(k + self.delta_steps, self.N)

    @classmethod
    def for_problem(cls, spec: ProblemSpec, N: int) -> TimeGrid:
        return cls(spec.T, N, spec.delta)


@dataclass(frozen=True)
class Control:
    """Open-loop piecewise-constant control, one value per grid cell."""

    values: np.ndarray
    grid: TimeGrid

    def __post_init__(self):
        v = np.array(self.values, dtype=float).ravel()
        if v.size != self.grid.N:
            raise ValueError(f"control has {v.size} cells, grid has {self.grid.N}")
        if not np.all(np.isfinite(v)):
            raise NonFiniteError("control values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def constant(cls, grid: TimeGrid, value: float, spec: ProblemSpec | None = None) -> Control:
        v = np.full(grid.N, float(value))
        if spec is not None:
            v = np.clip(v, spec.control_lo, spec.control_hi)
        return cls(v, grid)

    @classmethod
    def clamped(cls, values, grid: TimeGrid, spec: ProblemSpec) -> Control:
        return cls(np.clip(np.asarray(values, dtype=float), spec.control_lo, spec.control_hi), grid)

    def admissible(self, spec: ProblemSpec) -> bool:
        return bool(np.all(self.values >= spec.control_lo) and np.all(self.values <= spec.control_hi))

    def blend(self, other: Control, theta: float) -> Control:
        """``self + theta * (other - self)``."""
        return Control(self.values + theta * (other.values - self.values), self.grid)

    def __sub__(self, other: Control) -> np.ndarray:
        return self.values - other.values


# -- validation --------------------------------------------------------------


@dataclass
class ValidationReport:
    lipschitz_ratio: dict[str, float]
    derivative_error: dict[str, float]
    delta_ok: bool
    delta0: float
    lipschitz_C: float

    @property
    def max_derivative_error(self) -> float:
        return max(self.derivative_error.values(), default=0.0)

    def passed(self, deriv_tol: float = 1e-6, lip_slack: float = 1e-9) -> bool:
        lip_ok = all(r <= self.lipschitz_C * (1 + lip_slack) + lip_slack for r in self.lipschitz_ratio.values())
        return lip_ok and self.max_derivative_error <= deriv_tol


def _eval(name, fn, *args):
    out = np.asarray(fn(*args), dtype=float)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"coefficient {name} is non-finite at probe {args!r}")
    return out


def validate(spec: ProblemSpec, rng_seed: int = 0, n_probes: int = 64) -> ValidationReport:
    """Probe the Lipschitz bound and every supplied partial derivative.

    State and control partials are compared with central differences, Lions
    derivatives with the lifted directional difference. Errors are reported
    relative to ``1 + |derivative|``.
    """
    rng = np.random.default_rng(rng_seed)
    h = 1e-5
    eps_mu = 1e-7
    m_samples = 8
    lip = {"b": 0.0, "sigma": 0.0}
    err: dict[str, float] = {}

    def bump(key, fd, an):
        e = float(np.max(np.abs(fd - an) / (1.0 + np.abs(an))))
        err[key] = max(err.get(key, 0.0), e)

    for k in range(n_probes):
        t = rng.uniform(0.0, spec.T)
        x = rng.normal(0.0, 2.0)
        u = rng.uniform(spec.control_lo, spec.control_hi)
        mu = EmpiricalMeasure(rng.normal(rng.normal(), 1.5, m_samples))
        # alternate probe kinds so that pure-state and pure-law ratios are both seen
        kind = k % 3
        x2 = x if kind == 1 else rng.normal(0.0, 2.0)
        mu2 = mu if kind == 0 else EmpiricalMeasure(rng.normal(rng.normal(), 1.5, m_samples))
        denom = abs(x - x2) + wasserstein2(mu, mu2)
        for key, fn in (("b", spec.b), ("sigma", spec.sigma)):
            a1 = _eval(key, fn, t, np.array([x]), mu, u)
            a2 = _eval(key, fn, t, np.array([x2]), mu2, u)
            if denom > 0:
                lip[key] = max(lip[key], float(np.abs(a1 - a2).max() / denom))

        xs = np.array([x])
        for key, fn, dfn in (
            ("b", spec.b, spec.db_dx),
            ("sigma", spec.sigma, spec.dsigma_dx),
            ("l", spec.l, spec.dl_dx),
        ):
            fd = (_eval(key, fn, t, xs + h, mu, u) - _eval(key, fn, t, xs - h, mu, u)) / (2 * h)
            bump(f"d{key}_dx", fd, _eval(f"d{key}_dx", dfn, t, xs, mu, u))
        for key, fn, dfn in (
            ("b", spec.b, spec.db_du),
            ("sigma", spec.sigma, spec.dsigma_du),
            ("l", spec.l, spec.dl_du),
        ):
            fd = (_eval(key, fn, t, xs, mu, u + h) - _eval(key, fn, t, xs, mu, u - h)) / (2 * h)
            bump(f"d{key}_du", fd, _eval(f"d{key}_du", dfn, t, xs, mu, u))
        fd = (_eval("g", spec.g, xs + h, mu) - _eval("g", spec.g, xs - h, mu)) / (2 * h)
        bump("dg_dx", fd, _eval("dg_dx", spec.dg_dx, xs, mu))

        zeta = mu.values.copy()
        eta = rng.normal(size=zeta.size)
        for key, fn, dfn in (
            ("b", spec.b, spec.db_dmu),
            ("sigma", spec.sigma, spec.dsigma_dmu),
            ("l", spec.l, spec.dl_dmu),
        ):
            fd, an = lifted_check(
                lambda z: float(np.ravel(_eval(key, fn, t, xs, EmpiricalMeasure(z), u))[0]),
                lambda z, y: _eval(f"d{key}_dmu", dfn, t, x, EmpiricalMeasure(z), y, u),
                zeta,
                eta,
                eps_mu,
            )
            bump(f"d{key}_dmu", np.array(fd), np.array(an))
        fd, an = lifted_check(
            lambda z: float(np.ravel(_eval("g", spec.g, xs, EmpiricalMeasure(z)))[0]),
            lambda z, y: _eval("dg_dmu", spec.dg_dmu, x, EmpiricalMeasure(z), y),
            zeta,
            eta,
            eps_mu,
        )
        bump("dg_dmu", np.array(fd), np.array(an))

    return ValidationReport(
        lipschitz_ratio=lip,
        derivative_error=err,
        delta_ok=spec.delta <= spec.delta0 * (1 + 1e-12),
        delta0=spec.delta0,
        lipschitz_C=spec.lipschitz_C,
    )


# -- built-in problems -------------------------------------------------------


def _common(params: dict, **defaults) -> dict:
    base = {"x0": 1.0, "T": 1.0, "delta": 0.0, "control_lo": -5.0, "control_hi": 5.0}
    base.update(defaults)
    unknown = set(params) - set(base) - {"lipschitz_C"}
    if unknown:
        raise ValueError(f"unknown parameters {sorted(unknown)}")
    base.update({k: float(v) for k, v in params.items()})
    return base


def _constant(params: dict) -> ProblemSpec:
    p = _common(params, b=1.0, sigma=1.0)
    b0, s0 = p["b"], p["sigma"]
    C = p.get("lipschitz_C", max(1.0, abs(b0) + abs(s0)))
    return ProblemSpec(
        x0=p["x0"], T=p["T"], delta=p["delta"], lipschitz_C=C,
        control_lo=p["control_lo"], control_hi=p["control_hi"],
        b=lambda t, x, mu, u: b0,
        sigma=lambda t, x, mu, u: s0,
        l=lambda t, x, mu, u: u * u,
        g=lambda x, mu: x,
        dl_du=lambda t, x, mu, u: 2.0 * u,
        dg_dx=lambda x, mu: 1.0,
        name="constant", params=p,
    )


def _mean_left(coef: float):
    return Separable(lambda t, x, mu, u: coef, lambda t, mu, y, u: 1.0)


def _deterministic_mean(params: dict) -> ProblemSpec:
    p = _common(params)
    C = p.get("lipschitz_C", 1.0)
    return ProblemSpec(
        x0=p["x0"], T=p["T"], delta=p["delta"], lipschitz_C=C,
        control_lo=p["control_lo"], control_hi=p["control_hi"],
        b=lambda t, x, mu, u: mu.mean,
        sigma=lambda t, x, mu, u: 0.0,
        l=lambda t, x, mu, u: 0.5 * u * u,
        g=lambda x, mu: 0.5 * x * x,
        db_dmu=_mean_left(1.0),
        dl_du=lambda t, x, mu, u: u,
        dg_dx=lambda x, mu: x,
        name="deterministic-mean", params=p,
    )


_LQ_DEFAULTS = dict(a=0.5, c=1.0, sigma0=0.5, lam=1.0, kappa=1.0)


def _decoupled(params: dict) -> ProblemSpec:
    p = _common(params, **_LQ_DEFAULTS)
    a, c, s0, lam, kap = p["a"], p["c"], p["sigma0"], p["lam"], p["kappa"]
    C = p.get("lipschitz_C", max(abs(a), 1e-6))
    return ProblemSpec(
        x0=p["x0"], T=p["T"], delta=p["delta"], lipschitz_C=C,
        control_lo=p["control_lo"], control_hi=p["control_hi"],
        b=lambda t, x, mu, u: a * x + c * u,
        sigma=lambda t, x, mu, u: s0,
        l=lambda t, x, mu, u: 0.5 * (lam * x * x + u * u),
        g=lambda x, mu: 0.5 * kap * x * x,
        db_dx=lambda t, x, mu, u: a,
        db_du=lambda t, x, mu, u: c,
        dl_dx=lambda t, x, mu, u: lam * x,
        dl_du=lambda t, x, mu, u: u,
        dg_dx=lambda x, mu: kap * x,
        name="decoupled", params=p,
    )


def _lq_anticipating_mean(params: dict) -> ProblemSpec:
    p = _common(params, abar=1.0, sin_amp=0.0, **_LQ_DEFAULTS)
    a, ab, c, s0 = p["a"], p["abar"], p["c"], p["sigma0"]
    lam, kap, amp = p["lam"], p["kappa"], p["sin_amp"]
    C = p.get("lipschitz_C", max(abs(a) + abs(amp), abs(ab), 1e-6))
    if amp:
        b = lambda t, x, mu, u: a * x + amp * np.sin(x) + ab * mu.mean + c * u  # noqa: E731
        db_dx = lambda t, x, mu, u: a + amp * np.cos(x)  # noqa: E731
    else:
        b = lambda t, x, mu, u: a * x + ab * mu.mean + c * u  # noqa: E731
        db_dx = lambda t, x, mu, u: a  # noqa: E731
    return ProblemSpec(
        x0=p["x0"], T=p["T"], delta=p["delta"], lipschitz_C=C,
        control_lo=p["control_lo"], control_hi=p["control_hi"],
        b=b,
        sigma=lambda t, x, mu, u: s0,
        l=lambda t, x, mu, u: 0.5 * (lam * x * x + u * u),
        g=lambda x, mu: 0.5 * kap * x * x,
        db_dx=db_dx,
        db_du=lambda t, x, mu, u: c,
        db_dmu=_mean_left(ab),
        dl_dx=lambda t, x, mu, u: lam * x,
        dl_du=lambda t, x, mu, u: u,
        dg_dx=lambda x, mu: kap * x,
        name="lq-anticipating-mean", params=p,
    )


BUILTINS: dict[str, Callable[[dict], ProblemSpec]] = {
    "lq-anticipating-mean": _lq_anticipating_mean,
    "deterministic-mean": _deterministic_mean,
    "constant": _constant,
    "decoupled": _decoupled,
}


def builtin(name: str, params: dict | None = None) -> ProblemSpec:
    """Instantiate a built-in benchmark problem by name."""
    try:
        factory = BUILTINS[name]
    except KeyError:
        raise UnknownProblem(
            f"unknown problem {name!r}; available: {', '.join(sorted(BUILTINS))}"
        ) from None
    return factory(dict(params or {}))


def lq_mean_riccati(spec: ProblemSpec, n_steps: int = 100_000):
    """Reference open-loop optimum of the LQ problem without anticipation.

    Integrates the mean-field Riccati equation backward and the optimally
    controlled mean forward with RK4; returns ``(times, Pi, mean, control)``.
    Only meaningful for the LQ built-ins at ``delta = 0``.
    """
    p = spec.params
    a = p["a"] + p.get("abar", 0.0)
    c, lam, kap = p["c"], p["lam"], p["kappa"]
    T = spec.T
    h = T / n_steps

    def dpi(P):
        return -2.0 * a * P + c * c * P * P - lam

    Pi = np.empty(n_steps + 1)
    Pi[-1] = kap
    for k in range(n_steps, 0, -1):
        P = Pi[k]
        k1 = dpi(P)
        k2 = dpi(P - 0.5 * h * k1)
        k3 = dpi(P - 0.5 * h * k2)
        k4 = dpi(P - h * k3)
        Pi[k - 1] = P - h * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
    times = np.linspace(0.0, T, n_steps + 1)
    m = np.empty(n_steps + 1)
    m[0] = spec.x0
    for k in range(n_steps):
        Pm = 0.5 * (Pi[k] + Pi[k + 1])
        f = lambda mm, P: (a - c * c * P) * mm  # noqa: E731
        k1 = f(m[k], Pi[k])
        k2 = f(m[k] + 0.5 * h * k1, Pm)
        k3 = f(m[k] + 0.5 * h * k2, Pm)
        k4 = f(m[k] + h * k3, Pi[k + 1])
        m[k + 1] = m[k] + h * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
    return times, Pi, m, -c * Pi * m
