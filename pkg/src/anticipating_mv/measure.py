"""Empirical measures on the real line, W2 distance and Lions derivatives.

Laws are always equally weighted empirical measures of a particle cloud.
Measure-dependent coefficients receive an :class:`EmpiricalMeasure`; their
Lions derivatives are callables ``(t, x, mu, y, u)``, optionally wrapped in
:class:`Separable` when they factor as ``left(t, x, mu, u) * right(t, mu, y, u)``
so that cloud averages cost O(M) instead of O(M^2).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Callable

import numpy as np

from .exceptions import NonFiniteError, SampleCountMismatch

ScalarMap = Callable[[np.ndarray], np.ndarray]

# rows per block when a Lions derivative has to be evaluated pairwise
_PAIR_BLOCK = 256


class EmpiricalMeasure:
    """Equally weighted empirical law of ``M`` real samples.

    ``values`` keeps the particle order (used for deterministic reductions);
    ``samples`` is the ascending, stably sorted copy. The sort happens on
    first access because most coefficients only need moments.
    """

    def __init__(self, values):
        arr = np.array(values, dtype=float).ravel()
        if arr.size < 1:
            raise ValueError("an empirical measure needs at least one sample")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("empirical measure samples must be finite")
        arr.setflags(write=False)
        self._values = arr

    @classmethod
    def _trusted(cls, arr: np.ndarray) -> EmpiricalMeasure:
        # internal fast path: caller guarantees a finite 1-d float array it no longer mutates
        obj = cls.__new__(cls)
        obj._values = arr
        return obj

    @property
    def values(self) -> np.ndarray:
        return self._values

    @cached_property
    def samples(self) -> np.ndarray:
        s = np.sort(self._values, kind="stable")
        s.setflags(write=False)
        return s

    @property
    def M(self) -> int:
        return self._values.size

    @cached_property
    def mean(self) -> float:
        return float(np.mean(self._values))

    @cached_property
    def second_moment(self) -> float:
        return float(np.mean(self._values**2))

    def __len__(self) -> int:
        return self.M

    def __repr__(self) -> str:
        return f"EmpiricalMeasure(M={self.M}, mean={self.mean:.6g})"


def as_measure(mu) -> EmpiricalMeasure:
    return mu if isinstance(mu, EmpiricalMeasure) else EmpiricalMeasure(mu)


def wasserstein2(mu1, mu2) -> float:
    """Exact W2 between two equal-size empirical measures (quantile coupling)."""
    mu1, mu2 = as_measure(mu1), as_measure(mu2)
    if mu1.M != mu2.M:
        raise SampleCountMismatch(f"sample-count mismatch: {mu1.M} vs {mu2.M}")
    d = mu1.samples - mu2.samples
    return float(np.sqrt(np.mean(d * d)))


def statistic(mu, f: ScalarMap) -> float:
    """Return the integral of ``f`` against ``mu``."""
    mu = as_measure(mu)
    vals = np.asarray(f(mu.values), dtype=float)
    out = float(np.mean(np.broadcast_to(vals, mu.values.shape)))
    if not np.isfinite(out):
        raise NonFiniteError("non-finite statistic")
    return out


@dataclass(frozen=True)
class StatisticFunctional:
    """The functional ``mu -> g(integral of f d mu)`` with its derivative data."""

    f: ScalarMap
    df: ScalarMap
    g: Callable[[float], float]
    dg: Callable[[float], float]

    def __call__(self, mu) -> float:
        out = float(self.g(statistic(mu, self.f)))
        if not np.isfinite(out):
            raise NonFiniteError("non-finite functional value")
        return out

    def lions(self, mu, y):
        """Lions derivative ``g'(E f) f'(y)``; vectorised over ``y``."""
        m = statistic(mu, self.f)
        out = self.dg(m) * np.asarray(self.df(np.asarray(y, dtype=float)), dtype=float)
        if not np.all(np.isfinite(out)):
            raise NonFiniteError("non-finite Lions derivative")
        return out


def lions_derivative_statistic(phi: StatisticFunctional, mu, y: float) -> float:
    return float(phi.lions(mu, y))


MEAN = StatisticFunctional(
    f=lambda x: x, df=lambda x: np.ones_like(x), g=lambda m: m, dg=lambda m: 1.0
)


def lifted_check(functional, derivative, zeta, eta, eps: float) -> tuple[float, float]:
    """Compare a forward difference of the lifted functional with its Lions derivative.

    ``functional`` maps a sample array to a real, ``derivative(samples, y)``
    returns the Lions derivative at the points ``y``.
    """
    zeta = np.asarray(zeta, dtype=float).ravel()
    eta = np.asarray(eta, dtype=float).ravel()
    if zeta.shape != eta.shape:
        raise SampleCountMismatch(f"sample-count mismatch: {zeta.size} vs {eta.size}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    fd = (functional(zeta + eps * eta) - functional(zeta)) / eps
    grad = np.asarray(derivative(zeta, zeta), dtype=float)
    an = float(np.mean(np.broadcast_to(grad, zeta.shape) * eta))
    return float(fd), an


def lifted_directional_derivative_check(
    phi: StatisticFunctional, zeta, eta, eps: float
) -> tuple[float, float]:
    return lifted_check(
        lambda z: phi(EmpiricalMeasure(z)),
        lambda z, y: phi.lions(EmpiricalMeasure(z), y),
        zeta,
        eta,
        eps,
    )


# -- Lions derivatives of coefficients -------------------------------------


@dataclass(frozen=True)
class Separable:
    """A Lions derivative of the product form ``left(t, x, mu, u) * right(t, mu, y, u)``."""

    left: Callable
    right: Callable

    def __call__(self, t, x, mu, y, u):
        return np.asarray(self.left(t, x, mu, u)) * np.asarray(self.right(t, mu, y, u))


def _zero_left(t, x, mu, u):
    return 0.0


def _one_right(t, mu, y, u):
    return 1.0


ZERO_DERIVATIVE = Separable(_zero_left, _one_right)


def is_zero(dmu) -> bool:
    return dmu is None or dmu is ZERO_DERIVATIVE


def _full(v, n: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(v, dtype=float), (n,))


def cloud_average(dmu, t, x, mu, y, u, w) -> np.ndarray:
    """``out_i = (1/M) sum_j dmu(t, x_i, mu, y_j, u) * w_j``.

    This is the tilde expectation of the derivative evaluated at the
    particle's own state ``x_i`` against the copy ``(y_j, w_j)``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.asarray(w, dtype=float)
    n = x.size
    if is_zero(dmu):
        return np.zeros(n)
    if isinstance(dmu, Separable):
        r = np.mean(_full(dmu.right(t, mu, y, u), y.size) * w)
        return _full(dmu.left(t, x, mu, u), n) * r
    out = np.empty(n)
    for s in range(0, n, _PAIR_BLOCK):
        blk = x[s : s + _PAIR_BLOCK, None]
        vals = np.broadcast_to(np.asarray(dmu(t, blk, mu, y[None, :], u), dtype=float), (blk.shape[0], y.size))
        out[s : s + _PAIR_BLOCK] = np.mean(vals * w[None, :], axis=1)
    return out


def cloud_average_swapped(dmu, t, x, mu, y, u, w) -> np.ndarray:
    """``out_i = (1/M) sum_j dmu(t, x_j, mu, y_i, u) * w_j``.

    The index-swapped form produced by the Fubini exchange of the
    product-space expectation: the copy now sits in the state slot.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.asarray(w, dtype=float)
    n = y.size
    if is_zero(dmu):
        return np.zeros(n)
    if isinstance(dmu, Separable):
        lft = np.mean(_full(dmu.left(t, x, mu, u), x.size) * w)
        return _full(dmu.right(t, mu, y, u), n) * lft
    out = np.empty(n)
    for s in range(0, n, _PAIR_BLOCK):
        blk = y[s : s + _PAIR_BLOCK, None]
        vals = np.broadcast_to(np.asarray(dmu(t, x[None, :], mu, blk, u), dtype=float), (blk.shape[0], x.size))
        out[s : s + _PAIR_BLOCK] = np.mean(vals * w[None, :], axis=1)
    return out
