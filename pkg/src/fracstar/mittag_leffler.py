"""Two-parameter Mittag-Leffler function on the real axis.

The evaluator picks one of three regimes per argument:

* a float64 Taylor series with compensated (Kahan) summation, accepted
  only when the largest term does not exceed the sum by more than a few
  orders of magnitude;
* the algebraic asymptotic expansion for large negative arguments,
  truncated at its smallest term and accepted only when that term is
  below tolerance;
* for negative arguments and ``alpha < 1``, inversion of the Laplace
  transform ``s**(alpha-beta) / (s**alpha - z)`` by the trapezoid rule on a
  parabolic contour, accepted when two node counts agree;
* a Taylor series in extended precision (mpmath) whose working precision
  is sized to the cancellation, used for whatever is left.

The relaxation kernels used by the spectral time solvers are thin
wrappers around the evaluator.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import mpmath
import numpy as np
from scipy import special

__all__ = [
    "MLParams",
    "MLConvergenceError",
    "KernelKind",
    "ml",
    "ml_array",
    "mode_kernel",
]

_EPS = np.finfo(float).eps
#: largest max-term/sum ratio accepted from the float64 series
_SERIES_COND_MAX = 1e3
_SERIES_MAX_TERMS = 4000
_ASYMP_MAX_TERMS = 80
#: node counts of the two contour sums compared for acceptance
_CONTOUR_NODES = (16, 20)
_CONTOUR_TOL = 1e-11


class MLConvergenceError(ArithmeticError):
    """Raised when no regime reaches the requested tolerance."""


@dataclass(frozen=True)
class MLParams:
    """Evaluation parameters for :math:`E_{\\alpha,\\beta}`."""

    alpha: float
    beta: float
    #: relative truncation tolerance of the series and asymptotic sums
    series_tol: float = 1e-14
    #: ``|z|`` below which the Taylor series is tried first;
    #: ``None`` means ``5 max(1, beta)``
    crossover: float | None = None

    def __post_init__(self) -> None:
        if not (0.0 < self.alpha <= 2.0):
            raise ValueError(f"alpha must lie in (0, 2], got {self.alpha}")
        if not self.beta > 0.0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if not (0.0 < self.series_tol <= 1e-6):
            raise ValueError(f"series_tol must lie in (0, 1e-6], got {self.series_tol}")
        if self.crossover is not None and not self.crossover > 0.0:
            raise ValueError("crossover must be positive")

    @property
    def switch(self) -> float:
        if self.crossover is not None:
            return self.crossover
        return 5.0 * max(1.0, self.beta)


class KernelKind(enum.Enum):
    #: :math:`E_{\gamma,1}(-\lambda t^\gamma)`
    STATE = "state"
    #: :math:`t^{\gamma-1} E_{\gamma,\gamma}(-\lambda t^\gamma)`
    RL_STATE = "rl_state"
    #: :math:`t^\gamma E_{\gamma,\gamma+1}(-\lambda t^\gamma)`, the integral of ``RL_STATE``
    CELL_INTEGRAL = "cell_integral"
    #: :math:`t E_{\gamma,2}(-\lambda t^\gamma)`, the integral of ``STATE``
    STATE_INTEGRAL = "state_integral"
    #: :math:`t^{\gamma+1} E_{\gamma,\gamma+2}(-\lambda t^\gamma)`, the integral of ``CELL_INTEGRAL``
    CELL_INTEGRAL2 = "cell_integral2"
    #: :math:`t^2 E_{\gamma,3}(-\lambda t^\gamma)`, the integral of ``STATE_INTEGRAL``
    STATE_INTEGRAL2 = "state_integral2"


# {{{ regimes


def _series_float(alpha: float, beta: float, z: np.ndarray, tol: float):
    """Kahan-summed Taylor series. Returns (values, accepted mask)."""
    logz = np.log(np.abs(z))
    neg = z < 0
    total = np.zeros_like(z)
    comp = np.zeros_like(z)
    tmax = np.zeros_like(z)
    done = np.zeros(z.shape, dtype=bool)
    prev = np.full_like(z, np.inf)

    # overflowing terms leave non-finite totals, rejected below
    with np.errstate(over="ignore", invalid="ignore"):
        for n in range(_SERIES_MAX_TERMS):
            mag = np.exp(n * logz - special.gammaln(alpha * n + beta))
            term = np.where(neg & (n % 2 == 1), -mag, mag)
            term = np.where(done, 0.0, term)

            y = term - comp
            t = total + y
            comp = (t - total) - y
            total = t
            tmax = np.maximum(tmax, mag)

            # past the peak and below tolerance
            done |= (mag <= prev) & (mag <= tol * np.abs(total))
            prev = mag
            if done.all():
                break

    with np.errstate(divide="ignore", invalid="ignore"):
        cond = tmax / np.abs(total)
    ok = done & np.isfinite(total) & (cond <= _SERIES_COND_MAX)
    return total, ok


def _exponential_part(alpha: float, beta: float, z: np.ndarray) -> np.ndarray:
    """Contribution of the roots of zeta**alpha = z on the negative axis.

    Zero for alpha < 1 (no such terms on the negative axis); for
    alpha >= 1 the two conjugate roots are averaged to a real value.
    """
    if alpha < 1.0:
        return np.zeros_like(z)
    r = np.abs(z) ** (1.0 / alpha)
    zeta = r * np.exp(1j * np.pi / alpha)
    val = np.real(zeta ** (1.0 - beta) * np.exp(zeta))
    if alpha == 1.0:
        return val
    return 2.0 / alpha * val


def _asymptotic(alpha: float, beta: float, z: np.ndarray, tol: float):
    """Optimally truncated algebraic expansion for z < 0."""
    k = np.arange(1, _ASYMP_MAX_TERMS + 1)
    d = beta - alpha * k
    rg = special.rgamma(d)
    # 1/Gamma vanishes at the poles; rounding must not leave tiny residues
    rg[(d <= 0.0) & (np.abs(d - np.round(d)) < 1e-10)] = 0.0
    # z**(-k) with z < 0, computed in log form
    logmag = -np.outer(np.log(np.abs(z)), k)
    sign = np.where(k % 2 == 1, -1.0, 1.0)
    with np.errstate(over="ignore", under="ignore"):
        terms = -sign[None, :] * np.exp(logmag) * rg[None, :]

    absterm = np.abs(terms)
    if alpha == 1.0 and beta == round(beta):
        # 1/Gamma(beta - k) vanishes for k >= beta: the expansion is finite
        total = np.sum(terms, axis=1) + _exponential_part(alpha, beta, z)
        return total, np.isfinite(total)
    # judge convergence on nonzero terms only (rgamma vanishes at poles)
    masked = np.where(absterm > 0.0, absterm, np.inf)
    kstar = np.argmin(masked, axis=1)
    keep = np.arange(_ASYMP_MAX_TERMS)[None, :] < kstar[:, None]
    total = np.sum(np.where(keep, terms, 0.0), axis=1)
    smallest = masked[np.arange(z.size), kstar]

    total = total + _exponential_part(alpha, beta, z)
    with np.errstate(invalid="ignore"):
        ok = np.isfinite(total) & (
            (smallest <= tol * np.abs(total)) | ~np.isfinite(smallest)
        )
    # every term zero means the algebraic part vanishes identically
    ok &= np.isfinite(smallest) | (np.abs(total) > 0.0)
    # optimal truncation leaves about exp(-|z|^(1/alpha)); a term that is small
    # only because 1/Gamma passes near a zero does not certify convergence
    ok &= np.abs(z) ** (1.0 / alpha) >= -math.log(tol)
    return total, ok


def _contour_sum(alpha: float, beta: float, z: np.ndarray, n: int) -> np.ndarray:
    # parabola s = mu (1 + iu)^2 with step 3/n and mu = pi n / 12 (evaluation at t = 1)
    step = 3.0 / n
    mu = np.pi * n / 12.0
    u = np.arange(0, n + 1) * step
    s = mu * (1.0 + 1j * u) ** 2
    ds = 2j * mu * (1.0 + 1j * u) * step
    vals = np.exp(s) * s ** (alpha - beta) * ds / (s[None, :] ** alpha - z[:, None])
    # conjugate symmetry: the u < 0 half mirrors u > 0
    total = vals[:, 0] + 2.0 * vals[:, 1:].sum(axis=1)
    return np.real(total / (2j * np.pi))


def _contour(alpha: float, beta: float, z: np.ndarray):
    """Bromwich inversion for z < 0, alpha < 1. Returns (values, accepted mask)."""
    lo, hi = (_contour_sum(alpha, beta, z, n) for n in _CONTOUR_NODES)
    ok = np.isfinite(hi) & (np.abs(hi - lo) <= _CONTOUR_TOL * np.abs(hi))
    return hi, ok


def _series_mp(alpha: float, beta: float, z: float, tol: float) -> float:
    """Taylor series with working precision sized to the cancellation."""
    az = abs(z)
    # the largest term is roughly exp(|z|**(1/alpha))
    lost = az ** (1.0 / alpha) / math.log(10.0) if az > 0 else 0.0
    dps = int(25 + lost + max(0.0, -math.log10(tol)))
    with mpmath.workdps(dps):
        zz = mpmath.mpf(z)
        a = mpmath.mpf(alpha)
        b = mpmath.mpf(beta)
        total = mpmath.mpf(0)
        power = mpmath.mpf(1)
        prev = mpmath.inf
        eps = mpmath.mpf(10) ** (-(dps - 5))
        nmax = int(50 + 4 * (az ** (1.0 / alpha) + 10) / min(alpha, 1.0)) + 200
        for n in range(nmax):
            term = power * mpmath.rgamma(a * n + b)
            total += term
            mag = abs(term)
            if n > 0 and mag <= prev and mag <= eps * abs(total) and mag <= tol * abs(total):
                return float(total)
            prev = mag
            power *= zz
    raise MLConvergenceError(
        f"Mittag-Leffler series did not converge for alpha={alpha}, beta={beta}, z={z}"
    )


# }}}


def ml_array(alpha: float, beta: float, z, params: MLParams | None = None) -> np.ndarray:
    """Vectorized :math:`E_{\\alpha,\\beta}(z)` for real ``z``."""
    if params is None:
        params = MLParams(alpha, beta)
    elif params.alpha != alpha or params.beta != beta:
        raise ValueError("params do not match (alpha, beta)")
    tol = params.series_tol

    zin = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(zin)):
        raise ValueError("z must be finite")
    flat, inverse = np.unique(zin.ravel(), return_inverse=True)
    out = np.full(flat.shape, np.nan)

    zero = flat == 0.0
    out[zero] = special.rgamma(beta)

    todo = ~zero
    if alpha == 1.0 and beta == 1.0:
        out[todo] = np.exp(flat[todo])
        todo[:] = False
    elif alpha == 1.0 and beta == 2.0:
        out[todo] = np.expm1(flat[todo]) / flat[todo]
        todo[:] = False

    small = todo & (np.abs(flat) <= params.switch)
    if small.any():
        val, ok = _series_float(alpha, beta, flat[small], tol)
        idx = np.flatnonzero(small)[ok]
        out[idx] = val[ok]
        todo[idx] = False

    large = todo & (flat < 0.0)
    if large.any():
        val, ok = _asymptotic(alpha, beta, flat[large], tol)
        idx = np.flatnonzero(large)[ok]
        out[idx] = val[ok]
        todo[idx] = False

    contour = todo & (flat < 0.0)
    if alpha < 1.0 and contour.any():
        val, ok = _contour(alpha, beta, flat[contour])
        idx = np.flatnonzero(contour)[ok]
        out[idx] = val[ok]
        todo[idx] = False

    if todo.any():
        # positive arguments beyond the crossover: float series has no cancellation
        pos = todo & (flat > 0.0)
        if pos.any():
            val, ok = _series_float(alpha, beta, flat[pos], tol)
            idx = np.flatnonzero(pos)[ok]
            out[idx] = val[ok]
            todo[idx] = False

    for i in np.flatnonzero(todo):
        out[i] = _series_mp(alpha, beta, float(flat[i]), tol)

    return out[inverse].reshape(zin.shape)


def ml(alpha: float, beta: float, z: float, params: MLParams | None = None) -> float:
    r"""Evaluate :math:`E_{\alpha,\beta}(z) = \sum_n z^n / \Gamma(\alpha n + \beta)`."""
    return float(ml_array(alpha, beta, np.array([z], dtype=float), params)[0])


def mode_kernel(gamma: float, lam, t, kind: KernelKind | str) -> np.ndarray:
    """Relaxation kernels of one eigenmode, broadcast over ``lam`` and ``t``."""
    kind = KernelKind(kind)
    if not (0.0 < gamma <= 1.0):
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    lam = np.asarray(lam, dtype=float)
    t = np.asarray(t, dtype=float)
    if np.any(lam < 0.0):
        raise ValueError("lambda must be nonnegative")
    if kind is KernelKind.RL_STATE and np.any(t <= 0.0):
        raise ValueError("rl_state kernel is singular at t = 0")
    if np.any(t < 0.0):
        raise ValueError("t must be nonnegative")

    lam, t = np.broadcast_arrays(lam, t)
    tg = t**gamma
    z = -lam * tg
    if kind is KernelKind.STATE:
        return ml_array(gamma, 1.0, z)
    if kind is KernelKind.RL_STATE:
        return t ** (gamma - 1.0) * ml_array(gamma, gamma, z)
    if kind is KernelKind.CELL_INTEGRAL:
        return tg * ml_array(gamma, gamma + 1.0, z)
    if kind is KernelKind.CELL_INTEGRAL2:
        return tg * t * ml_array(gamma, gamma + 2.0, z)
    if kind is KernelKind.STATE_INTEGRAL2:
        return t * t * ml_array(gamma, 3.0, z)
    return t * ml_array(gamma, 2.0, z)
