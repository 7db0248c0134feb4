"""Black-Scholes in forward-normalised coordinates.

Prices are expressed as ``C / F`` and strikes as log forward moneyness
``m = log(K / F)``, so rates and dividends drop out of everything except the
conversion of raw quotes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .errors import ArbitrageViolationError, ConvergenceError, DomainError

SQRT_2PI = math.sqrt(2.0 * math.pi)
VOL_LOW = 1e-6
VOL_HIGH = 10.0
MAX_ITER = 200


def _check_finite(**values):
    for name, x in values.items():
        if not math.isfinite(x):
            raise DomainError(f"{name} must be finite, got {x!r}")


def _norm_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def _norm_pdf(x: float) -> float:
    return math.exp(-0.5 * x * x) / SQRT_2PI


def std_normal(x: float) -> tuple[float, float]:
    """Return ``(pdf, cdf)`` of the standard normal distribution at ``x``.

    The cdf goes through ``erfc`` so the lower tail keeps full relative
    precision instead of cancelling against 1.
    """
    x = float(x)
    _check_finite(x=x)
    return _norm_pdf(x), _norm_cdf(x)


@dataclass(frozen=True)
class DPair:
    d_plus: float
    d_minus: float


def d_pair(m: float, tau: float, v: float) -> DPair:
    """Compute ``d+`` and ``d-`` for log forward moneyness ``m``."""
    m, tau, v = float(m), float(tau), float(v)
    _check_finite(m=m, tau=tau, v=v)
    if tau <= 0.0:
        raise DomainError(f"tau must be positive, got {tau}")
    if v <= 0.0:
        raise DomainError(f"v must be positive, got {v}")
    s = math.sqrt(tau) * v
    centre = -m / s
    pair = DPair(centre + 0.5 * s, centre - 0.5 * s)
    # exact up to the rounding of ``centre``
    slack = 4.0 * math.ulp(max(1.0, abs(centre)))
    if abs((pair.d_plus - pair.d_minus) - s) > max(1e-14, slack):
        raise ArithmeticError("d+ - d- drifted from sqrt(tau) * v")
    return pair


def _call_scalar(m: float, s: float) -> float:
    # ITM calls are assembled as intrinsic + OTM put so the time value keeps
    # its relative precision.
    centre = -m / s
    dp, dm = centre + 0.5 * s, centre - 0.5 * s
    if m >= 0.0:
        return _norm_cdf(dp) - math.exp(m) * _norm_cdf(dm)
    put = math.exp(m) * _norm_cdf(-dm) - _norm_cdf(-dp)
    return -math.expm1(m) + put


def bs_call_forward(m, tau, v):
    """Forward-normalised Black-Scholes call price ``N(d+) - e^m N(d-)``.

    Accepts scalars or broadcastable arrays; scalars come back as ``float``.
    """
    if np.ndim(m) == 0 and np.ndim(tau) == 0 and np.ndim(v) == 0:
        m, tau, v = float(m), float(tau), float(v)
        _check_finite(m=m, tau=tau, v=v)
        if tau <= 0.0 or v <= 0.0:
            raise DomainError(f"tau and v must be positive, got tau={tau}, v={v}")
        return _call_scalar(m, math.sqrt(tau) * v)

    m, tau, v = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (m, tau, v)))
    if not (np.all(np.isfinite(m)) and np.all(np.isfinite(tau)) and np.all(np.isfinite(v))):
        raise DomainError("inputs must be finite")
    if np.any(tau <= 0.0) or np.any(v <= 0.0):
        raise DomainError("tau and v must be positive")
    s = np.sqrt(tau) * v
    centre = -m / s
    dp, dm = centre + 0.5 * s, centre - 0.5 * s
    otm_call = ndtr(dp) - np.exp(m) * ndtr(dm)
    itm_call = -np.expm1(m) + (np.exp(m) * ndtr(-dm) - ndtr(-dp))
    return np.where(m >= 0.0, otm_call, itm_call)


def call_vega(m: float, tau: float, v: float) -> float:
    """Derivative of the normalised call price with respect to volatility."""
    pair = d_pair(m, tau, v)
    return math.sqrt(tau) * _norm_pdf(pair.d_plus)


def implied_vol(price_norm: float, m: float, tau: float) -> float:
    """Invert :func:`bs_call_forward` for the volatility.

    Safeguarded Newton inside a bisection bracket on ``[1e-6, 10]``. Newton
    starts at ``sqrt(2|m|/tau)`` where vega peaks, and any step leaving the
    bracket falls back to bisection.

    Raises:
        ArbitrageViolationError: price outside ``(max(0, 1 - e^m), 1)``.
        ConvergenceError: no convergence within 200 iterations, or the
            price needs a volatility outside the bracket.
    """
    price, m, tau = float(price_norm), float(m), float(tau)
    _check_finite(price_norm=price, m=m, tau=tau)
    if tau <= 0.0:
        raise DomainError(f"tau must be positive, got {tau}")
    lower = max(0.0, -math.expm1(m))
    if not lower < price < 1.0:
        raise ArbitrageViolationError(
            f"normalised price {price!r} outside no-arbitrage band ({lower!r}, 1)"
        )

    sqrt_tau = math.sqrt(tau)
    lo, hi = VOL_LOW, VOL_HIGH
    f_lo = _call_scalar(m, sqrt_tau * lo) - price
    f_hi = _call_scalar(m, sqrt_tau * hi) - price
    if f_lo > 0.0 or f_hi < 0.0:
        raise ConvergenceError(
            f"price {price!r} needs a volatility outside [{VOL_LOW}, {VOL_HIGH}]"
        )
    if f_lo == 0.0:
        return lo
    if f_hi == 0.0:
        return hi

    v = math.sqrt(2.0 * abs(m) / tau) if m != 0.0 else 0.2
    v = min(max(v, lo), hi)
    for _ in range(MAX_ITER):
        f = _call_scalar(m, sqrt_tau * v) - price
        if f == 0.0:
            return v
        if f < 0.0:
            lo = v
        else:
            hi = v
        vega = sqrt_tau * _norm_pdf(-m / (sqrt_tau * v) + 0.5 * sqrt_tau * v)
        step = f / vega if vega > 0.0 else math.inf
        candidate = v - step
        if not lo < candidate < hi:
            candidate = 0.5 * (lo + hi)
        if abs(candidate - v) <= 1e-15 * v or hi - lo <= 4.0 * math.ulp(hi):
            return candidate
        v = candidate
    raise ConvergenceError(f"implied_vol did not converge in {MAX_ITER} iterations")


def forward_from_parity(call_mid: float, put_mid: float, strike: float, discount: float) -> float:
    """Forward price implied by put-call parity ``C - P = D (F - K)``."""
    _check_finite(call_mid=call_mid, put_mid=put_mid, strike=strike, discount=discount)
    if strike <= 0.0:
        raise DomainError(f"strike must be positive, got {strike}")
    if discount <= 0.0:
        raise DomainError(f"discount must be positive, got {discount}")
    return strike + (call_mid - put_mid) / discount
