"""SSVI benchmark surface with a power-law curvature function.

Total implied variance::

    w(k, tau) = theta/2 * (1 + rho*phi*k + sqrt((phi*k + rho)^2 + 1 - rho^2))
    phi(theta) = eta * theta**(-lambda)

with the ATM total variance ``theta(tau)`` piecewise linear between knots,
pinned to zero at ``tau = 0`` and flat beyond the last knot.
"""

from __future__ import annotations

import datetime as dt
import json
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize, minimize_scalar
from scipy.stats import truncnorm

from .bs_engine import bs_call_forward
from .errors import DomainError, InsufficientDataError, ParseError
from .losses import DataBatch

MIN_FIT_POINTS = 20
N_RESTARTS = 5
RHO_MAX = 0.999


@dataclass(frozen=True, eq=False)
class SsviParams:
    theta_curve: tuple
    rho: float
    eta_pl: float
    lambda_pl: float = 0.5

    arch = "ssvi"

    def __post_init__(self):
        curve = np.array(self.theta_curve, dtype=float).reshape(-1, 2)
        if curve.shape[0] < 1:
            raise DomainError("theta curve needs at least one knot")
        taus, thetas = curve[:, 0], curve[:, 1]
        if np.any(taus <= 0) or np.any(np.diff(taus) <= 0):
            raise DomainError("theta curve maturities must be positive and strictly increasing")
        if np.any(thetas <= 0) or np.any(np.diff(thetas) <= 0):
            raise DomainError("ATM total variance must be positive and strictly increasing")
        if not abs(self.rho) < 1:
            raise DomainError(f"|rho| must be < 1, got {self.rho}")
        if not self.eta_pl > 0:
            raise DomainError(f"eta must be positive, got {self.eta_pl}")
        if not 0 <= self.lambda_pl <= 1:
            raise DomainError(f"lambda must lie in [0, 1], got {self.lambda_pl}")
        if self.lambda_pl == 0.5 and self.eta_pl * (1 + abs(self.rho)) > 2 + 1e-12:
            raise DomainError("eta * (1 + |rho|) must not exceed 2")
        object.__setattr__(self, "theta_curve", tuple(map(tuple, curve.tolist())))
        object.__setattr__(self, "_taus", np.concatenate([[0.0], taus]))
        object.__setattr__(self, "_thetas", np.concatenate([[0.0], thetas]))

    def theta(self, tau):
        """ATM total variance and its slope in ``tau``."""
        tau = np.asarray(tau, dtype=float)
        taus, thetas = self._taus, self._thetas
        theta = np.interp(tau, taus, thetas)
        idx = np.clip(np.searchsorted(taus, tau, side="right") - 1, 0, taus.size - 2)
        slope = (thetas[idx + 1] - thetas[idx]) / (taus[idx + 1] - taus[idx]) if taus.size > 1 else 0.0
        slope = np.where(tau >= taus[-1], 0.0, slope)
        return theta, slope

    def total_variance(self, m, tau):
        theta, _ = self.theta(tau)
        return _w(np.asarray(m, dtype=float), theta, self.rho, self.eta_pl, self.lambda_pl)

    def value(self, m, tau):
        return ssvi_iv(self, m, tau)

    __call__ = value

    def derivatives(self, m, tau):
        """``(v, dv/dm, d2v/dm2, dv/dtau)`` in closed form."""
        m = np.asarray(m, dtype=float)
        tau = np.asarray(tau, dtype=float)
        if np.any(tau <= 0):
            raise DomainError("tau must be positive")
        theta, slope = self.theta(tau)
        rho, lam = self.rho, self.lambda_pl
        phi = self.eta_pl * theta ** (-lam)
        u = phi * m + rho
        root = np.sqrt(u * u + 1 - rho * rho)
        w = 0.5 * theta * (1 + rho * phi * m + root)
        w_k = 0.5 * theta * phi * (rho + u / root)
        w_kk = 0.5 * theta * phi * phi * (1 - rho * rho) / root**3
        dphi = -lam * phi / theta
        w_theta = w / theta + 0.5 * theta * m * dphi * (rho + u / root)
        w_t = slope * w_theta
        v = np.sqrt(w / tau)
        v_m = w_k / (2 * v * tau)
        v_mm = w_kk / (2 * v * tau) - w_k**2 / (4 * v**3 * tau**2)
        v_t = (w_t / tau - w / tau**2) / (2 * v)
        out = (v, v_m, v_mm, v_t)
        if np.ndim(v) == 0:
            return tuple(float(x) for x in out)
        return out


def _w(k, theta, rho, eta, lam):
    phi = eta * theta ** (-lam)
    return 0.5 * theta * (1 + rho * phi * k + np.sqrt((phi * k + rho) ** 2 + 1 - rho * rho))


def ssvi_iv(p: SsviParams, m, tau):
    """Implied volatility ``sqrt(w / tau)``."""
    tau_arr = np.asarray(tau, dtype=float)
    if np.any(tau_arr <= 0) or not np.all(np.isfinite(tau_arr)):
        raise DomainError("tau must be positive and finite")
    v = np.sqrt(p.total_variance(m, tau_arr) / tau_arr)
    return float(v) if np.ndim(v) == 0 else v


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------


def _group_maturities(batch: DataBatch):
    keys = np.round(batch.tau, 10)
    taus = np.unique(keys)
    return taus, [np.flatnonzero(keys == t) for t in taus]


def _atm_total_variance(m, w):
    order = np.argsort(m)
    m, w = m[order], w[order]
    if m[0] <= 0 <= m[-1] and m.size > 1:
        return float(np.interp(0.0, m, w))
    return float(w[np.argmin(np.abs(m))])


def _project(rho, eta):
    rho = float(np.clip(rho, -RHO_MAX, RHO_MAX))
    eta = float(np.clip(eta, 1e-6, 2.0 / (1 + abs(rho))))
    return rho, eta


def _isotonic(y, weights):
    """Pool-adjacent-violators fit of a non-decreasing sequence."""
    blocks = []
    for yi, wi in zip(y, weights):
        blocks.append([yi * wi, wi, 1])
        while len(blocks) > 1 and blocks[-2][0] / blocks[-2][1] > blocks[-1][0] / blocks[-1][1]:
            s, w, n = blocks.pop()
            blocks[-1][0] += s
            blocks[-1][1] += w
            blocks[-1][2] += n
    out = []
    for s, w, n in blocks:
        out += [s / w] * n
    return np.array(out)


def fit_ssvi(batch: DataBatch, seed: int = 0, rounds: int = 3) -> SsviParams:
    """Calibrate SSVI (``lambda = 1/2``) to one day of ``(m, tau, v)`` points.

    ATM variances start from the interpolated total variance at ``m = 0``;
    ``(rho, eta)`` are fitted by Nelder-Mead with seeded restarts on the mean
    squared percentage error of total variance, then each maturity's
    ``theta`` is refined with ``(rho, eta)`` held, alternating ``rounds``
    times. ``theta`` is finally made strictly increasing by isotonic
    projection.
    """
    if len(batch) < MIN_FIT_POINTS:
        raise InsufficientDataError(f"fit_ssvi needs at least {MIN_FIT_POINTS} points, got {len(batch)}")
    taus, groups = _group_maturities(batch)
    w_obs = batch.v**2 * batch.tau
    theta = np.array([_atm_total_variance(batch.m[g], w_obs[g]) for g in groups])
    slot = np.empty(len(batch), dtype=int)
    for i, g in enumerate(groups):
        slot[g] = i

    def mspe(rho, eta, th):
        w = _w(batch.m, th[slot], rho, eta, 0.5)
        return float(np.mean(((w - w_obs) / w_obs) ** 2))

    rng = np.random.default_rng(seed)
    starts = [(-0.5, 1.0)] + [(rng.uniform(-0.9, 0.5), rng.uniform(0.1, 1.5)) for _ in range(N_RESTARTS - 1)]
    rho, eta = starts[0]
    for _ in range(rounds):
        best = (np.inf, rho, eta)
        for x0 in [(rho, eta)] + starts:
            res = minimize(
                lambda x: mspe(*_project(*x), theta), np.array(x0, dtype=float),
                method="Nelder-Mead", options={"xatol": 1e-10, "fatol": 1e-16, "maxiter": 4000},
            )
            if res.fun < best[0]:
                best = (res.fun, *_project(*res.x))
        _, rho, eta = best
        for i, g in enumerate(groups):
            m_i, w_i, t0 = batch.m[g], w_obs[g], theta[i]

            def local(th, m_i=m_i, w_i=w_i):
                return float(np.mean(((_w(m_i, th, rho, eta, 0.5) - w_i) / w_i) ** 2))

            res = minimize_scalar(local, bounds=(0.5 * t0, 2.0 * t0), method="bounded",
                                  options={"xatol": 1e-14 * max(t0, 1e-12) + 1e-16})
            theta[i] = res.x
    counts = np.array([g.size for g in groups], dtype=float)
    theta = _isotonic(theta, counts)
    for i in range(1, theta.size):
        theta[i] = max(theta[i], np.nextafter(theta[i - 1], np.inf) * (1 + 1e-12))
    return SsviParams(tuple(zip(taus.tolist(), theta.tolist())), rho, eta, 0.5)


# ---------------------------------------------------------------------------
# synthetic market
# ---------------------------------------------------------------------------

DEFAULT_MATURITY_DAYS = (7, 14, 30, 60, 91, 182, 365, 730)


def default_ssvi() -> SsviParams:
    """Equity-index-like surface: downward skew, ATM vol rising from 16% to 22%.

    The curve extends to three years so audits over ``tau <= 3`` never reach
    the flat extrapolation.
    """
    knots = np.array([7, 14, 30, 60, 91, 182, 365, 730, 1095]) / 365.0
    atm_vol = np.linspace(0.16, 0.22, knots.size)
    return SsviParams(tuple(zip(knots.tolist(), (atm_vol**2 * knots).tolist())), rho=-0.5, eta_pl=0.8)


@dataclass
class SynthMarket:
    batch: DataBatch
    quotes: list
    clean_v: np.ndarray


def synth_market(
    p: SsviParams,
    n_quotes: int,
    maturities=DEFAULT_MATURITY_DAYS,
    noise_sd: float = 0.0,
    seed: int = 0,
    spot: float = 2000.0,
    rate: float = 0.02,
    trade_date: dt.date = dt.date(2016, 1, 11),
) -> SynthMarket:
    """Sample one trading day of out-of-the-money quotes from an SSVI surface.

    Maturities are whole calendar days. Per maturity, ``m`` follows a normal
    truncated to [-3, 1] centred slightly below the money with a width tied to
    the ATM total standard deviation. Volatilities get multiplicative
    lognormal noise; bid/ask straddle the model mid with a 1% spread.
    """
    from .data_pipeline import Quote

    if n_quotes < 0:
        raise DomainError("n_quotes must be non-negative")
    if noise_sd < 0:
        raise DomainError("noise_sd must be non-negative")
    rng = np.random.default_rng(seed)
    days = [int(d) for d in maturities]
    per = [n_quotes // len(days) + (1 if i < n_quotes % len(days) else 0) for i in range(len(days))]
    ms, taus, vs, clean, quotes = [], [], [], [], []
    for d, n in zip(days, per):
        tau = d / 365.0
        theta, _ = p.theta(tau)
        sd = max(0.05, 2.0 * float(np.sqrt(theta)))
        mu = -0.25 * sd
        a, b = (-3.0 - mu) / sd, (1.0 - mu) / sd
        m = truncnorm.rvs(a, b, loc=mu, scale=sd, size=n, random_state=rng)
        v_clean = np.asarray(ssvi_iv(p, m, np.full(n, tau)))
        v = v_clean * np.exp(noise_sd * rng.standard_normal(n))
        fwd = spot * np.exp(rate * tau)
        df = np.exp(-rate * tau)
        expiry = trade_date + dt.timedelta(days=d)
        for mi, vi in zip(m, v):
            strike = float(fwd * np.exp(mi))
            call = bs_call_forward(float(mi), tau, float(vi))
            if mi >= 0:
                mid, kind = df * fwd * call, "C"
            else:
                mid, kind = df * fwd * (call + np.expm1(mi)), "P"
            mid = float(mid)
            quotes.append(Quote(trade_date, expiry, strike, mid * 0.995, mid * 1.005, kind, float(rate), float(spot),
                                quote_id=len(quotes)))
        ms.append(m)
        taus.append(np.full(n, tau))
        vs.append(v)
        clean.append(v_clean)
    batch = DataBatch(np.concatenate(ms), np.concatenate(taus), np.concatenate(vs))
    return SynthMarket(batch, quotes, np.concatenate(clean))


# ---------------------------------------------------------------------------
# model-file envelope
# ---------------------------------------------------------------------------


def serialize_ssvi(p: SsviParams, training_meta=None) -> str:
    doc = {
        "schema_version": 1,
        "arch": "ssvi",
        "dims": {"n_knots": len(p.theta_curve)},
        "params": {
            "tau": [t for t, _ in p.theta_curve],
            "theta": [th for _, th in p.theta_curve],
            "rho": p.rho,
            "eta": p.eta_pl,
            "lambda": p.lambda_pl,
        },
        "training_meta": dict(training_meta or {}),
    }
    return json.dumps(doc, indent=2) + "\n"


def ssvi_from_document(doc) -> SsviParams:
    params = doc.get("params")
    if not isinstance(params, dict):
        raise ParseError("missing field 'params' in document")
    for key in ("tau", "theta", "rho", "eta", "lambda"):
        if key not in params:
            raise ParseError(f"missing field {key!r} in params")
    if len(params["tau"]) != len(params["theta"]):
        raise ParseError("params.tau and params.theta differ in length")
    try:
        return SsviParams(tuple(zip(params["tau"], params["theta"])), params["rho"], params["eta"], params["lambda"])
    except DomainError as exc:
        raise ParseError(str(exc)) from exc
