"""Error metrics, quarterly aggregation, surface grids and risk-neutral densities."""

from __future__ import annotations

import csv
import datetime as dt
import json
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .bs_engine import bs_call_forward
from .errors import DomainError

MIN_DENSITY_POINTS = 201
DENSITY_SPAN = (-1.5, 1.0)


def mape(true_values, predicted_values) -> float:
    """Mean absolute percentage error, in percent."""
    t = np.asarray(true_values, dtype=float).ravel()
    p = np.asarray(predicted_values, dtype=float).ravel()
    if t.size == 0 or t.size != p.size:
        raise DomainError(f"mape needs equal nonzero lengths, got {t.size} and {p.size}")
    if np.any(~(t > 0.0)):
        raise DomainError("mape needs strictly positive true values")
    return float(100.0 * np.mean(np.abs(t - p) / t))


def _arrays(points, *names):
    return tuple(np.array([getattr(p, name) for p in points], dtype=float) for name in names)


def iv_mape(model, points) -> float:
    points = list(points)
    if not points:
        raise DomainError("iv_mape needs at least one point")
    m, tau, v = _arrays(points, "m", "tau", "v")
    return mape(v, model.value(m, tau))


def predicted_prices(model, points, discount=None) -> np.ndarray:
    """Model prices in currency units for OTM quotes (puts via parity).

    ``discount`` overrides the per-point discount factors (scalar or array).
    """
    points = list(points)
    if not points:
        raise DomainError("no points to price")
    m, tau, fwd = _arrays(points, "m", "tau", "forward")
    df = _arrays(points, "discount")[0] if discount is None else np.broadcast_to(
        np.asarray(discount, dtype=float), m.shape)
    call = bs_call_forward(m, tau, model.value(m, tau))
    is_put = np.array([p.opt_type == "P" for p in points])
    norm = np.where(is_put, call + np.expm1(m), call)
    return norm * fwd * df


def price_mape(model, points, discount=None) -> float:
    """MAPE between model prices and observed mids."""
    points = list(points)
    if not points:
        raise DomainError("price_mape needs at least one point")
    mids = _arrays(points, "mid")[0]
    return mape(mids, predicted_prices(model, points, discount))


def quarter_of(date: dt.date) -> str:
    return f"{date.year}Q{(date.month - 1) // 3 + 1}"


def quarterly(series):
    """``[(quarter, mean), ...]`` in chronological order from ``(date, value)`` pairs."""
    series = list(series)
    if not series:
        raise DomainError("quarterly needs a nonempty series")
    groups = defaultdict(list)
    for date, value in series:
        groups[(date.year, (date.month - 1) // 3 + 1)].append(float(value))
    return [(f"{y}Q{q}", float(np.mean(vals))) for (y, q), vals in sorted(groups.items())]


def surface_grid(model, m_range, tau_range, n_m: int, n_tau: int) -> np.ndarray:
    """``(n_tau * n_m, 3)`` table of ``(m, tau, v)``; ``tau`` outer, ``m`` inner."""
    if n_m < 2 or n_tau < 2:
        raise DomainError("surface_grid needs at least 2 points per axis")
    (m_lo, m_hi), (t_lo, t_hi) = m_range, tau_range
    if not (m_lo < m_hi and 0.0 < t_lo < t_hi):
        raise DomainError(f"bad ranges m={m_range}, tau={tau_range}")
    tt, mm = np.meshgrid(np.linspace(t_lo, t_hi, n_tau), np.linspace(m_lo, m_hi, n_m), indexing="ij")
    m, tau = mm.ravel(), tt.ravel()
    return np.column_stack([m, tau, model.value(m, tau)])


@dataclass(frozen=True)
class Density:
    tau: float
    x: np.ndarray  # log-return level log(S_T / F)
    q: np.ndarray
    integral: float

    def rows(self):
        return list(zip(self.x.tolist(), self.q.tolist()))


def rn_density(model, tau: float, m_grid) -> Density:
    """Risk-neutral density of ``log(S_T / F)`` from the model's call curve.

    With ``c(m)`` the forward-normalised call, the density is
    ``(c'' - c') e^{-m}``; both derivatives are central differences with the
    grid step, so the result covers the interior grid points.
    """
    m = np.asarray(m_grid, dtype=float)
    if not tau > 0.0:
        raise DomainError(f"tau must be positive, got {tau}")
    if m.ndim != 1 or m.size < MIN_DENSITY_POINTS:
        raise DomainError(f"density grid needs at least {MIN_DENSITY_POINTS} points, got {m.size}")
    step = np.diff(m)
    h = (m[-1] - m[0]) / (m.size - 1)
    if not (h > 0.0 and np.allclose(step, h, rtol=1e-6, atol=0.0)):
        raise DomainError("density grid must be uniform and increasing")
    slack = 1e-9
    if m[0] > DENSITY_SPAN[0] + slack or m[-1] < DENSITY_SPAN[1] - slack:
        raise DomainError(f"density grid must span at least {list(DENSITY_SPAN)}")
    c = bs_call_forward(m, np.full_like(m, tau), model.value(m, np.full_like(m, tau)))
    c1 = (c[2:] - c[:-2]) / (2.0 * h)
    c2 = (c[2:] - 2.0 * c[1:-1] + c[:-2]) / (h * h)
    x = m[1:-1]
    q = (c2 - c1) * np.exp(-x)
    return Density(float(tau), x, q, float(np.trapezoid(q, x)))


def write_density(density: Density, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("tau", "x", "density"))
        for x, q in density.rows():
            writer.writerow([repr(density.tau), repr(x), repr(q)])


def write_surface_grid(table, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("m", "tau", "v"))
        writer.writerows([repr(float(a)) for a in row] for row in table)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DayEval:
    date: dt.date | None
    iv_mape_train: float
    iv_mape_test: float
    price_mape_train: float
    price_mape_test: float
    n_train: int
    n_test: int


def evaluate_day(model, train, test, date=None) -> DayEval:
    train, test = list(train), list(test)
    if date is None:
        date = next((p.trade_date for p in train + test if getattr(p, "trade_date", None)), None)
    return DayEval(date, iv_mape(model, train), iv_mape(model, test),
                   price_mape(model, train), price_mape(model, test), len(train), len(test))


METRICS = ("iv_mape_train", "iv_mape_test", "price_mape_train", "price_mape_test")


@dataclass
class EvalReport:
    """Unweighted means of per-day MAPEs, plus quarterly series of the same."""

    days: list
    iv_mape_train: float
    iv_mape_test: float
    price_mape_train: float
    price_mape_test: float
    n_train: int
    n_test: int
    quarters: dict = field(default_factory=dict)  # metric -> [(quarter, mean)]
    violation: object = None  # ViolationReport

    @classmethod
    def from_days(cls, days, violation=None) -> "EvalReport":
        days = list(days)
        if not days:
            raise DomainError("EvalReport needs at least one day")
        means = {k: float(np.mean([getattr(d, k) for d in days])) for k in METRICS}
        dated = [d for d in days if d.date is not None]
        quarters = {k: quarterly([(d.date, getattr(d, k)) for d in dated]) for k in METRICS} if dated else {}
        return cls(days, **means, n_train=sum(d.n_train for d in days),
                   n_test=sum(d.n_test for d in days), quarters=quarters, violation=violation)

    def to_dict(self):
        out = {k: getattr(self, k) for k in METRICS}
        out.update(n_train=self.n_train, n_test=self.n_test, quarters={
            k: [list(row) for row in rows] for k, rows in self.quarters.items()
        })
        out["days"] = [{"date": d.date.isoformat() if d.date else None,
                        **{k: getattr(d, k) for k in (*METRICS, "n_train", "n_test")}} for d in self.days]
        out["violation"] = self.violation.to_dict() if self.violation is not None else None
        return out

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def write_days(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(("date", *METRICS, "n_train", "n_test"))
            for d in self.days:
                writer.writerow([d.date.isoformat() if d.date else "",
                                 *(f"{getattr(d, k):.12g}" for k in METRICS), d.n_train, d.n_test])


def l1_distance(x, a, b) -> float:
    """Trapezoidal L1 distance between two curves sampled on ``x``."""
    return float(np.trapezoid(np.abs(np.asarray(a) - np.asarray(b)), np.asarray(x)))


__all__ = [
    "Density", "DayEval", "EvalReport", "evaluate_day", "iv_mape", "l1_distance", "mape",
    "predicted_prices", "price_mape", "quarter_of", "quarterly", "rn_density", "surface_grid",
    "write_density", "write_surface_grid",
]
