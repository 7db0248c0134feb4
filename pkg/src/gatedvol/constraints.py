"""Static no-arbitrage conditions on an implied-volatility surface.

Every ``model`` argument only needs a ``derivatives(m, tau)`` method returning
``(v, dv/dm, d2v/dm2, dv/dtau)``; network params, :class:`ConstantSurface`,
SSVI surfaces and test stubs all qualify.

Sign conventions: conditions written with ``>=`` count a zero margin as a
pass, the asymptotic slope (strict ``>``) counts zero as a violation.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import erfcx, ndtr

from .errors import DomainError

CORE_M = (-3.0, 3.0)
WINGS_ABS_M = (3.0, 6.0)
TAU_RANGE = (0.002, 3.0)
SQRT_2PI = math.sqrt(2.0 * math.pi)


# ---------------------------------------------------------------------------
# array formulas, shared with the training backend
# ---------------------------------------------------------------------------


def monotonicity_values(tau, v, v_t):
    return v + 2.0 * tau * v_t


def butterfly_values(m, tau, v, v_m, v_mm):
    return (1.0 - m * v_m / v) ** 2 - 0.25 * (v * tau * v_m) ** 2 + tau * v * v_mm


def boundary_values(xp, cdf, m, tau, v, v_m):
    """Return ``(c1, c2)``; callers pick c1 where ``m >= 0`` and c2 elsewhere."""
    sqrt_tau = xp.sqrt(tau)
    s = sqrt_tau * v
    d_minus = -m / s - 0.5 * s
    density = xp.exp(-0.5 * d_minus * d_minus) / SQRT_2PI
    slope = sqrt_tau * v_m * density
    return cdf(d_minus) - slope, cdf(-d_minus) + slope


def boundary_ratios(m, tau, v, v_m):
    """``(c1, c2) / n(d-)``: same signs as :func:`boundary_values` without underflow in the tails."""
    sqrt_tau = np.sqrt(tau)
    s = sqrt_tau * v
    d_minus = -m / s - 0.5 * s
    half_mills = 0.5 * SQRT_2PI
    # erfcx overflows to +inf deep in the favourable tail, which keeps the sign
    with np.errstate(over="ignore"):
        return (half_mills * erfcx(-d_minus / math.sqrt(2.0)) - sqrt_tau * v_m,
                half_mills * erfcx(d_minus / math.sqrt(2.0)) + sqrt_tau * v_m)


def asymptotic_values(xp, m, tau, v):
    return 2.0 * xp.abs(m) - v * v * tau


# ---------------------------------------------------------------------------
# pointwise conditions
# ---------------------------------------------------------------------------


def _point(model, m, tau):
    if np.any(np.asarray(tau) <= 0.0):
        raise DomainError("tau must be positive")
    return model.derivatives(m, tau)


def _out(x):
    return float(x) if np.ndim(x) == 0 else x


def monotonicity_a(model, m, tau):
    """Calendar condition ``v + 2 tau dv/dtau``; satisfied when >= 0."""
    v, _, _, v_t = _point(model, m, tau)
    return _out(monotonicity_values(np.asarray(tau, dtype=float), v, v_t))


def butterfly_b(model, m, tau):
    """Butterfly condition; satisfied when >= 0."""
    v, v_m, v_mm, _ = _point(model, m, tau)
    return _out(butterfly_values(np.asarray(m, dtype=float), np.asarray(tau, dtype=float), v, v_m, v_mm))


def boundaries_c(model, m, tau):
    """Right/left boundary values ``(c1, c2)``.

    For scalar ``m >= 0`` only ``c1`` is returned (``c2`` is ``None``), and
    the reverse for ``m < 0``. Array inputs return both arrays with NaN where
    the condition does not apply.
    """
    v, v_m, _, _ = _point(model, m, tau)
    m_arr = np.asarray(m, dtype=float)
    c1, c2 = boundary_values(np, ndtr, m_arr, np.asarray(tau, dtype=float), v, v_m)
    if np.ndim(c1) == 0:
        return (float(c1), None) if m_arr >= 0.0 else (None, float(c2))
    right = m_arr >= 0.0
    return np.where(right, c1, np.nan), np.where(right, np.nan, c2)


def asymptotic_g(model, m, tau):
    """Asymptotic slope ``2|m| - v^2 tau``; satisfied when strictly > 0."""
    v = _point(model, m, tau)[0]
    return _out(asymptotic_values(np, np.asarray(m, dtype=float), np.asarray(tau, dtype=float), v))


@dataclass(frozen=True)
class LimitCheck:
    points: list
    passed: bool


def limit_dplus(model, tau: float, m_max: float = 6.0, n: int = 200) -> LimitCheck:
    """Trace ``d+(m, tau)`` on ``[0, m_max]``.

    The limit ``d+ -> -inf`` is declared to hold when ``d+`` decreases
    monotonically over the upper half of the range and ends below -1.
    """
    if tau <= 0.0:
        raise DomainError("tau must be positive")
    if m_max < 3.0:
        raise DomainError("m_max must be at least 3")
    m = np.linspace(0.0, m_max, n)
    v = np.asarray(model.derivatives(m, np.full(n, float(tau)))[0])
    s = math.sqrt(tau) * v
    d_plus = -m / s + 0.5 * s
    tail = d_plus[n // 2 :]
    passed = bool(np.all(np.diff(tail) < 0.0) and d_plus[-1] < -1.0)
    return LimitCheck([(float(a), float(b)) for a, b in zip(m, d_plus)], passed)


# ---------------------------------------------------------------------------
# grids and auditing
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ConditionGrid:
    m: np.ndarray
    tau: np.ndarray
    domain_tag: str = "core"

    def __post_init__(self):
        m = np.asarray(self.m, dtype=float).ravel()
        tau = np.asarray(self.tau, dtype=float).ravel()
        if m.shape != tau.shape:
            raise DomainError("grid m and tau must have equal length")
        if self.domain_tag not in ("core", "wings"):
            raise DomainError(f"unknown domain tag {self.domain_tag!r}")
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "tau", tau)

    def __len__(self):
        return self.m.size

    @property
    def points(self):
        return list(zip(self.m.tolist(), self.tau.tolist()))

    def check_domain(self):
        lo, hi = TAU_RANGE
        ok_tau = np.all((self.tau >= lo) & (self.tau <= hi))
        if self.domain_tag == "core":
            ok_m = np.all((self.m >= CORE_M[0]) & (self.m <= CORE_M[1]))
        else:
            a = np.abs(self.m)
            ok_m = np.all((a >= WINGS_ABS_M[0]) & (a <= WINGS_ABS_M[1]))
        return bool(ok_tau and ok_m)


@dataclass(frozen=True)
class GridSet:
    """One grid per penalty term: calendar, butterfly, boundaries, wings."""

    monotonicity: ConditionGrid
    butterfly: ConditionGrid
    boundary: ConditionGrid
    asymptotic: ConditionGrid


def uniform_grid(n: int, domain_tag: str, rng: np.random.Generator) -> ConditionGrid:
    """Draw ``n`` points uniformly on the core or wings domain."""
    tau = rng.uniform(*TAU_RANGE, size=n)
    if domain_tag == "core":
        m = rng.uniform(*CORE_M, size=n)
    else:
        m = rng.uniform(*WINGS_ABS_M, size=n) * rng.choice([-1.0, 1.0], size=n)
    return ConditionGrid(m, tau, domain_tag)


@dataclass(frozen=True)
class ConditionResult:
    name: str
    n_checked: int
    n_violated: int
    rate: float
    worst_margin: float


@dataclass(frozen=True)
class ViolationReport:
    conditions: tuple

    def __getitem__(self, name):
        for c in self.conditions:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self):
        return {"conditions": [asdict(c) for c in self.conditions]}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def rows(self):
        return [(c.name, c.n_checked, c.n_violated, c.rate, c.worst_margin) for c in self.conditions]


def _result(name, values, strict=False, signs=None):
    # ``signs`` (same sign as ``values``) decides violations when ``values`` may underflow
    values = np.asarray(values, dtype=float)
    signs = values if signs is None else np.asarray(signs, dtype=float)
    bad = signs <= 0.0 if strict else signs < 0.0
    bad |= ~np.isfinite(values) | np.isnan(signs)
    n = values.size
    k = int(bad.sum())
    return ConditionResult(name, n, k, k / n if n else 0.0, float(np.min(values)) if n else math.nan)


def audit(model, grids) -> ViolationReport:
    """Count violations of the conditions on the supplied grids.

    Conditions 3, 4, 6 and 7 are checked on every ``core`` grid, condition 8
    on every ``wings`` grid.
    """
    if isinstance(grids, ConditionGrid):
        grids = [grids]
    grids = list(grids.__dict__.values()) if isinstance(grids, GridSet) else list(grids)
    if not grids or any(len(g) == 0 for g in grids):
        raise DomainError("audit needs non-empty grids")
    core = [g for g in grids if g.domain_tag == "core"]
    wings = [g for g in grids if g.domain_tag == "wings"]
    results = []
    if core:
        m = np.concatenate([g.m for g in core])
        tau = np.concatenate([g.tau for g in core])
        v, v_m, v_mm, v_t = model.derivatives(m, tau)
        c1, c2 = boundary_values(np, ndtr, m, tau, v, v_m)
        r1, r2 = boundary_ratios(m, tau, v, v_m)
        right = m >= 0.0
        results += [
            _result("monotonicity", monotonicity_values(tau, v, v_t)),
            _result("butterfly", butterfly_values(m, tau, v, v_m, v_mm)),
            _result("right_boundary", c1[right], signs=r1[right]),
            _result("left_boundary", c2[~right], signs=r2[~right]),
        ]
    if wings:
        m = np.concatenate([g.m for g in wings])
        tau = np.concatenate([g.tau for g in wings])
        v = model.derivatives(m, tau)[0]
        results.append(_result("asymptotic_slope", asymptotic_values(np, m, tau, v), strict=True))
    return ViolationReport(tuple(results))
