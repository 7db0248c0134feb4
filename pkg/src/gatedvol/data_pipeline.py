"""Quote ingestion, cleaning and conversion to ``(m, tau, v)`` points.

Input layout (one quote per row)::

    trade_date,expiry_date,strike,bid,ask,type,rate,spot

Dates are ISO-8601, ``type`` is ``C`` or ``P`` and ``rate`` is the
continuously compounded rate to expiry.
"""

from __future__ import annotations

import csv
import datetime as dt
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .bs_engine import forward_from_parity, implied_vol
from .errors import DomainError, FormatError, GatedVolError

ANNUALIZATION_DAYS = 365.0
MIN_MID = 0.375
MIN_TAU = 2.0 / ANNUALIZATION_DAYS
QUOTE_HEADER = ("trade_date", "expiry_date", "strike", "bid", "ask", "type", "rate", "spot")
POINTS_HEADER = ("date", "m", "tau", "iv", "mid", "forward")


@dataclass(frozen=True)
class Quote:
    trade_date: dt.date
    expiry_date: dt.date
    strike: float
    bid: float
    ask: float
    opt_type: str
    rate: float
    spot: float
    quote_id: int = field(default=-1, compare=False)

    def __post_init__(self):
        if self.opt_type not in ("C", "P"):
            raise DomainError(f"option type must be 'C' or 'P', got {self.opt_type!r}")
        if not self.ask >= self.bid >= 0:
            raise DomainError(f"need ask >= bid >= 0, got bid={self.bid}, ask={self.ask}")
        if not self.expiry_date > self.trade_date:
            raise DomainError("expiry must be after the trade date")
        if not self.strike > 0:
            raise DomainError(f"strike must be positive, got {self.strike}")
        if not (math.isfinite(self.rate) and math.isfinite(self.spot) and self.spot > 0):
            raise DomainError("rate must be finite and spot positive")

    @property
    def mid(self) -> float:
        return 0.5 * (self.bid + self.ask)

    @property
    def tau(self) -> float:
        return (self.expiry_date - self.trade_date).days / ANNUALIZATION_DAYS

    @property
    def discount(self) -> float:
        return math.exp(-self.rate * self.tau)

    @property
    def expiry_key(self):
        return self.trade_date, self.expiry_date


@dataclass(frozen=True)
class PreparedPoint:
    m: float
    tau: float
    v: float
    mid: float
    forward: float
    quote_id: int
    opt_type: str = "C"
    discount: float = 1.0
    trade_date: dt.date | None = None

    @property
    def strike(self) -> float:
        return self.forward * math.exp(self.m)


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------


def _parse_row(row, quote_id):
    rec = dict(zip(QUOTE_HEADER, (c.strip() for c in row)))
    return Quote(
        trade_date=dt.date.fromisoformat(rec["trade_date"]),
        expiry_date=dt.date.fromisoformat(rec["expiry_date"]),
        strike=float(rec["strike"]),
        bid=float(rec["bid"]),
        ask=float(rec["ask"]),
        opt_type=rec["type"].upper(),
        rate=float(rec["rate"]),
        spot=float(rec["spot"]),
        quote_id=quote_id,
    )


def load_quotes(path):
    """Read a quote file.

    Returns ``(quotes, rejected)`` where ``rejected`` lists
    ``(line_number, reason)`` for rows that failed validation.

    Raises:
        OSError: the file cannot be read.
        FormatError: the file is empty or the header is wrong.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if any(c.strip() for c in r)]
    if not rows:
        raise FormatError(f"{path}: empty quote file")
    header = tuple(c.strip().lower() for c in rows[0])
    if header != QUOTE_HEADER:
        raise FormatError(f"{path}: header {','.join(header)!r} != {','.join(QUOTE_HEADER)!r}")
    quotes, rejected = [], []
    for line_no, row in enumerate(rows[1:], start=2):
        if len(row) != len(QUOTE_HEADER):
            rejected.append((line_no, f"expected {len(QUOTE_HEADER)} fields, got {len(row)}"))
            continue
        try:
            quotes.append(_parse_row(row, quote_id=len(quotes)))
        except (ValueError, GatedVolError) as exc:
            rejected.append((line_no, str(exc)))
    return quotes, rejected


def _num(x) -> str:
    return repr(float(x))


def write_quotes(quotes, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(QUOTE_HEADER)
        for q in quotes:
            writer.writerow([q.trade_date.isoformat(), q.expiry_date.isoformat(), _num(q.strike),
                             _num(q.bid), _num(q.ask), q.opt_type, _num(q.rate), _num(q.spot)])


# ---------------------------------------------------------------------------
# forwards and filters
# ---------------------------------------------------------------------------


def estimate_forwards(quotes) -> dict:
    """Forward per ``(trade_date, expiry_date)``.

    Uses put-call parity on the call/put pair whose mids are closest (the
    most at-the-money strike); expiries without a pair fall back to
    ``spot * exp(rate * tau)``.
    """
    pairs = defaultdict(dict)
    fallback = {}
    for q in quotes:
        pairs[(q.expiry_key, q.strike)][q.opt_type] = q
        fallback.setdefault(q.expiry_key, q.spot * math.exp(q.rate * q.tau))
    best = {}
    for (key, strike), legs in pairs.items():
        if "C" in legs and "P" in legs:
            c, p = legs["C"], legs["P"]
            gap = abs(c.mid - p.mid)
            if key not in best or gap < best[key][0]:
                best[key] = (gap, forward_from_parity(c.mid, p.mid, strike, c.discount))
    return {key: best[key][1] if key in best else f for key, f in fallback.items()}


@dataclass
class FilterResult:
    kept: list
    rejected: list  # (quote, rule) pairs

    def __iter__(self):
        return iter((self.kept, self.rejected))


def rejection_rule(q: Quote, forward: float) -> str | None:
    if q.tau < MIN_TAU:
        return "maturity"
    if q.mid < MIN_MID:
        return "tick"
    if (q.opt_type == "C" and q.strike < forward) or (q.opt_type == "P" and q.strike > forward):
        return "itm"
    return None


def filter_quotes(quotes, forwards: dict | None = None) -> FilterResult:
    """Drop short-dated, sub-tick and in-the-money quotes.

    Rules are applied in the order maturity (< 2 days), tick (mid < 3/8),
    ITM (against the parity forward); each rejected quote carries the first
    rule it broke.
    """
    quotes = list(quotes)
    if forwards is None:
        forwards = estimate_forwards(quotes)
    kept, rejected = [], []
    for q in quotes:
        rule = rejection_rule(q, forwards[q.expiry_key])
        if rule is None:
            kept.append(q)
        else:
            rejected.append((q, rule))
    return FilterResult(kept, rejected)


def prepare_points(kept, forwards: dict | None = None):
    """Convert filtered quotes to implied-volatility points.

    Returns ``(points, failures)``; ``failures`` lists ``(quote, reason)``
    for quotes whose price could not be inverted.
    """
    kept = list(kept)
    if forwards is None:
        forwards = estimate_forwards(kept)
    points, failures = [], []
    for q in kept:
        fwd = forwards[q.expiry_key]
        m = math.log(q.strike / fwd)
        df = q.discount
        price = q.mid / (df * fwd)
        if q.opt_type == "P":
            price += -math.expm1(m)
        try:
            v = implied_vol(price, m, q.tau)
        except GatedVolError as exc:
            failures.append((q, str(exc)))
            continue
        points.append(PreparedPoint(m, q.tau, v, q.mid, fwd, q.quote_id, q.opt_type, df, q.trade_date))
    return points, failures


def run_pipeline(quotes):
    """Forwards, filters and inversion in one pass.

    Returns ``(points, rejected, failures)``.
    """
    quotes = list(quotes)
    forwards = estimate_forwards(quotes)
    kept, rejected = filter_quotes(quotes, forwards)
    points, failures = prepare_points(kept, forwards)
    return points, rejected, failures


def split_day(points, fraction: float, seed: int):
    """Seeded shuffle, then the first ``round(fraction * n)`` points train."""
    points = list(points)
    if not points:
        raise DomainError("cannot split an empty day")
    if not 0 < fraction < 1:
        raise DomainError(f"fraction must lie strictly between 0 and 1, got {fraction}")
    order = np.random.default_rng(seed).permutation(len(points))
    n_train = int(round(fraction * len(points)))
    return [points[i] for i in order[:n_train]], [points[i] for i in order[n_train:]]


def write_points(points, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(POINTS_HEADER)
        for p in points:
            date = p.trade_date.isoformat() if p.trade_date else ""
            writer.writerow([date, *(_num(x) for x in (p.m, p.tau, p.v, p.mid, p.forward))])


def read_points(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader, ()))
        if header != POINTS_HEADER:
            raise FormatError(f"{path}: header {','.join(header)!r} != {','.join(POINTS_HEADER)!r}")
        out = []
        for i, row in enumerate(reader):
            date = dt.date.fromisoformat(row[0]) if row[0] else None
            m, tau, v, mid, fwd = (float(x) for x in row[1:6])
            out.append(PreparedPoint(m, tau, v, mid, fwd, i, "C" if m >= 0 else "P", 1.0, date))
        return out


def write_rejections(rejected, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("quote_id", "rule", "trade_date", "expiry_date", "strike", "type"))
        for q, rule in rejected:
            writer.writerow([q.quote_id, rule, q.trade_date.isoformat(), q.expiry_date.isoformat(),
                             _num(q.strike), q.opt_type])
