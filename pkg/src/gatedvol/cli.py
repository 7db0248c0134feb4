"""Command-line entry points.

Exit codes: 0 success, 1 usage, 2 data or validation, 3 numerical failure.
Every command writes ``manifest_<command>.json`` into ``--out-dir``.
"""

from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import os
import platform
import sys
import time
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConvergenceError, DomainError, GatedVolError, ParseError
from .losses import HyperParams
from .surface_models import ModelDims

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

HP_FLAGS = ("alpha", "beta", "gamma", "delta", "eta", "rho", "omega")
ARCH_CHOICES = ("single", "multi", "vanilla", "ssvi")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# argument types
# ---------------------------------------------------------------------------


def _positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def _nonneg_float(text):
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not value >= 0.0:
        raise argparse.ArgumentTypeError(f"expected a nonnegative number, got {value}")
    return value


def _date(text):
    try:
        return dt.date.fromisoformat(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an ISO date, got {text!r}") from None


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


class Run:
    """Collects inputs/outputs of one command and writes its manifest."""

    def __init__(self, args):
        self.args = args
        self.out_dir = Path(args.out_dir)
        self.inputs, self.outputs = [], []
        self.config = {}
        self.start = time.perf_counter()

    def path(self, name):
        self.out_dir.mkdir(parents=True, exist_ok=True)
        return self.out_dir / name

    def add_input(self, path):
        self.inputs.append(str(path))

    def add_output(self, path):
        self.outputs.append(str(path))
        return path

    def write_manifest(self, status, error=None):
        self.out_dir.mkdir(parents=True, exist_ok=True)
        args = {k: (str(v) if isinstance(v, (Path, dt.date)) else v)
                for k, v in vars(self.args).items() if k != "handler"}
        doc = {
            "command": self.args.command,
            "status": status,
            "error": error,
            "arguments": args,
            "config": self.config,
            "seeds": {"seed": self.args.seed},
            "inputs": [{"path": p, "sha256": _sha256(p) if os.path.isfile(p) else None} for p in self.inputs],
            "outputs": [{"path": p, "sha256": _sha256(p)} for p in self.outputs if os.path.isfile(p)],
            "wall_time_s": round(time.perf_counter() - self.start, 3),
            "version": __version__,
            "python": platform.python_version(),
        }
        target = self.path(f"manifest_{self.args.command.replace('-', '_')}.json")
        target.write_text(json.dumps(doc, indent=2) + "\n")
        return target


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

HP_FIELDS = {f.name for f in fields(HyperParams)}
TRAIN_FIELDS = {"arch", "I", "J", "K", "lr_decay", "log_every", "grid_refresh", "train_fraction"}


def _load_config(path):
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ParseError(f"{path}: config must be a JSON object")
    unknown = set(doc) - HP_FIELDS - TRAIN_FIELDS
    if unknown:
        raise ParseError(f"{path}: unknown config keys {sorted(unknown)}")
    return doc


def _train_config(args, run):
    """Defaults, then ``--config``, then explicit flags."""
    from .training import default_config

    cfg_file = _load_config(args.config)
    if args.config:
        run.add_input(args.config)
    settings = dict(cfg_file)
    for name in ("arch", "I", "J", "K", "lr_decay", "log_every", "grid_refresh", "train_fraction"):
        value = getattr(args, name, None)
        if value is not None:
            settings[name] = value
    hp_over = {k: v for k, v in settings.items() if k in HP_FIELDS}
    for name in HP_FLAGS:
        if getattr(args, name) is not None:
            hp_over[name] = getattr(args, name)
    if args.iters is not None:
        hp_over["n_iterations"] = args.iters
    if args.lr is not None:
        hp_over["learning_rate"] = args.lr

    arch = settings.get("arch", "multi")
    base = default_config(arch if arch != "ssvi" else "single")
    dims = ModelDims(
        I=int(settings.get("I", base.dims.I)),
        J=int(settings.get("J", base.dims.J)),
        K=int(settings.get("K", base.dims.K)),
    )
    if arch in ("single", "vanilla") and dims.I != 1:
        raise UsageError(f"--I applies to the multi model only (got I={dims.I} for {arch})")
    hp = replace(base.hp, **hp_over)
    if args.incomplete_constraints:
        hp = hp.incomplete()
    lr_decay = settings.get("lr_decay", base.lr_decay)
    if lr_decay is not None and lr_decay <= 0:
        lr_decay = None
    config = replace(
        base, hp=hp, arch=arch if arch != "ssvi" else "single", dims=dims, seed=args.seed,
        lr_decay=lr_decay, log_every=int(settings.get("log_every", base.log_every)),
        grid_refresh=settings.get("grid_refresh", base.grid_refresh),
    )
    fraction = float(settings.get("train_fraction", 0.8))
    run.config = {
        "arch": arch, "dims": {"I": dims.I, "J": dims.J, "K": dims.K}, "hyperparameters": hp.to_dict(),
        "lr_decay": config.lr_decay, "log_every": config.log_every, "grid_refresh": config.grid_refresh,
        "train_fraction": fraction,
    }
    return arch, config, fraction


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _load_model(path, run):
    from .surface_models import deserialize

    run.add_input(path)
    return deserialize(Path(path).read_text())


def _points_by_day(points):
    days = defaultdict(list)
    for p in points:
        days[p.trade_date].append(p)
    return dict(sorted(days.items(), key=lambda kv: (kv[0] is None, kv[0] or dt.date.min)))


def _day_tag(date):
    return date.isoformat() if date else "undated"


def _load_day_points(quotes_path, run):
    from .data_pipeline import load_quotes, run_pipeline

    run.add_input(quotes_path)
    quotes, bad_rows = load_quotes(quotes_path)
    points, rejected, failures = run_pipeline(quotes)
    return points, bad_rows, rejected, failures


def _fit_one(payload):
    """Fit one trading day; module-level so worker processes can import it."""
    from .data_pipeline import split_day
    from .losses import DataBatch
    from .ssvi import fit_ssvi
    from .training import fit_day

    arch, config, fraction, points = payload
    if arch == "ssvi":
        train, test = split_day(points, fraction, config.seed)
        return fit_ssvi(DataBatch.from_points(train), seed=config.seed), None, train, test
    fit = fit_day(points, config, train_fraction=fraction)
    return fit.params, fit.trace, fit.train, fit.test


def _training_meta(arch, config, trace, date, n_train, n_test):
    meta = {"trade_date": _day_tag(date), "seed": config.seed, "n_train": n_train, "n_test": n_test}
    if arch != "ssvi":
        meta.update(
            hyperparameters=config.hp.to_dict(), lr_decay=config.lr_decay,
            grid_refresh=config.grid_refresh, best_iteration=trace.best_iteration,
            best_loss=trace.best_loss, iterations=config.hp.n_iterations,
        )
    return meta


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_simulate(args, run):
    from .data_pipeline import PreparedPoint, write_points, write_quotes
    from .ssvi import default_ssvi, synth_market
    from .surface_models import deserialize

    if args.ssvi:
        run.add_input(args.ssvi)
        params = deserialize(Path(args.ssvi).read_text())
        if getattr(params, "arch", None) != "ssvi":
            raise DomainError(f"{args.ssvi} is not an SSVI model file")
    else:
        params = default_ssvi()
    run.config = {"quotes": args.quotes, "noise": args.noise, "days": args.days,
                  "start": args.start.isoformat(), "maturities": args.maturities,
                  "ssvi": {"theta_curve": params.theta_curve, "rho": params.rho, "eta": params.eta_pl}}
    quotes, truth = [], []
    date = args.start
    for day in range(args.days):
        while date.weekday() >= 5:
            date += dt.timedelta(days=1)
        mk = synth_market(params, args.quotes, maturities=args.maturities, noise_sd=args.noise,
                          seed=args.seed + day, trade_date=date)
        offset = len(quotes)
        for q, v in zip(mk.quotes, mk.clean_v):
            q = replace(q, quote_id=offset + q.quote_id)
            fwd = q.spot * np.exp(q.rate * q.tau)
            quotes.append(q)
            truth.append(PreparedPoint(float(np.log(q.strike / fwd)), q.tau, float(v), q.mid, float(fwd),
                                       q.quote_id, q.opt_type, q.discount, q.trade_date))
        date += dt.timedelta(days=1)
    out = Path(args.out) if args.out else run.path("quotes.csv")
    truth_path = Path(args.truth) if args.truth else out.with_name(out.stem + "_truth.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_quotes(quotes, run.add_output(out))
    write_points(truth, run.add_output(truth_path))
    print(f"wrote {len(quotes)} quotes to {out} and ground truth to {truth_path}")


def cmd_fit(args, run):
    from .data_pipeline import write_points, write_rejections
    from .surface_models import serialize

    arch, config, fraction = _train_config(args, run)
    points, bad_rows, rejected, failures = _load_day_points(args.quotes, run)
    for line, reason in bad_rows:
        print(f"skipped line {line}: {reason}", file=sys.stderr)
    write_rejections(rejected, run.add_output(run.path("rejections.csv")))
    counts = defaultdict(int)
    for _, rule in rejected:
        counts[rule] += 1
    if counts:
        print("rejected: " + ", ".join(f"{rule}={n}" for rule, n in sorted(counts.items())))
    for q, reason in failures:
        print(f"inversion failed for quote {q.quote_id}: {reason}", file=sys.stderr)

    days = _points_by_day(points)
    if not days:
        raise DomainError("no usable quotes after filtering")
    payloads = [(arch, config, fraction, pts) for pts in days.values()]
    if args.days_parallel > 1 and len(payloads) > 1:
        import multiprocessing

        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=args.days_parallel, mp_context=ctx) as pool:
            results = list(pool.map(_fit_one, payloads))
    else:
        results = [_fit_one(p) for p in payloads]

    for date, (params, trace, train, test) in zip(days, results):
        tag = f"{_day_tag(date)}_{arch}"
        meta = _training_meta(arch, config, trace, date, len(train), len(test))
        model_path = run.add_output(run.path(f"model_{tag}.json"))
        model_path.write_text(serialize(params, meta))
        write_points(train, run.add_output(run.path(f"train_{tag}.csv")))
        write_points(test, run.add_output(run.path(f"test_{tag}.csv")))
        if trace is not None:
            trace.write(run.add_output(run.path(f"trace_{tag}.csv")), timing=args.trace_timing)
            msg = f"best loss {trace.best_loss:.6g} at iteration {trace.best_iteration}"
        else:
            msg = "ssvi calibrated"
        print(f"{_day_tag(date)}: {len(train)} train / {len(test)} test points; {msg}; model -> {model_path}")


def cmd_predict(args, run):
    from .data_pipeline import read_points
    from .evaluation import surface_grid, write_surface_grid

    model = _load_model(args.model, run)
    if args.points:
        run.add_input(args.points)
        pts = read_points(args.points)
        m = np.array([p.m for p in pts])
        tau = np.array([p.tau for p in pts])
        table = np.column_stack([m, tau, model.value(m, tau)])
    else:
        m_lo, m_hi, t_lo, t_hi = args.grid
        table = surface_grid(model, (m_lo, m_hi), (t_lo, t_hi), args.n_m, args.n_tau)
    out = Path(args.out) if args.out else run.path("predictions.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_surface_grid(table, run.add_output(out))
    print(f"wrote {table.shape[0]} predictions to {out}")


def _audit_report(model, n, seed):
    from .constraints import audit
    from .training import fresh_grids

    return audit(model, fresh_grids(n, seed))


def cmd_evaluate(args, run):
    from .data_pipeline import read_points, split_day
    from .evaluation import EvalReport, evaluate_day

    if args.quotes:
        points, _, _, _ = _load_day_points(args.quotes, run)
        days = {d: split_day(pts, args.train_fraction, args.seed) for d, pts in _points_by_day(points).items()}
    else:
        if not (args.train and args.test):
            raise UsageError("evaluate needs either --quotes or both --train and --test")
        for p in (args.train, args.test):
            run.add_input(p)
        train_days = _points_by_day(read_points(args.train))
        test_days = _points_by_day(read_points(args.test))
        days = {}
        for d in train_days:
            train = [replace(p, discount=float(np.exp(-args.rate * p.tau))) for p in train_days[d]]
            test = [replace(p, discount=float(np.exp(-args.rate * p.tau))) for p in test_days.get(d, [])]
            days[d] = (train, test)
    run.config = {"train_fraction": args.train_fraction, "audit_points": args.audit_points}

    models = {}
    evals = []
    for date, (train, test) in days.items():
        if not test:
            raise DomainError(f"no test points for {_day_tag(date)}")
        if args.model:
            model = models.setdefault(args.model, _load_model(args.model, run))
        else:
            path = Path(args.model_dir) / f"model_{_day_tag(date)}_{args.arch}.json"
            model = _load_model(path, run)
        models[date] = model
        evals.append(evaluate_day(model, train, test, date))
    last = models[list(days)[-1]]
    report = EvalReport.from_days(evals, _audit_report(last, args.audit_points, args.seed))
    out_json = run.add_output(run.path("eval_report.json"))
    out_json.write_text(report.to_json())
    report.write_days(run.add_output(run.path("eval_days.csv")))
    print(f"IV MAPE train {report.iv_mape_train:.4f}% test {report.iv_mape_test:.4f}%; "
          f"price MAPE train {report.price_mape_train:.4f}% test {report.price_mape_test:.4f}%")


def cmd_check(args, run):
    import csv

    from .constraints import limit_dplus

    model = _load_model(args.model, run)
    report = _audit_report(model, args.points, args.seed)
    run.config = {"points": args.points}
    limit = limit_dplus(model, args.limit_tau)
    doc = report.to_dict()
    doc["limit_dplus"] = {"tau": args.limit_tau, "passed": limit.passed}
    out_json = run.add_output(run.path("violations.json"))
    out_json.write_text(json.dumps(doc, indent=2) + "\n")
    out_csv = run.add_output(run.path("violations.csv"))
    with open(out_csv, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("condition", "n_checked", "n_violated", "rate", "worst_margin"))
        for name, n, k, rate, worst in report.rows():
            writer.writerow([name, n, k, f"{rate:.12g}", f"{worst:.12g}"])
    for name, n, k, rate, _ in report.rows():
        print(f"{name:17s} {k:6d} / {n:6d}  ({100 * rate:.3f}%)")
    print(f"limit d+ -> -inf at tau={args.limit_tau}: {'ok' if limit.passed else 'FAILED'}")


def cmd_density(args, run):
    from .evaluation import rn_density, write_density

    model = _load_model(args.model, run)
    grid = np.linspace(args.m_min, args.m_max, args.n)
    run.config = {"tau": args.tau, "m_min": args.m_min, "m_max": args.m_max, "n": args.n}
    for tau in args.tau:
        density = rn_density(model, tau, grid)
        out = run.add_output(run.path(f"density_tau{tau:g}.csv"))
        write_density(density, out)
        print(f"tau={tau:g}: integral {density.integral:.6f}, min density {density.q.min():.3g} -> {out}")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _common():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    common.add_argument("--out-dir", default=".", help="directory for outputs and the manifest")
    common.add_argument("--config", default=None, help="JSON file overriding hyperparameter defaults")
    return common


def _add_training_flags(p):
    p.add_argument("--arch", choices=ARCH_CHOICES, default=None)
    p.add_argument("--I", type=_positive_int, default=None, help="number of experts (multi)")
    p.add_argument("--J", type=_positive_int, default=None, help="hidden units per expert")
    p.add_argument("--K", type=_positive_int, default=None, help="gate hidden units (multi)")
    for name in HP_FLAGS:
        p.add_argument(f"--{name}", type=_nonneg_float, default=None)
    p.add_argument("--iters", type=_positive_int, default=None)
    p.add_argument("--lr", type=_nonneg_float, default=None)
    p.add_argument("--lr-decay", dest="lr_decay", type=float, default=None,
                   help="inverse-time decay constant; 0 keeps the rate fixed")
    p.add_argument("--log-every", dest="log_every", type=_positive_int, default=None)
    p.add_argument("--grid-refresh", dest="grid_refresh", choices=("once", "per_iteration"), default=None)
    p.add_argument("--train-fraction", dest="train_fraction", type=float, default=None)
    p.add_argument("--incomplete-constraints", action="store_true", help="zero gamma, delta, eta and rho")


def build_parser():
    common = _common()
    parser = _Parser(prog="gatedvol", description="Arbitrage-aware neural implied-volatility surfaces.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", parents=[common], help="synthetic quotes from an SSVI surface")
    p.add_argument("--quotes", type=_positive_int, default=600, help="quotes per day")
    p.add_argument("--noise", type=_nonneg_float, default=0.01, help="lognormal vol noise sd")
    p.add_argument("--days", type=_positive_int, default=1, help="number of business days")
    p.add_argument("--start", type=_date, default=dt.date(2016, 1, 11))
    p.add_argument("--maturities", type=_positive_int, nargs="+", default=None, help="maturities in days")
    p.add_argument("--ssvi", default=None, help="SSVI model file (default surface otherwise)")
    p.add_argument("--out", default=None, help="quote file (default <out-dir>/quotes.csv)")
    p.add_argument("--truth", default=None, help="ground-truth points file")
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("fit", parents=[common], help="calibrate one model per trading day")
    p.add_argument("quotes", help="quote file")
    _add_training_flags(p)
    p.add_argument("--days-parallel", type=_positive_int, default=1)
    p.add_argument("--trace-timing", action="store_true",
                   help="keep wall-clock times in trace files (breaks byte-identical reruns)")
    p.set_defaults(handler=cmd_fit)

    p = sub.add_parser("predict", parents=[common], help="evaluate a model on points or a grid")
    p.add_argument("--model", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--points", help="points file (date,m,tau,iv,mid,forward)")
    src.add_argument("--grid", type=float, nargs=4, metavar=("M_MIN", "M_MAX", "TAU_MIN", "TAU_MAX"))
    p.add_argument("--n-m", dest="n_m", type=_positive_int, default=61)
    p.add_argument("--n-tau", dest="n_tau", type=_positive_int, default=31)
    p.add_argument("--out", default=None)
    p.set_defaults(handler=cmd_predict)

    p = sub.add_parser("evaluate", parents=[common], help="MAPE report plus an arbitrage audit")
    which = p.add_mutually_exclusive_group(required=True)
    which.add_argument("--model", help="model file applied to every day")
    which.add_argument("--model-dir", help="directory of model_<date>_<arch>.json files")
    p.add_argument("--arch", choices=ARCH_CHOICES, default="multi")
    p.add_argument("--quotes", help="quote file; the split is redone with --seed")
    p.add_argument("--train", help="training points file")
    p.add_argument("--test", help="test points file")
    p.add_argument("--rate", type=float, default=0.0, help="flat rate for points files")
    p.add_argument("--train-fraction", dest="train_fraction", type=float, default=0.8)
    p.add_argument("--audit-points", type=_positive_int, default=10000)
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("check-arbitrage", parents=[common], help="audit the no-arbitrage conditions")
    p.add_argument("--model", required=True)
    p.add_argument("--points", type=_positive_int, default=10000, help="points per audit grid")
    p.add_argument("--limit-tau", type=float, default=1.0)
    p.set_defaults(handler=cmd_check)

    p = sub.add_parser("density", parents=[common], help="risk-neutral density of log returns")
    p.add_argument("--model", required=True)
    p.add_argument("--tau", type=float, nargs="+", required=True)
    p.add_argument("--m-min", dest="m_min", type=float, default=-1.5)
    p.add_argument("--m-max", dest="m_max", type=float, default=1.0)
    p.add_argument("--n", type=_positive_int, default=801)
    p.set_defaults(handler=cmd_density)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    run = Run(args)
    try:
        if getattr(args, "maturities", None) is None and args.command == "simulate":
            from .ssvi import DEFAULT_MATURITY_DAYS

            args.maturities = list(DEFAULT_MATURITY_DAYS)
        args.handler(args, run)
    except UsageError as exc:
        print(f"gatedvol {args.command}: error: {exc}", file=sys.stderr)
        run.write_manifest("usage_error", str(exc))
        return EXIT_USAGE
    except OSError as exc:
        print(f"gatedvol {args.command}: {exc}", file=sys.stderr)
        run.write_manifest("io_error", str(exc))
        return EXIT_DATA
    except ConvergenceError as exc:
        print(f"gatedvol {args.command}: numerical failure: {exc}", file=sys.stderr)
        run.write_manifest("numerical_error", str(exc))
        return EXIT_NUMERIC
    except GatedVolError as exc:
        print(f"gatedvol {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        run.write_manifest("data_error", str(exc))
        return exc.exit_code
    run.write_manifest("ok")
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
