"""Penalty-grid sampling and the full-batch Adam calibration loop."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .constraints import ConditionGrid, GridSet, uniform_grid
from .errors import DivergenceError, DomainError, InsufficientDataError
from .losses import DataBatch, HyperParams
from .surface_models import ModelDims, flatten, init_params, unflatten

MIN_DAY_QUOTES = 50
TRACE_COLUMNS = ("iteration", "total", "l0", "l1", "l2", "l3", "l4", "l5", "lr", "elapsed_ms")


@dataclass(frozen=True)
class TrainConfig:
    hp: HyperParams = field(default_factory=HyperParams)
    arch: str = "multi"
    dims: ModelDims = field(default_factory=lambda: ModelDims(I=4, J=8, K=5))
    seed: int = 0
    log_every: int = 100
    grid_refresh: str = "once"
    # inverse-time decay constant; None keeps the learning rate fixed
    lr_decay: float | None = 5000.0

    def __post_init__(self):
        if self.grid_refresh not in ("once", "per_iteration"):
            raise DomainError(f"grid_refresh must be 'once' or 'per_iteration', got {self.grid_refresh!r}")
        if self.log_every < 1:
            raise DomainError("log_every must be positive")

    def learning_rate(self, iteration: int) -> float:
        lr0 = self.hp.learning_rate
        if self.lr_decay is None:
            return lr0
        return lr0 / (1.0 + iteration / self.lr_decay)


def default_config(arch: str = "multi", **overrides) -> TrainConfig:
    """Table-2 style configuration: multi (4, 8, 5), single/vanilla J=32."""
    dims = ModelDims(I=4, J=8, K=5) if arch == "multi" else ModelDims(I=1, J=32, K=1)
    return replace(TrainConfig(arch=arch, dims=dims), **overrides)


CI_ITERATIONS = 2000
CI_LR_DECAY = 500.0


def ci_config(arch: str = "multi", seed: int = 0, **overrides) -> TrainConfig:
    """Short profile for continuous integration: 2000 iterations, decay constant 500.

    Everything else matches :func:`default_config`; the faster decay lets the
    shortened run settle instead of stopping mid-oscillation.
    """
    base = default_config(arch)
    hp = replace(base.hp, n_iterations=CI_ITERATIONS)
    return replace(base, hp=hp, seed=seed, lr_decay=CI_LR_DECAY, **overrides)


@dataclass
class TraceRecord:
    iteration: int
    total: float
    components: tuple
    lr: float
    elapsed_ms: float


@dataclass
class TrainTrace:
    records: list = field(default_factory=list)
    best_iteration: int = -1
    best_loss: float = math.inf

    def append(self, record: TraceRecord):
        if self.records and record.iteration < self.records[-1].iteration:
            raise ValueError("trace iterations must be non-decreasing")
        self.records.append(record)

    def rows(self, timing: bool = True):
        for r in self.records:
            row = [str(r.iteration), *(f"{x:.12g}" for x in (r.total, *r.components, r.lr))]
            row.append(f"{r.elapsed_ms:.3f}" if timing else "0")
            yield row

    def write(self, path, timing: bool = True):
        """Delimited text; ``timing=False`` zeroes the wall-clock column so reruns compare bytewise."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(TRACE_COLUMNS)
            writer.writerows(self.rows(timing))


def _unique_uniform(rng, lo, hi, n):
    x = rng.uniform(lo, hi, size=n)
    while np.unique(x).size < n:
        x = rng.uniform(lo, hi, size=n)
    return x


def sample_grids(n_real: int, ratio: float, seed: int) -> GridSet:
    """Synthetic penalty points: ``round(ratio * n_real)`` split over four grids.

    Core grids draw ``m`` on [-3, 3], the wings grid draws ``|m|`` on [3, 6]
    with a random sign; ``tau`` is uniform on [0.002, 3] throughout.
    """
    if n_real <= 0 or ratio <= 0:
        raise DomainError("sample_grids needs n_real > 0 and ratio > 0")
    rng = np.random.default_rng(seed)
    total = int(round(ratio * n_real))
    sizes = [total // 4 + (1 if i < total % 4 else 0) for i in range(4)]
    grids = []
    for size, tag in zip(sizes, ("core", "core", "core", "wings")):
        size = max(size, 1)
        tau = _unique_uniform(rng, 0.002, 3.0, size)
        if tag == "core":
            m = _unique_uniform(rng, -3.0, 3.0, size)
        else:
            m = _unique_uniform(rng, 3.0, 6.0, size) * rng.choice([-1.0, 1.0], size=size)
        grids.append(ConditionGrid(m, tau, tag))
    return GridSet(*grids)


def fresh_grids(n: int, seed: int) -> list:
    """``[core, wings]`` audit grids of ``n`` points each, independent of any training grids."""
    rng = np.random.default_rng(seed)
    return [uniform_grid(n, "core", rng), uniform_grid(n, "wings", rng)]


def adam_fit(config: TrainConfig, batch: DataBatch, grids: GridSet | None = None):
    """Calibrate a fresh model to ``batch`` with full-batch Adam.

    Returns ``(params, trace)`` where ``params`` has the lowest total loss
    seen over the run (the loss at every iterate is computed anyway).

    Raises:
        DivergenceError: the loss became non-finite.
    """
    from . import _jaxloss
    import jax.numpy as jnp

    if len(batch) == 0:
        raise DomainError("adam_fit needs a non-empty batch")
    hp = config.hp
    params = init_params(config.dims, config.arch, config.seed, eps=hp.eps_smile)
    penalties = hp.has_penalties
    grid_rng = np.random.default_rng([config.seed, 1])
    if penalties and grids is None:
        grids = sample_grids(len(batch), hp.synth_ratio, int(grid_rng.integers(2**31)))
    loss = _jaxloss.LossFunction(config.arch, config.dims, hp.eps_smile, hp)
    batch_j = _jaxloss.batch_arrays(batch)
    grids_j = _jaxloss.grid_arrays(grids) if penalties else ()

    vec = jnp.asarray(flatten(params))
    mom1 = jnp.zeros_like(vec)
    mom2 = jnp.zeros_like(vec)
    trace = TrainTrace()
    best_vec, best_loss, best_it = vec, math.inf, -1
    start = time.perf_counter()
    n_iter = hp.n_iterations
    for it in range(n_iter + 1):
        lr = config.learning_rate(it)
        if penalties and config.grid_refresh == "per_iteration" and it > 0:
            grids_j = _jaxloss.grid_arrays(
                sample_grids(len(batch), hp.synth_ratio, int(grid_rng.integers(2**31)))
            )
        new_vec, mom1_n, mom2_n, total, comps = loss.adam_step(
            vec, mom1, mom2, it + 1, lr, batch_j, grids_j
        )
        total = float(total)
        if not math.isfinite(total):
            raise DivergenceError(it, np.asarray(comps))
        if total < best_loss:
            best_vec, best_loss, best_it = vec, total, it
        if it % config.log_every == 0 or it == n_iter:
            elapsed = (time.perf_counter() - start) * 1e3
            trace.append(TraceRecord(it, total, tuple(float(c) for c in np.asarray(comps)), lr, elapsed))
        if it == n_iter:
            # the last pass only scores the final iterate
            break
        vec, mom1, mom2 = new_vec, mom1_n, mom2_n
    trace.best_iteration, trace.best_loss = best_it, best_loss
    fitted = unflatten(config.arch, config.dims, np.asarray(best_vec), eps=hp.eps_smile)
    return fitted, trace


@dataclass
class DayFit:
    params: object
    trace: TrainTrace
    train: list
    test: list
    grids: GridSet | None


def fit_day(points, config: TrainConfig, train_fraction: float = 0.8, split_seed: int | None = None) -> DayFit:
    """Split one day's prepared points 80/20 and calibrate on the training part.

    ``points`` are :class:`~gatedvol.data_pipeline.PreparedPoint` objects (or
    anything with ``m``, ``tau``, ``v``).
    """
    from .data_pipeline import split_day

    points = list(points)
    if len(points) < MIN_DAY_QUOTES:
        raise InsufficientDataError(
            f"{len(points)} usable quotes; at least {MIN_DAY_QUOTES} needed for a stable calibration"
        )
    seed = config.seed if split_seed is None else split_seed
    train, test = split_day(points, train_fraction, seed)
    params, trace = adam_fit(config, DataBatch.from_points(train))
    grids = None
    if config.hp.has_penalties:
        grids = sample_grids(len(train), config.hp.synth_ratio,
                             int(np.random.default_rng([config.seed, 1]).integers(2**31)))
    return DayFit(params, trace, train, test, grids)
