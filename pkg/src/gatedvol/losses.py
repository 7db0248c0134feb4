"""Training objective: data loss, four hinge penalties and weight decay.

``total = l0 + gamma*l1 + delta*l2 + eta*l3 + rho*l4 + omega*l5``

Penalties are plain sums over their grids (not means), so grid sizes scale
the effective penalty weights.

The NumPy functions here accept any surface exposing ``derivatives``. The
parameter gradient runs the same closed-form input derivatives through JAX
reverse mode (see :mod:`gatedvol._jaxloss`).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy.special import ndtr

from . import constraints as C
from .errors import DomainError
from .surface_models import WEIGHT_KEYS


@dataclass(frozen=True)
class HyperParams:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 10.0
    delta: float = 1.0
    eta: float = 10.0
    rho: float = 1.0
    omega: float = 5e-5
    learning_rate: float = 0.1
    n_iterations: int = 20000
    eps_l4: float = 1e-5
    eps_smile: float = 0.01
    synth_ratio: float = 6.0

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "delta", "eta", "rho", "omega"):
            if getattr(self, name) < 0:
                raise DomainError(f"{name} must be non-negative")
        if self.n_iterations < 1:
            raise DomainError("n_iterations must be positive")

    def incomplete(self) -> "HyperParams":
        """Drop the four arbitrage penalties (the ablation setting)."""
        return replace(self, gamma=0.0, delta=0.0, eta=0.0, rho=0.0)

    @property
    def has_penalties(self) -> bool:
        return any(x > 0 for x in (self.gamma, self.delta, self.eta, self.rho))

    def weights(self) -> np.ndarray:
        return np.array(
            [self.alpha, self.beta, self.gamma, self.delta, self.eta, self.rho, self.omega, self.eps_l4]
        )

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True, eq=False)
class DataBatch:
    m: np.ndarray
    tau: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        arrs = [np.asarray(getattr(self, k), dtype=float).ravel() for k in ("m", "tau", "v")]
        if not arrs[0].shape == arrs[1].shape == arrs[2].shape:
            raise DomainError("batch columns must have equal length")
        if np.any(arrs[1] <= 0) or np.any(arrs[2] <= 0):
            raise DomainError("batch needs tau > 0 and v > 0")
        for k, a in zip(("m", "tau", "v"), arrs):
            object.__setattr__(self, k, a)

    @classmethod
    def from_points(cls, points):
        """From ``(m, tau, v)`` triples or objects with those attributes."""
        rows = [(p.m, p.tau, p.v) if hasattr(p, "m") else tuple(p) for p in points]
        arr = np.array(rows, dtype=float).reshape(-1, 3)
        return cls(arr[:, 0], arr[:, 1], arr[:, 2])

    def __len__(self):
        return self.m.size


def _hinge_sum(x):
    x = np.asarray(x, dtype=float)
    return float(np.where(x < 0.0, -x, 0.0).sum())


def _require(grid):
    if grid is None or len(grid) == 0:
        raise DomainError("penalty grids must be non-empty")


def data_loss_l0(model, batch: DataBatch, hp: HyperParams) -> float:
    """Weighted MSLE + MSPE between observed and fitted volatilities."""
    if len(batch) == 0:
        raise DomainError("data loss needs a non-empty batch")
    v_hat = np.asarray(model.value(batch.m, batch.tau))
    msle = np.mean((np.log(batch.v) - np.log(v_hat)) ** 2)
    mspe = np.mean(((batch.v - v_hat) / batch.v) ** 2)
    return float(hp.alpha * msle + hp.beta * mspe)


def penalty_l1(model, grid) -> float:
    _require(grid)
    return _hinge_sum(C.monotonicity_a(model, grid.m, grid.tau))


def penalty_l2(model, grid) -> float:
    _require(grid)
    return _hinge_sum(C.butterfly_b(model, grid.m, grid.tau))


def penalty_l3(model, grid) -> float:
    _require(grid)
    v, v_m, _, _ = C._point(model, grid.m, grid.tau)
    c1, c2 = C.boundary_values(np, ndtr, grid.m, grid.tau, v, v_m)
    r1, r2 = C.boundary_ratios(grid.m, grid.tau, v, v_m)
    # tail underflow can leave c at -1e-313 with a positive true sign; follow the audit
    c1, c2 = np.where(r1 < 0.0, c1, 0.0), np.where(r2 < 0.0, c2, 0.0)
    right = grid.m >= 0.0
    return _hinge_sum(c1[right]) + _hinge_sum(c2[~right])


def penalty_l4(model, grid, eps_l4: float = 1e-5) -> float:
    _require(grid)
    return _hinge_sum(C.asymptotic_g(model, grid.m, grid.tau) - eps_l4)


def regularization_l5(params) -> float:
    """Half the squared Frobenius norm of the weight (not bias) terms."""
    arrays = params.arrays()
    return float(sum(0.5 * np.sum(np.square(arrays[k])) for k in WEIGHT_KEYS[params.arch]))


def total_loss(model, batch: DataBatch, grids, hp: HyperParams):
    """Return ``(total, (l0, l1, l2, l3, l4, l5))``.

    When all four penalty weights are zero the grids are never touched and
    may be ``None``; the penalty components are then reported as 0.
    """
    l0 = data_loss_l0(model, batch, hp)
    if hp.has_penalties:
        l1 = penalty_l1(model, grids.monotonicity)
        l2 = penalty_l2(model, grids.butterfly)
        l3 = penalty_l3(model, grids.boundary)
        l4 = penalty_l4(model, grids.asymptotic, hp.eps_l4)
    else:
        l1 = l2 = l3 = l4 = 0.0
    l5 = regularization_l5(model) if hasattr(model, "arrays") else 0.0
    comps = (l0, l1, l2, l3, l4, l5)
    total = l0 + hp.gamma * l1 + hp.delta * l2 + hp.eta * l3 + hp.rho * l4 + hp.omega * l5
    return float(total), comps


def loss_gradient(params, batch: DataBatch, grids, hp: HyperParams) -> np.ndarray:
    """Exact gradient of :func:`total_loss` in :func:`~gatedvol.surface_models.flatten` order."""
    from . import _jaxloss
    from .surface_models import flatten

    fn = _jaxloss.LossFunction(params.arch, params.dims, params.eps_smile, hp)
    _, _, grad = fn.value_and_grad(flatten(params), batch, grids)
    return np.asarray(grad)


__all__ = [
    "HyperParams",
    "DataBatch",
    "data_loss_l0",
    "penalty_l1",
    "penalty_l2",
    "penalty_l3",
    "penalty_l4",
    "regularization_l5",
    "total_loss",
    "loss_gradient",
]
