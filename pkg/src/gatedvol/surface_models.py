"""Gated neural implied-volatility surfaces.

Three architectures map ``(m, tau)`` to a volatility:

* ``single``: a sum of smile(m) x sigmoid(tau) units with exponentiated
  output weights plus ``exp(b_hat)``.
* ``multi``: ``I`` single models blended by a softmax gate driven by a
  ``K``-unit sigmoid layer on ``(m, tau)``.
* ``vanilla``: one sigmoid hidden layer on ``(m, tau)`` with the same
  exponentiated output layer.

The math lives in ``surface_terms`` which is written against an array
namespace ``xp`` so that the identical expressions run eagerly under NumPy
and traced under ``jax.numpy`` (for parameter gradients during training).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from .errors import DomainError, ParseError

DEFAULT_EPS = 0.01
RADICAND_FLOOR = 1e-12
SCHEMA_VERSION = 1
ARCHES = ("single", "multi", "vanilla")

SINGLE_KEYS = ("w_bar", "b_bar", "w_tilde", "b_tilde", "w_hat", "b_hat")
GATE_KEYS = ("w_dot", "b_dot", "w_ddot", "b_ddot")
VANILLA_KEYS = ("w1", "w2", "b", "w_hat", "b_hat")
WEIGHT_KEYS = {
    "single": ("w_bar", "w_tilde", "w_hat"),
    "multi": ("w_bar", "w_tilde", "w_hat", "w_dot", "w_ddot"),
    "vanilla": ("w1", "w2", "w_hat"),
}


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def _tanh(xp, x):
    if xp is np:
        return np.tanh(x)
    # XLA's float64 tanh is ~10x slower than exp on CPU; clipped so the
    # gradient never sees inf / inf
    e = xp.exp(2.0 * xp.clip(x, -20.0, 20.0))
    return 1.0 - 2.0 / (e + 1.0)


def _smile(xp, z, eps, order=0):
    t1 = _tanh(xp, z + 0.5)
    t2 = _tanh(xp, -0.5 * z + eps)
    r = z * t1 + t2
    floored = r < RADICAND_FLOOR
    phi = xp.sqrt(xp.where(floored, RADICAND_FLOOR, r))
    if order == 0:
        return phi
    s1 = 1.0 - t1 * t1
    s2 = 1.0 - t2 * t2
    dr = t1 + z * s1 - 0.5 * s2
    d2r = 2.0 * s1 * (1.0 - z * t1) - 0.5 * t2 * s2
    # past the floor the function is constant, so are its derivatives
    dphi = xp.where(floored, 0.0, dr / (2.0 * phi))
    d2phi = xp.where(floored, 0.0, d2r / (2.0 * phi) - dr * dr / (4.0 * phi**3))
    return phi, dphi, d2phi


def _sigmoid(xp, x, order=0):
    s = 1.0 / (1.0 + xp.exp(-xp.clip(x, -700.0, 700.0)))
    if order == 0:
        return s
    ds = s * (1.0 - s)
    return s, ds, ds * (1.0 - 2.0 * s)


def smile_phi(z: float, eps: float = DEFAULT_EPS) -> float:
    """Smile activation ``sqrt(z tanh(z + 1/2) + tanh(-z/2 + eps))``.

    The radicand is floored at 1e-12 before the square root.
    """
    if not (math.isfinite(z) and math.isfinite(eps)):
        raise DomainError("smile_phi needs finite arguments")
    if eps <= 0:
        raise DomainError(f"eps must be positive, got {eps}")
    return float(_smile(np, np.float64(z), eps))


def sigmoid(x: float) -> float:
    if not math.isfinite(x):
        raise DomainError("sigmoid needs a finite argument")
    return float(_sigmoid(np, np.float64(x)))


# ---------------------------------------------------------------------------
# surface kernels
# ---------------------------------------------------------------------------


def _col(x, like):
    return x.reshape(x.shape + (1,) * like.ndim)


def _expert_terms(xp, a, m, tau, eps, derivs):
    """Single-model output(s). Works for ``(J,)`` or stacked ``(I, J)`` arrays."""
    mm, tt = _col(m, a["w_bar"]), _col(tau, a["w_bar"])
    z = mm * a["w_bar"] + a["b_bar"]
    s = tt * a["w_tilde"] + a["b_tilde"]
    scale = xp.exp(a["w_hat"])
    if not derivs:
        phi = _smile(xp, z, eps)
        psi = _sigmoid(xp, s)
        return ((phi * psi * scale).sum(axis=-1) + xp.exp(a["b_hat"]),)
    phi, dphi, d2phi = _smile(xp, z, eps, order=2)
    psi, dpsi, _ = _sigmoid(xp, s, order=2)
    y = (phi * psi * scale).sum(axis=-1) + xp.exp(a["b_hat"])
    psi_c = psi * scale
    y_m = (dphi * a["w_bar"] * psi_c).sum(axis=-1)
    y_mm = (d2phi * a["w_bar"] ** 2 * psi_c).sum(axis=-1)
    y_t = (phi * dpsi * a["w_tilde"] * scale).sum(axis=-1)
    return y, y_m, y_mm, y_t


def _gate(xp, a, m, tau, derivs):
    w_dot = a["w_dot"]
    u = m[:, None] * w_dot[0] + tau[:, None] * w_dot[1] + a["b_dot"]
    if not derivs:
        h = _sigmoid(xp, u)
        logits = h @ a["w_ddot"] + a["b_ddot"]
        logits = logits - logits.max(axis=-1, keepdims=True)
        e = xp.exp(logits)
        return (e / e.sum(axis=-1, keepdims=True),)
    h, dh, d2h = _sigmoid(xp, u, order=2)
    logits = h @ a["w_ddot"] + a["b_ddot"]
    l_m = (dh * w_dot[0]) @ a["w_ddot"]
    l_mm = (d2h * w_dot[0] ** 2) @ a["w_ddot"]
    l_t = (dh * w_dot[1]) @ a["w_ddot"]
    logits = logits - logits.max(axis=-1, keepdims=True)
    e = xp.exp(logits)
    w = e / e.sum(axis=-1, keepdims=True)
    cm = l_m - (w * l_m).sum(axis=-1, keepdims=True)
    ct = l_t - (w * l_t).sum(axis=-1, keepdims=True)
    w_m = w * cm
    w_t = w * ct
    w_mm = w_m * cm + w * (l_mm - (w_m * l_m + w * l_mm).sum(axis=-1, keepdims=True))
    return w, w_m, w_mm, w_t


def surface_terms(xp, arch, a, m, tau, eps=DEFAULT_EPS, derivs=False):
    """Evaluate a surface on 1-D arrays ``m``, ``tau``.

    Returns ``(v,)`` or, with ``derivs``, ``(v, dv/dm, d2v/dm2, dv/dtau)``.
    """
    if arch == "single":
        return _expert_terms(xp, a, m, tau, eps, derivs)
    if arch == "vanilla":
        x = m[:, None] * a["w1"] + tau[:, None] * a["w2"] + a["b"]
        scale = xp.exp(a["w_hat"])
        if not derivs:
            return ((_sigmoid(xp, x) * scale).sum(axis=-1) + xp.exp(a["b_hat"]),)
        s, ds, d2s = _sigmoid(xp, x, order=2)
        v = (s * scale).sum(axis=-1) + xp.exp(a["b_hat"])
        return (
            v,
            (ds * a["w1"] * scale).sum(axis=-1),
            (d2s * a["w1"] ** 2 * scale).sum(axis=-1),
            (ds * a["w2"] * scale).sum(axis=-1),
        )
    if arch == "multi":
        ys = _expert_terms(xp, a, m, tau, eps, derivs)
        ws = _gate(xp, a, m, tau, derivs)
        if not derivs:
            return ((ys[0] * ws[0]).sum(axis=-1),)
        y, y_m, y_mm, y_t = ys
        w, w_m, w_mm, w_t = ws
        return (
            (y * w).sum(axis=-1),
            (y_m * w + y * w_m).sum(axis=-1),
            (y_mm * w + 2.0 * y_m * w_m + y * w_mm).sum(axis=-1),
            (y_t * w + y * w_t).sum(axis=-1),
        )
    raise DomainError(f"unknown architecture {arch!r}")


def _as_inputs(m, tau):
    scalar = np.ndim(m) == 0 and np.ndim(tau) == 0
    m_arr, tau_arr = np.broadcast_arrays(np.asarray(m, dtype=float), np.asarray(tau, dtype=float))
    if not (np.all(np.isfinite(m_arr)) and np.all(np.isfinite(tau_arr))):
        raise DomainError("m and tau must be finite")
    if np.any(tau_arr <= 0.0):
        raise DomainError("tau must be positive")
    return scalar, m_arr.shape, m_arr.ravel(), tau_arr.ravel()


def _shape_out(values, scalar, shape):
    if scalar:
        return tuple(float(x[0]) for x in values)
    return tuple(np.asarray(x).reshape(shape) for x in values)


class SurfaceBase:
    """Common behaviour: evaluation and derivatives on scalars or arrays."""

    arch: str

    def arrays(self) -> dict[str, np.ndarray]:
        raise NotImplementedError

    @property
    def eps_smile(self) -> float:
        return DEFAULT_EPS

    def value(self, m, tau):
        scalar, shape, mf, tf = _as_inputs(m, tau)
        (v,) = surface_terms(np, self.arch, self.arrays(), mf, tf, self.eps_smile)
        return _shape_out((v,), scalar, shape)[0]

    def derivatives(self, m, tau):
        """Return ``(v, dv/dm, d2v/dm2, dv/dtau)``."""
        scalar, shape, mf, tf = _as_inputs(m, tau)
        out = surface_terms(np, self.arch, self.arrays(), mf, tf, self.eps_smile, derivs=True)
        return _shape_out(out, scalar, shape)

    __call__ = value

    @property
    def n_params(self) -> int:
        return sum(int(np.size(x)) for x in self.arrays().values())

    def weight_arrays(self):
        a = self.arrays()
        return [a[k] for k in WEIGHT_KEYS[self.arch]]


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelDims:
    I: int = 1
    J: int = 8
    K: int = 1

    def __post_init__(self):
        for name in ("I", "J", "K"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise DomainError(f"dimension {name} must be a positive integer, got {value!r}")


def _vec(x, n, name):
    arr = np.array(x, dtype=float).reshape(-1)
    if arr.size != n:
        raise DomainError(f"{name} has {arr.size} entries, expected {n}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class SingleModelParams(SurfaceBase):
    w_bar: np.ndarray
    b_bar: np.ndarray
    w_tilde: np.ndarray
    b_tilde: np.ndarray
    w_hat: np.ndarray
    b_hat: float
    eps: float = DEFAULT_EPS

    arch = "single"

    def __post_init__(self):
        J = np.size(self.w_bar)
        for k in SINGLE_KEYS[:-1]:
            object.__setattr__(self, k, _vec(getattr(self, k), J, k))
        object.__setattr__(self, "b_hat", float(self.b_hat))

    @property
    def dims(self) -> ModelDims:
        return ModelDims(I=1, J=self.w_bar.size)

    @property
    def eps_smile(self) -> float:
        return self.eps

    def arrays(self):
        a = {k: getattr(self, k) for k in SINGLE_KEYS[:-1]}
        a["b_hat"] = np.float64(self.b_hat)
        return a


@dataclass(frozen=True, eq=False)
class MultiModelParams(SurfaceBase):
    experts: tuple
    w_dot: np.ndarray
    b_dot: np.ndarray
    w_ddot: np.ndarray
    b_ddot: np.ndarray
    eps: float = DEFAULT_EPS
    _stacked: dict = field(init=False, repr=False, compare=False)

    arch = "multi"

    def __post_init__(self):
        experts = tuple(self.experts)
        if not experts:
            raise DomainError("a multi-model needs at least one expert")
        J = experts[0].w_bar.size
        if any(e.w_bar.size != J for e in experts):
            raise DomainError("all experts must share the hidden width J")
        I = len(experts)
        K = np.size(self.b_dot)
        w_dot = np.array(self.w_dot, dtype=float)
        w_ddot = np.array(self.w_ddot, dtype=float)
        if w_dot.shape != (2, K):
            raise DomainError(f"w_dot must have shape (2, {K}), got {w_dot.shape}")
        if w_ddot.shape != (K, I):
            raise DomainError(f"w_ddot must have shape ({K}, {I}), got {w_ddot.shape}")
        for arr in (w_dot, w_ddot):
            arr.setflags(write=False)
        object.__setattr__(self, "experts", experts)
        object.__setattr__(self, "w_dot", w_dot)
        object.__setattr__(self, "w_ddot", w_ddot)
        object.__setattr__(self, "b_dot", _vec(self.b_dot, K, "b_dot"))
        object.__setattr__(self, "b_ddot", _vec(self.b_ddot, I, "b_ddot"))
        stacked = {k: np.stack([getattr(e, k) for e in experts]) for k in SINGLE_KEYS[:-1]}
        stacked["b_hat"] = np.array([e.b_hat for e in experts])
        stacked.update(w_dot=self.w_dot, b_dot=self.b_dot, w_ddot=self.w_ddot, b_ddot=self.b_ddot)
        object.__setattr__(self, "_stacked", stacked)

    @property
    def dims(self) -> ModelDims:
        return ModelDims(I=len(self.experts), J=self.experts[0].w_bar.size, K=self.b_dot.size)

    @property
    def eps_smile(self) -> float:
        return self.eps

    def arrays(self):
        return dict(self._stacked)


@dataclass(frozen=True, eq=False)
class VanillaModelParams(SurfaceBase):
    w1: np.ndarray
    w2: np.ndarray
    b: np.ndarray
    w_hat: np.ndarray
    b_hat: float

    arch = "vanilla"

    def __post_init__(self):
        J = np.size(self.w1)
        for k in VANILLA_KEYS[:-1]:
            object.__setattr__(self, k, _vec(getattr(self, k), J, k))
        object.__setattr__(self, "b_hat", float(self.b_hat))

    @property
    def dims(self) -> ModelDims:
        return ModelDims(I=1, J=self.w1.size)

    def arrays(self):
        a = {k: getattr(self, k) for k in VANILLA_KEYS[:-1]}
        a["b_hat"] = np.float64(self.b_hat)
        return a


@dataclass(frozen=True)
class ConstantSurface:
    """Flat surface ``v(m, tau) = vol``; the analytic anchor for the conditions."""

    vol: float

    def value(self, m, tau):
        _as_inputs(m, tau)
        return self.derivatives(m, tau)[0]

    def derivatives(self, m, tau):
        scalar, shape, _, _ = _as_inputs(m, tau)
        if scalar:
            return float(self.vol), 0.0, 0.0, 0.0
        v = np.full(shape, float(self.vol))
        zero = np.zeros(shape)
        return v, zero, zero.copy(), zero.copy()

    __call__ = value


# ---------------------------------------------------------------------------
# counting, flattening
# ---------------------------------------------------------------------------


def param_count(arch: str, dims: ModelDims) -> int:
    if arch == "single":
        return 5 * dims.J + 1
    if arch == "vanilla":
        # w1, w2, b, w_hat per unit plus b_hat
        return 4 * dims.J + 1
    if arch == "multi":
        return (5 * dims.J + dims.K + 2) * dims.I + 3 * dims.K
    raise DomainError(f"unknown architecture {arch!r}")


def array_shapes(arch: str, dims: ModelDims) -> dict[str, tuple]:
    J, I, K = dims.J, dims.I, dims.K
    if arch == "single":
        return {k: (J,) for k in SINGLE_KEYS[:-1]} | {"b_hat": ()}
    if arch == "vanilla":
        return {k: (J,) for k in VANILLA_KEYS[:-1]} | {"b_hat": ()}
    if arch == "multi":
        shapes = {k: (I, J) for k in SINGLE_KEYS[:-1]}
        shapes.update(b_hat=(I,), w_dot=(2, K), b_dot=(K,), w_ddot=(K, I), b_ddot=(I,))
        return shapes
    raise DomainError(f"unknown architecture {arch!r}")


def from_arrays(arch: str, a: Mapping[str, Any], eps: float = DEFAULT_EPS):
    """Build a params object from (possibly stacked) named arrays."""
    a = {k: np.asarray(v, dtype=float) for k, v in a.items()}
    if arch == "single":
        return SingleModelParams(*(a[k] for k in SINGLE_KEYS[:-1]), float(a["b_hat"]), eps=eps)
    if arch == "vanilla":
        return VanillaModelParams(*(a[k] for k in VANILLA_KEYS[:-1]), float(a["b_hat"]))
    if arch == "multi":
        I = a["w_bar"].shape[0]
        experts = tuple(
            SingleModelParams(*(a[k][i] for k in SINGLE_KEYS[:-1]), float(a["b_hat"][i]), eps=eps)
            for i in range(I)
        )
        return MultiModelParams(experts, a["w_dot"], a["b_dot"], a["w_ddot"], a["b_ddot"], eps=eps)
    raise DomainError(f"unknown architecture {arch!r}")


def flatten(params) -> np.ndarray:
    """Concatenate every parameter scalar in a fixed, documented order."""
    return np.concatenate([np.ravel(x) for x in params.arrays().values()])


def unflatten(arch: str, dims: ModelDims, vec, eps: float = DEFAULT_EPS):
    return from_arrays(arch, split_vector(arch, dims, vec), eps=eps)


def split_vector(arch: str, dims: ModelDims, vec) -> dict:
    """Slice a flat vector into named arrays (works for NumPy and JAX)."""
    shapes = array_shapes(arch, dims)
    total = sum(int(np.prod(s)) for s in shapes.values())
    if vec.shape != (total,):
        raise DomainError(f"vector has shape {vec.shape}, expected ({total},)")
    out, pos = {}, 0
    for k, s in shapes.items():
        n = int(np.prod(s))
        out[k] = vec[pos : pos + n].reshape(s)
        pos += n
    return out


# ---------------------------------------------------------------------------
# public evaluation helpers
# ---------------------------------------------------------------------------


def eval_single(p: SingleModelParams, m, tau):
    return p.value(m, tau)


def eval_vanilla(p: VanillaModelParams, m, tau):
    return p.value(m, tau)


def eval_multi(p: MultiModelParams, m, tau):
    """Return ``(v_hat, gate weights, expert values)`` at the inputs."""
    scalar, shape, mf, tf = _as_inputs(m, tau)
    a = p.arrays()
    (y,) = _expert_terms(np, a, mf, tf, p.eps, False)
    (w,) = _gate(np, a, mf, tf, False)
    v = (y * w).sum(axis=-1)
    if scalar:
        return float(v[0]), w[0], y[0]
    I = len(p.experts)
    return v.reshape(shape), w.reshape(shape + (I,)), y.reshape(shape + (I,))


def input_derivatives(model, m, tau):
    """``(dv/dm, d2v/dm2, dv/dtau)`` of any surface model."""
    return tuple(model.derivatives(m, tau)[1:])


# ---------------------------------------------------------------------------
# initialisation
# ---------------------------------------------------------------------------


def _glorot(rng, fan_in, fan_out, size):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=size)


def _init_expert(rng, J, eps):
    return SingleModelParams(
        w_bar=_glorot(rng, 1, J, J),
        b_bar=np.zeros(J),
        w_tilde=_glorot(rng, 1, J, J),
        b_tilde=np.zeros(J),
        w_hat=rng.uniform(-3.0, -1.0, size=J),
        b_hat=-2.0,
        eps=eps,
    )


def init_params(dims: ModelDims, arch: str, seed: int, eps: float = DEFAULT_EPS):
    """Seeded Glorot-uniform weights, zero biases, ``w_hat ~ U(-3, -1)``, ``b_hat = -2``."""
    rng = np.random.default_rng(seed)
    J = dims.J
    if arch == "single":
        return _init_expert(rng, J, eps)
    if arch == "vanilla":
        return VanillaModelParams(
            w1=_glorot(rng, 2, J, J),
            w2=_glorot(rng, 2, J, J),
            b=np.zeros(J),
            w_hat=rng.uniform(-3.0, -1.0, size=J),
            b_hat=-2.0,
        )
    if arch == "multi":
        experts = tuple(_init_expert(rng, J, eps) for _ in range(dims.I))
        return MultiModelParams(
            experts,
            w_dot=_glorot(rng, 2, dims.K, (2, dims.K)),
            b_dot=np.zeros(dims.K),
            w_ddot=_glorot(rng, dims.K, dims.I, (dims.K, dims.I)),
            b_ddot=np.zeros(dims.I),
            eps=eps,
        )
    raise DomainError(f"unknown architecture {arch!r}")


# ---------------------------------------------------------------------------
# model files
# ---------------------------------------------------------------------------


def to_document(params, training_meta: Mapping | None = None) -> dict:
    dims = params.dims
    return {
        "schema_version": SCHEMA_VERSION,
        "arch": params.arch,
        "dims": {"I": dims.I, "J": dims.J, "K": dims.K},
        "eps_smile": params.eps_smile,
        "params": {k: np.ravel(v).tolist() for k, v in params.arrays().items()},
        "training_meta": dict(training_meta or {}),
    }


def serialize(params, training_meta: Mapping | None = None) -> str:
    """JSON text; floats are written with ``repr`` so the roundtrip is exact."""
    if getattr(params, "arch", None) == "ssvi":
        from .ssvi import serialize_ssvi

        return serialize_ssvi(params, training_meta)
    return json.dumps(to_document(params, training_meta), indent=2) + "\n"


def _require(doc, key, where="document"):
    if not isinstance(doc, Mapping) or key not in doc:
        raise ParseError(f"missing field {key!r} in {where}")
    return doc[key]


def deserialize(text: str):
    """Inverse of :func:`serialize`.  ``training_meta`` is available on the result via :func:`read_meta`."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"model file is not valid JSON: {exc}") from exc
    arch = _require(doc, "arch")
    if arch == "ssvi":
        from .ssvi import ssvi_from_document

        return ssvi_from_document(doc)
    version = _require(doc, "schema_version")
    if version != SCHEMA_VERSION:
        raise ParseError(f"unsupported schema_version {version!r}")
    if arch not in ARCHES:
        raise ParseError(f"unknown arch {arch!r}")
    raw_dims = _require(doc, "dims")
    try:
        dims = ModelDims(*(int(_require(raw_dims, k, "dims")) for k in ("I", "J", "K")))
    except DomainError as exc:
        raise ParseError(str(exc)) from exc
    eps = float(_require(doc, "eps_smile"))
    raw = _require(doc, "params")
    arrays = {}
    for key, shape in array_shapes(arch, dims).items():
        values = _require(raw, key, "params")
        n = int(np.prod(shape))
        if not isinstance(values, list) or len(values) != n:
            got = len(values) if isinstance(values, list) else type(values).__name__
            raise ParseError(f"params.{key} has length {got}, expected {n} for dims {dims}")
        arrays[key] = np.array(values, dtype=float).reshape(shape)
    return from_arrays(arch, arrays, eps=eps)


def read_meta(text: str) -> dict:
    return dict(json.loads(text).get("training_meta", {}))
