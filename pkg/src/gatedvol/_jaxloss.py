"""JAX backend: the training objective and one Adam step, jit-compiled.

The surface and condition formulas are the ones in :mod:`surface_models`
and :mod:`constraints`, evaluated with ``jax.numpy``; reverse mode then
differentiates them once more in the parameters.
"""

from __future__ import annotations

from functools import partial

import jax

jax.config.update("jax_enable_x64", True)

import jax.numpy as jnp  # noqa: E402
import numpy as np  # noqa: E402
from jax.scipy.special import ndtr  # noqa: E402

from . import constraints as C  # noqa: E402
from .surface_models import WEIGHT_KEYS, split_vector, surface_terms  # noqa: E402

ADAM_B1 = 0.9
ADAM_B2 = 0.999
ADAM_EPS = 1e-8


def _hinge_sum(x):
    return jnp.where(x < 0.0, -x, 0.0).sum()


def _objective(vec, batch, grids, weights, *, arch, dims, eps, penalties):
    alpha, beta, gamma, delta, eta, rho, omega, eps_l4 = (weights[i] for i in range(8))
    a = split_vector(arch, dims, vec)
    m, tau, v = batch
    (v_hat,) = surface_terms(jnp, arch, a, m, tau, eps)
    msle = jnp.mean((jnp.log(v) - jnp.log(v_hat)) ** 2)
    mspe = jnp.mean(((v - v_hat) / v) ** 2)
    l0 = alpha * msle + beta * mspe
    l5 = sum(0.5 * jnp.sum(a[k] ** 2) for k in WEIGHT_KEYS[arch])
    if penalties:
        (m1, t1), (m2, t2), (m3, t3), (m4, t4) = grids
        vv, _, _, vt = surface_terms(jnp, arch, a, m1, t1, eps, derivs=True)
        l1 = _hinge_sum(C.monotonicity_values(t1, vv, vt))
        vv, vm, vmm, _ = surface_terms(jnp, arch, a, m2, t2, eps, derivs=True)
        l2 = _hinge_sum(C.butterfly_values(m2, t2, vv, vm, vmm))
        vv, vm, _, _ = surface_terms(jnp, arch, a, m3, t3, eps, derivs=True)
        c1, c2 = C.boundary_values(jnp, ndtr, m3, t3, vv, vm)
        l3 = _hinge_sum(jnp.where(m3 >= 0.0, c1, c2))
        (vv,) = surface_terms(jnp, arch, a, m4, t4, eps)
        l4 = _hinge_sum(C.asymptotic_values(jnp, m4, t4, vv) - eps_l4)
    else:
        l1 = l2 = l3 = l4 = jnp.zeros(())
    total = l0 + gamma * l1 + delta * l2 + eta * l3 + rho * l4 + omega * l5
    return total, jnp.stack([l0, l1, l2, l3, l4, l5])


_STATIC = ("arch", "dims", "eps", "penalties")


@partial(jax.jit, static_argnames=_STATIC)
def _value_and_grad(vec, batch, grids, weights, *, arch, dims, eps, penalties):
    fn = partial(_objective, arch=arch, dims=dims, eps=eps, penalties=penalties)
    (total, comps), grad = jax.value_and_grad(fn, has_aux=True)(vec, batch, grids, weights)
    return total, comps, grad


@partial(jax.jit, static_argnames=_STATIC)
def _adam_step(vec, mom1, mom2, step, lr, batch, grids, weights, *, arch, dims, eps, penalties):
    fn = partial(_objective, arch=arch, dims=dims, eps=eps, penalties=penalties)
    (total, comps), grad = jax.value_and_grad(fn, has_aux=True)(vec, batch, grids, weights)
    mom1 = ADAM_B1 * mom1 + (1.0 - ADAM_B1) * grad
    mom2 = ADAM_B2 * mom2 + (1.0 - ADAM_B2) * grad * grad
    m_hat = mom1 / (1.0 - ADAM_B1**step)
    v_hat = mom2 / (1.0 - ADAM_B2**step)
    new_vec = vec - lr * m_hat / (jnp.sqrt(v_hat) + ADAM_EPS)
    return new_vec, mom1, mom2, total, comps


def batch_arrays(batch):
    return tuple(jnp.asarray(x) for x in (batch.m, batch.tau, batch.v))


def grid_arrays(grids):
    if grids is None:
        return ()
    return tuple(
        (jnp.asarray(g.m), jnp.asarray(g.tau))
        for g in (grids.monotonicity, grids.butterfly, grids.boundary, grids.asymptotic)
    )


class LossFunction:
    """Objective bound to an architecture and hyperparameters."""

    def __init__(self, arch, dims, eps, hp):
        self.static = dict(arch=arch, dims=dims, eps=float(eps), penalties=hp.has_penalties)
        self.weights = jnp.asarray(hp.weights())

    def value_and_grad(self, vec, batch, grids):
        total, comps, grad = _value_and_grad(
            jnp.asarray(vec), batch_arrays(batch), grid_arrays(grids) if self.static["penalties"] else (),
            self.weights, **self.static,
        )
        return float(total), np.asarray(comps), np.asarray(grad)

    def adam_step(self, vec, mom1, mom2, step, lr, batch_j, grids_j):
        return _adam_step(
            vec, mom1, mom2, jnp.float64(step), jnp.float64(lr), batch_j,
            grids_j if self.static["penalties"] else (), self.weights, **self.static,
        )
