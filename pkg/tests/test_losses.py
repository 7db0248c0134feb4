import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gatedvol._jaxloss import LossFunction
from gatedvol.constraints import ConditionGrid, GridSet, audit, uniform_grid
from gatedvol.errors import DomainError
from gatedvol.losses import (
    DataBatch,
    HyperParams,
    data_loss_l0,
    loss_gradient,
    penalty_l1,
    penalty_l2,
    penalty_l3,
    penalty_l4,
    regularization_l5,
    total_loss,
)
from gatedvol.surface_models import (
    ConstantSurface,
    ModelDims,
    WEIGHT_KEYS,
    SingleModelParams,
    flatten,
    from_arrays,
    init_params,
    unflatten,
)

import oracles


def grids(seed, n=60):
    rng = np.random.default_rng(seed)
    return GridSet(*(uniform_grid(n, "core", rng) for _ in range(3)), uniform_grid(n, "wings", rng))


def batch(seed, n=30):
    rng = np.random.default_rng(seed)
    return DataBatch(rng.uniform(-1, 0.5, n), rng.uniform(0.05, 2, n), rng.uniform(0.1, 0.4, n))


class TestHyperParams:
    def test_defaults(self):
        hp = HyperParams()
        assert (hp.alpha, hp.beta, hp.gamma, hp.delta, hp.eta, hp.rho, hp.omega) == (1, 1, 10, 1, 10, 1, 5e-5)
        assert (hp.learning_rate, hp.n_iterations, hp.eps_l4, hp.eps_smile, hp.synth_ratio) == (0.1, 20000, 1e-5, 0.01, 6)

    def test_incomplete(self):
        hp = HyperParams().incomplete()
        assert (hp.gamma, hp.delta, hp.eta, hp.rho) == (0, 0, 0, 0)
        assert hp.alpha == 1 and hp.omega == 5e-5 and not hp.has_penalties

    def test_negative_weight(self):
        with pytest.raises(DomainError):
            HyperParams(gamma=-1)


class TestDataLoss:
    def test_perfect_fit(self):
        b = DataBatch([0.0, 0.5], [1.0, 2.0], [0.2, 0.2])
        assert data_loss_l0(ConstantSurface(0.2), b, HyperParams()) == 0.0

    def test_hand_example(self):
        b = DataBatch([0.0], [1.0], [0.2])
        got = data_loss_l0(ConstantSurface(0.2 * math.e), b, HyperParams())
        assert got == pytest.approx(1.0 + (1 - math.e) ** 2, rel=1e-14)
        assert got == pytest.approx(1 + 2.9525, abs=5e-5)

    def test_alpha_linearity(self):
        b = batch(0)
        model = ConstantSurface(0.25)
        msle = data_loss_l0(model, b, HyperParams(alpha=1, beta=0))
        assert data_loss_l0(model, b, HyperParams(alpha=2, beta=0)) == pytest.approx(2 * msle, rel=1e-15)
        mspe = data_loss_l0(model, b, HyperParams(alpha=0, beta=1))
        assert data_loss_l0(model, b, HyperParams()) == pytest.approx(msle + mspe, rel=1e-14)

    def test_empty(self):
        with pytest.raises(DomainError):
            data_loss_l0(ConstantSurface(0.2), DataBatch([], [], []), HyperParams())

    def test_bad_batch(self):
        with pytest.raises(DomainError):
            DataBatch([0.0], [0.0], [0.2])
        with pytest.raises(DomainError):
            DataBatch([0.0], [1.0], [-0.2])


class TestPenalties:
    @given(st.integers(0, 10_000), st.floats(0.05, 1.0))
    def test_constant_surface_zero(self, seed, c):
        g = grids(seed, 200)
        s = ConstantSurface(c)
        assert penalty_l1(s, g.monotonicity) == penalty_l2(s, g.butterfly) == penalty_l3(s, g.boundary) == 0.0

    def test_l4_example(self):
        assert penalty_l4(ConstantSurface(0.2), ConditionGrid([3.0], [1.0], "wings")) == 0.0

    def test_l4_margin(self):
        # g = 12 - 12 = 0, shifted by eps_l4
        assert penalty_l4(ConstantSurface(2.0), ConditionGrid([6.0], [3.0], "wings")) == pytest.approx(1e-5, rel=1e-9)

    def test_l1_hinge_sum(self):
        stub = oracles.StubSurface(0.5, v_t=lambda m, t: -0.5 / t)
        g = ConditionGrid([0.1, -0.2, 1.0], [0.5, 1.0, 2.0])
        assert penalty_l1(stub, g) == pytest.approx(1.5, rel=1e-14)

    def test_l2_l3_hinge_sums(self):
        stub = oracles.StubSurface(0.2, v_m=10.0, v_mm=-10.0)
        g = ConditionGrid([0.0, 0.0], [1.0, 1.0])
        # b = 1 - 0.25 * 4 - 2 = -2 at each point; c1 = N(-0.1) - 10 n(-0.1)
        assert penalty_l2(stub, g) == pytest.approx(4.0, rel=1e-14)
        assert penalty_l3(stub, g) == pytest.approx(2 * (10 * oracles.npdf(0.1) - oracles.ncdf(-0.1)), rel=1e-12)

    @pytest.mark.parametrize("arch", ["single", "multi", "vanilla"])
    def test_nonnegative_and_consistent_with_audit(self, arch):
        dims = ModelDims(2, 2, 2) if arch == "multi" else ModelDims(J=4)
        for seed in range(6):
            p = oracles.violating_model(arch, dims, seed) if seed % 2 else init_params(dims, arch, seed)
            g = grids(seed, 300)
            pens = [penalty_l1(p, g.monotonicity), penalty_l2(p, g.butterfly), penalty_l3(p, g.boundary), penalty_l4(p, g.asymptotic, 0.0)]
            assert all(x >= 0 for x in pens)
            rep = audit(p, [g.monotonicity])
            assert (pens[0] == 0) == (rep["monotonicity"].n_violated == 0)
            rep = audit(p, [g.butterfly])
            assert (pens[1] == 0) == (rep["butterfly"].n_violated == 0)
            rep = audit(p, [g.boundary])
            assert (pens[2] == 0) == (rep["right_boundary"].n_violated + rep["left_boundary"].n_violated == 0)

    def test_tail_underflow_not_penalised(self):
        rng = np.random.default_rng(0)
        g = ConditionGrid(rng.uniform(2.5, 3, 500), rng.uniform(0.002, 0.01, 500))
        assert penalty_l3(ConstantSurface(0.05), g) == 0.0

    def test_empty_grid(self):
        with pytest.raises(DomainError):
            penalty_l1(ConstantSurface(0.2), ConditionGrid([], []))


class TestRegularization:
    def test_zero(self):
        z = np.zeros(3)
        assert regularization_l5(SingleModelParams(z, z + 5, z, z + 1, z, 7.0)) == 0.0

    def test_single_weight(self):
        p = SingleModelParams([2.0], [9.0], [0.0], [9.0], [0.0], 9.0)
        assert regularization_l5(p) == 2.0

    @pytest.mark.parametrize("arch", ["single", "multi", "vanilla"])
    @given(c=st.floats(0.1, 10))
    def test_homogeneous(self, arch, c):
        dims = ModelDims(2, 3, 2) if arch == "multi" else ModelDims(J=3)
        p = init_params(dims, arch, 1)
        a = p.arrays()
        scaled = {k: (np.asarray(v) * c if k in WEIGHT_KEYS[arch] else v) for k, v in a.items()}
        assert regularization_l5(from_arrays(arch, scaled)) == pytest.approx(c * c * regularization_l5(p), rel=1e-12)

    def test_biases_excluded(self):
        p = init_params(ModelDims(2, 2, 2), "multi", 0)
        a = p.arrays()
        moved = dict(a, b_bar=a["b_bar"] + 3, b_tilde=a["b_tilde"] - 1, b_hat=a["b_hat"] + 2, b_dot=a["b_dot"] + 1, b_ddot=a["b_ddot"] + 4)
        assert regularization_l5(from_arrays("multi", moved)) == regularization_l5(p)


class TestTotal:
    def test_components_sum(self):
        p = oracles.violating_model("multi", ModelDims(2, 2, 2), 3)
        hp = HyperParams()
        total, c = total_loss(p, batch(1), grids(2), hp)
        w = (1, hp.gamma, hp.delta, hp.eta, hp.rho, hp.omega)
        assert abs(total - sum(a * b for a, b in zip(w, c))) <= 1e-12 * max(1.0, abs(total))
        assert all(x >= 0 for x in c[1:])

    def test_incomplete_ignores_grids(self):
        p = oracles.violating_model("single", ModelDims(J=4), 3)
        hp = HyperParams().incomplete()
        b = batch(1)
        total, c = total_loss(p, b, None, hp)
        assert c[1:5] == (0.0, 0.0, 0.0, 0.0)
        assert total == pytest.approx(data_loss_l0(p, b, hp) + hp.omega * regularization_l5(p), rel=1e-15)

    def test_constant_fit_zero(self):
        z = np.zeros(2)
        p = SingleModelParams(z, z, z, z, z, math.log(0.15))
        b = DataBatch([0.0, 1.0], [0.5, 1.0], [p.value(0.0, 0.5), p.value(1.0, 1.0)])
        total, c = total_loss(p, b, grids(0), HyperParams())
        assert c[0] == 0.0 and c[5] == 0.0 and total == 0.0

    def test_deterministic(self):
        p = oracles.violating_model("vanilla", ModelDims(J=4), 1)
        assert total_loss(p, batch(1), grids(1), HyperParams()) == total_loss(p, batch(1), grids(1), HyperParams())

    @pytest.mark.parametrize("arch", ["single", "multi", "vanilla"])
    def test_jax_objective_matches_numpy(self, arch):
        dims = ModelDims(2, 2, 2) if arch == "multi" else ModelDims(J=4)
        p = oracles.violating_model(arch, dims, 5)
        hp = HyperParams()
        b, g = batch(5), grids(5)
        total, comps = total_loss(p, b, g, hp)
        jt, jc, _ = LossFunction(arch, dims, p.eps_smile, hp).value_and_grad(flatten(p), b, g)
        np.testing.assert_allclose(jc, comps, rtol=1e-11, atol=1e-13)
        assert jt == pytest.approx(total, rel=1e-11)


class TestGradient:
    def test_zero_weights_l5_gradient(self):
        z = np.zeros(3)
        p = SingleModelParams(z, z, z, z, z, -2.0)
        hp = HyperParams(alpha=0, beta=0, gamma=0, delta=0, eta=0, rho=0, omega=1.0)
        assert not np.any(loss_gradient(p, batch(0), None, hp))

    @pytest.mark.parametrize("arch", ["single", "multi", "vanilla"])
    def test_matches_finite_difference(self, arch):
        dims = ModelDims(2, 2, 2) if arch == "multi" else ModelDims(J=3)
        p = oracles.violating_model(arch, dims, 17)
        hp = HyperParams()
        b, g = batch(2, 20), grids(3, 40)
        vec = flatten(p)
        grad = loss_gradient(p, b, g, hp)
        h = 1e-6
        fd = np.empty_like(vec)
        for i in range(vec.size):
            e = np.zeros_like(vec)
            e[i] = h
            fd[i] = (total_loss(unflatten(arch, dims, vec + e), b, g, hp)[0] - total_loss(unflatten(arch, dims, vec - e), b, g, hp)[0]) / (2 * h)
        ok, worst = oracles.within(grad, fd, 1e-4, 1e-6)
        assert ok, worst
