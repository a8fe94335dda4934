import numpy as np
import pytest

from rodenet.network import block_param_count
from rodenet.nn_ops import BatchNormParams, ConvParams
from rodenet.odeblock import (BlockParams, block_dynamics, ode_block_forward, plain_block_forward, shortcut,
                              shortcut_vjp)
from rodenet.odesolve import SolverConfig
from rodenet.tensor import ShapeError


def ode_block(c=4, seed=0, zero=False):
    return BlockParams.init(c, c, "ode", 1, np.random.default_rng(seed), zero)


class TestDynamics:
    def test_zero_dynamics_identity(self):
        p = ode_block(zero=True)
        z0 = np.random.default_rng(0).normal(size=(4, 5, 5))
        for method in ("euler", "rk2", "rk4"):
            assert np.array_equal(ode_block_forward(z0, p, SolverConfig(method, 0, 1, 3)), z0)

    def test_shape_preserved(self):
        z = np.random.default_rng(1).normal(size=(2, 4, 6, 6))
        assert block_dynamics(z, 0.3, ode_block(), "dynamic").shape == z.shape

    def test_param_count(self):
        p = BlockParams.init(64, 64, "ode", 1, np.random.default_rng(0))
        assert p.num_params() == 75136 == block_param_count(64, 64, "ode")
        assert 4 * p.num_params() == 300544

    def test_scalar_pipeline(self):
        # C = 1, H = W = 1: only the centre taps touch real data
        w1 = np.zeros((1, 2, 3, 3))
        w2 = np.zeros((1, 2, 3, 3))
        w1[0, 0, 1, 1], w1[0, 1, 1, 1] = 0.7, 0.4
        w2[0, 0, 1, 1], w2[0, 1, 1, 1] = -1.3, 0.2
        bn1 = BatchNormParams(np.array([1.5]), np.array([0.1]), np.array([0.2]), np.array([0.5]))
        bn2 = BatchNormParams(np.array([0.8]), np.array([-0.3]), np.array([-0.1]), np.array([2.0]))
        p = BlockParams(ConvParams(w1), bn1, ConvParams(w2), bn2, "ode", 1, 1)
        z, t = 0.9, 0.25
        u = 0.7 * z + 0.4 * t
        r = max(0.0, 1.5 * (u - 0.2) / np.sqrt(0.5 + bn1.eps) + 0.1)
        u2 = -1.3 * r + 0.2 * t
        want = 0.8 * (u2 + 0.1) / np.sqrt(2.0 + bn2.eps) - 0.3
        got = block_dynamics(np.full((1, 1, 1), z), t, p, "running")
        assert got[0, 0, 0] == pytest.approx(want, rel=1e-12)

    def test_two_step_euler_unroll(self):
        p = ode_block(seed=2)
        z0 = np.random.default_rng(3).normal(size=(4, 5, 5))
        f = lambda z, t: block_dynamics(z, t, p, "dynamic")
        z1 = z0 + 0.5 * f(z0, 0.0)
        z2 = z1 + 0.5 * f(z1, 0.5)
        assert np.array_equal(ode_block_forward(z0, p, SolverConfig("euler", 0, 1, 2), "dynamic"), z2)

    def test_one_residual_step(self):
        p = ode_block(seed=4)
        z0 = np.random.default_rng(5).normal(size=(4, 5, 5))
        got = ode_block_forward(z0, p, SolverConfig("euler", 0, 1, 1), "dynamic", clamp_time=True)
        assert np.array_equal(got, z0 + block_dynamics(z0, 0.0, p, "dynamic"))

    def test_clamped_equals_stacked_plain(self):
        p = ode_block(seed=6)
        plain = BlockParams(ConvParams(p.conv1.weight[:, :-1].copy()), p.bn1,
                            ConvParams(p.conv2.weight[:, :-1].copy()), p.bn2, "plain", 4, 4)
        z = z0 = np.random.default_rng(7).normal(size=(2, 4, 5, 5))
        for _ in range(3):
            z = plain_block_forward(z, plain, "batch")
        got = ode_block_forward(z0, p, SolverConfig("euler", 0, 3, 3), "batch", clamp_time=True)
        assert np.array_equal(got, z)


class TestValidation:
    def test_ode_must_keep_shape(self):
        with pytest.raises(ShapeError):
            BlockParams.init(4, 8, "ode", 2, np.random.default_rng(0))

    def test_weight_shapes(self):
        good = BlockParams.init(4, 4, "plain", 1, np.random.default_rng(0))
        with pytest.raises(ShapeError):
            BlockParams(good.conv1, good.bn1, good.conv2, good.bn2, "ode", 4, 4)

    def test_flavor(self):
        with pytest.raises(ValueError):
            BlockParams.init(4, 4, "dense")

    def test_dynamics_need_ode_block(self):
        with pytest.raises(ValueError):
            block_dynamics(np.zeros((4, 2, 2)), 0.0, BlockParams.init(4, 4, "plain"))


class TestPlain:
    def test_zero_block_is_shortcut(self):
        p = BlockParams.init(4, 4, "plain", 1, zero=True)
        z = np.random.default_rng(0).normal(size=(4, 4, 4))
        assert np.array_equal(plain_block_forward(z, p), z)

    def test_downsample_param_count(self):
        p = BlockParams.init(16, 32, "plain", 2, np.random.default_rng(0))
        assert p.num_params() == 13952

    def test_shortcut_ramp(self):
        z = np.arange(32.0).reshape(2, 4, 4)
        y = shortcut(z, 4, 2)
        assert y.shape == (4, 2, 2)
        assert y[0].tolist() == [[0.0, 2.0], [8.0, 10.0]]
        assert y[1].tolist() == [[16.0, 18.0], [24.0, 26.0]]
        assert np.all(y[2:] == 0)

    def test_shortcut_vjp_adjoint(self):
        rng = np.random.default_rng(1)
        z, g = rng.normal(size=(2, 4, 4)), rng.normal(size=(4, 2, 2))
        assert (shortcut(z, 4, 2) * g).sum() == pytest.approx((z * shortcut_vjp(g, 2, (4, 4), 2)).sum())

    def test_downsample_output_shape(self):
        p = BlockParams.init(4, 8, "plain", 2, np.random.default_rng(0))
        assert plain_block_forward(np.ones((2, 4, 8, 8)), p, "batch").shape == (2, 8, 4, 4)
