import numpy as np
import pytest

from rodenet import fixedpoint as fx
from rodenet.nn_ops import (BatchNormParams, HeadParams, batchnorm_forward, conv2d_forward, head_forward, relu,
                            softmax, vjp)
from rodenet.tensor import ShapeError


def direct_conv(x, w, s):
    """Six nested loops over (o, i, j, c, u, v)."""
    cin, h, wd = x.shape
    cout = w.shape[0]
    y = np.zeros((cout, h // s, wd // s))
    for o in range(cout):
        for i in range(h // s):
            for j in range(wd // s):
                acc = 0.0
                for c in range(cin):
                    for u in range(3):
                        for v in range(3):
                            r, q = i * s + u - 1, j * s + v - 1
                            if 0 <= r < h and 0 <= q < wd:
                                acc += w[o, c, u, v] * x[c, r, q]
                y[o, i, j] = acc
    return y


class TestConv:
    def test_zero_input(self):
        w = np.random.default_rng(0).normal(size=(3, 2, 3, 3))
        assert np.all(conv2d_forward(np.zeros((2, 4, 4)), w) == 0)

    def test_identity_kernel(self):
        x = np.random.default_rng(1).normal(size=(1, 5, 5))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1
        assert np.array_equal(conv2d_forward(x, w), x)

    @pytest.mark.parametrize("stride", [1, 2])
    def test_matches_direct_loops(self, stride):
        rng = np.random.default_rng(2)
        x, w = rng.normal(size=(2, 4, 4)), rng.normal(size=(3, 2, 3, 3))
        np.testing.assert_allclose(conv2d_forward(x, w, stride), direct_conv(x, w, stride), rtol=1e-12, atol=1e-12)

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            conv2d_forward(np.zeros((2, 4, 4)), np.zeros((3, 3, 3, 3)))
        with pytest.raises(ShapeError):
            conv2d_forward(np.zeros((2, 5, 5)), np.zeros((3, 2, 3, 3)), 2)

    def test_q20_within_rounding_bound(self):
        rng = np.random.default_rng(3)
        x, w = rng.uniform(-4, 4, size=(4, 6, 6)), rng.uniform(-1, 1, size=(5, 4, 3, 3))
        xq, wq = fx.array_from_float(x), fx.array_from_float(w)
        yq = fx.array_to_float(conv2d_forward(xq, wq))
        ref = conv2d_forward(fx.array_to_float(xq), fx.array_to_float(wq))
        # products are exact and rounded once per output pixel
        assert np.abs(yq - ref).max() <= 0.5 * fx.ULP
        macs = 4 * 9
        bound = (macs + 2) * fx.ULP * np.abs(x).max() * np.abs(w).max()
        assert np.abs(yq - conv2d_forward(x, w)).max() <= bound

    def test_q20_accepts_float_weights(self):
        rng = np.random.default_rng(4)
        x, w = rng.uniform(-2, 2, size=(2, 4, 4)), rng.normal(size=(3, 2, 3, 3))
        a = conv2d_forward(fx.array_from_float(x), w)
        b = conv2d_forward(fx.array_from_float(x), fx.array_from_float(w))
        assert np.array_equal(a, b)

    def test_q20_saturates(self):
        x = fx.array_from_float(np.full((4, 3, 3), 1000.0))
        c = fx.SaturationCounter()
        y = conv2d_forward(x, fx.array_from_float(np.ones((1, 4, 3, 3))), counter=c)
        assert y.max() == fx.RAW_MAX and c.count > 0


class TestBatchNorm:
    def test_constant_channel_dynamic(self):
        p = BatchNormParams.identity(2)
        y = batchnorm_forward(np.full((2, 4, 4), 3.0), p, "dynamic")
        assert np.all(np.abs(y) <= 3.0 / np.sqrt(p.eps))
        assert np.allclose(y, 0)

    def test_identity_running_stats(self):
        x = np.random.default_rng(0).normal(size=(3, 4, 4))
        np.testing.assert_allclose(batchnorm_forward(x, BatchNormParams.identity(3), "running"), x, rtol=1e-5)

    def test_dynamic_statistics(self):
        rng = np.random.default_rng(1)
        x = rng.normal(2, 3, size=(4, 8, 8))
        p = BatchNormParams(rng.uniform(0.5, 2, 4), rng.normal(size=4))
        y = batchnorm_forward(x, p, "dynamic")
        np.testing.assert_allclose(y.mean(axis=(1, 2)), p.beta, atol=1e-6)
        np.testing.assert_allclose(y.var(axis=(1, 2)), p.gamma ** 2, rtol=1e-5)

    def test_batch_mode_updates_running(self):
        rng = np.random.default_rng(2)
        x = rng.normal(1.0, 2.0, size=(5, 2, 4, 4))
        p = BatchNormParams.identity(2)
        batchnorm_forward(x, p, "batch", update_running=True)
        np.testing.assert_allclose(p.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
        np.testing.assert_allclose(p.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1))
        before = p.running_mean.copy()
        batchnorm_forward(x, p, "dynamic", update_running=True)
        assert np.array_equal(p.running_mean, before)

    @pytest.mark.parametrize("mode", ["dynamic", "batch", "running"])
    def test_q20_matches_float(self, mode):
        rng = np.random.default_rng(3)
        x = rng.normal(0, 2, size=(2, 3, 6, 6))
        p = BatchNormParams(rng.uniform(0.5, 1.5, 3), rng.normal(size=3) * 0.1,
                            rng.normal(size=3) * 0.1, rng.uniform(0.5, 2, 3))
        yq = fx.array_to_float(batchnorm_forward(fx.array_from_float(x), p, mode))
        np.testing.assert_allclose(yq, batchnorm_forward(x, p, mode), atol=2e-4)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            batchnorm_forward(np.zeros((1, 2, 2)), BatchNormParams.identity(1), "nope")


class TestReluHead:
    def test_relu(self):
        assert np.all(relu(-np.ones(4)) == 0)
        x = np.array([0.5, 2.0])
        assert np.array_equal(relu(x), x)
        m = np.array([-1.0, 0.0, 3.0])
        assert relu(m).tolist() == [max(0.0, v) for v in m]

    def test_zero_head_uniform(self):
        p = HeadParams(np.zeros((100, 64)))
        np.testing.assert_allclose(head_forward(np.ones((64, 8, 8)), p), np.full(100, 0.01))

    def test_simplex(self):
        rng = np.random.default_rng(0)
        p = HeadParams(rng.normal(size=(10, 4)) * 5, rng.normal(size=10))
        probs = head_forward(rng.normal(size=(3, 4, 2, 2)) * 10, p)
        assert np.all(probs >= 0)
        np.testing.assert_allclose(probs.sum(axis=1), 1, atol=1e-12)

    def test_hand_softmax(self):
        p = HeadParams(np.eye(2), np.zeros(2))
        probs = head_forward(np.array([[[1.0]], [[2.0]]]), p)
        e = np.exp([1.0, 2.0])
        np.testing.assert_allclose(probs, e / e.sum())

    def test_softmax_stable(self):
        assert np.all(np.isfinite(softmax(np.array([1000.0, -1000.0]))))


# ---------------------------------------------------------------------------
# VJPs against central differences


def _fd_check(f, x, gx_claim, direction, eps=1e-5):
    fd = (f(x + eps * direction) - f(x - eps * direction)) / (2 * eps)
    an = float((gx_claim * direction).sum())
    assert abs(fd - an) <= 1e-6 * max(abs(an), abs(fd), 1e-3)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("stride", [1, 2])
def test_conv_vjp(seed, stride):
    rng = np.random.default_rng(seed)
    x, w = rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 3, 3, 3))
    gy = rng.normal(size=(2, 2, 4 // stride, 4 // stride))
    gx, gp = vjp("conv", {"x": x, "weight": w, "stride": stride}, gy)
    _fd_check(lambda v: (conv2d_forward(v, w, stride) * gy).sum(), x, gx, rng.normal(size=x.shape))
    _fd_check(lambda v: (conv2d_forward(x, v, stride) * gy).sum(), w, gp["weight"], rng.normal(size=w.shape))


def test_conv_vjp_identity_kernel():
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1
    gy = np.random.default_rng(0).normal(size=(1, 3, 3))
    gx, _ = vjp("conv", {"x": np.zeros((1, 3, 3)), "weight": w}, gy)
    assert np.array_equal(gx, gy)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("mode", ["dynamic", "batch", "running"])
def test_batchnorm_vjp(seed, mode):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 2, 4, 4))
    p = BatchNormParams(rng.uniform(0.5, 2, 2), rng.normal(size=2), rng.normal(size=2), rng.uniform(0.5, 2, 2))
    gy = rng.normal(size=x.shape)
    gx, gp = vjp("batchnorm", {"x": x, "params": p, "mode": mode}, gy)
    _fd_check(lambda v: (batchnorm_forward(v, p, mode) * gy).sum(), x, gx, rng.normal(size=x.shape))

    def with_gamma(g):
        q = BatchNormParams(g, p.beta, p.running_mean, p.running_var)
        return (batchnorm_forward(x, q, mode) * gy).sum()

    _fd_check(with_gamma, p.gamma, gp["gamma"], rng.normal(size=2))
    np.testing.assert_allclose(gp["beta"], gy.sum(axis=(0, 2, 3)))


def test_relu_vjp():
    x = np.array([-1.0, 2.0, -0.5, 3.0])
    g, _ = vjp("relu", {"x": x}, np.ones(4))
    assert g.tolist() == [0, 1, 0, 1]


@pytest.mark.parametrize("seed", range(5))
def test_head_vjp(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 3, 2, 2))
    p = HeadParams(rng.normal(size=(4, 3)), rng.normal(size=4))
    gp_up = rng.normal(size=(2, 4))
    gx, gp = vjp("head", {"x": x, "params": p}, gp_up)
    _fd_check(lambda v: (head_forward(v, p) * gp_up).sum(), x, gx, rng.normal(size=x.shape))
    _fd_check(lambda v: (head_forward(x, HeadParams(v, p.bias)) * gp_up).sum(), p.weight, gp["weight"],
              rng.normal(size=p.weight.shape))
    _fd_check(lambda v: (head_forward(x, HeadParams(p.weight, v)) * gp_up).sum(), p.bias, gp["bias"],
              rng.normal(size=4))


def test_vjp_unknown_primitive():
    with pytest.raises(ValueError):
        vjp("pool", {}, None)


def test_vjp_shape_mismatch():
    with pytest.raises(ShapeError):
        vjp("relu", {"x": np.zeros(3)}, np.zeros(4))
