"""Forward and vector-Jacobian primitives for the residual/ODE blocks.

All kernels take ``(C, H, W)`` or batched ``(B, C, H, W)`` arrays.  ``int64``
inputs select the Q20 fixed-point path (forward only); float inputs select
the float64 path, which also has VJPs for training.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import fixedpoint as fx
from .tensor import ShapeError, as_batch

BN_EPS = 1e-5
BN_EPS_Q20 = 2.0 ** -14
BN_MODES = ("batch", "dynamic", "running")


@dataclass
class ConvParams:
    """Bias-free 3x3 convolution, padding 1."""

    weight: np.ndarray  # (Cout, Cin, 3, 3)
    stride: int = 1

    def __post_init__(self):
        if self.weight.ndim != 4 or self.weight.shape[2:] != (3, 3):
            raise ShapeError(f"conv weight must be (Cout, Cin, 3, 3), got {self.weight.shape}")
        if self.stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray = None
    running_var: np.ndarray = None
    eps: float = BN_EPS
    momentum: float = 0.1

    def __post_init__(self):
        c = len(self.gamma)
        if self.running_mean is None:
            self.running_mean = np.zeros(c)
        if self.running_var is None:
            self.running_var = np.ones(c)
        if not (len(self.beta) == len(self.running_mean) == len(self.running_var) == c):
            raise ShapeError("batch-norm arrays must all have length C")
        if self.eps <= 0:
            raise ValueError("eps must be positive")

    @classmethod
    def identity(cls, channels: int) -> "BatchNormParams":
        return cls(np.ones(channels), np.zeros(channels))

    @property
    def channels(self) -> int:
        return len(self.gamma)


@dataclass
class HeadParams:
    """Global average pool -> fully connected -> softmax."""

    weight: np.ndarray  # (num_classes, C)
    bias: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.bias is None:
            self.bias = np.zeros(self.weight.shape[0])


def _restore(y, single):
    return y[0] if single else y


# ---------------------------------------------------------------------------
# convolution


def _windows(x: np.ndarray, stride: int) -> np.ndarray:
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))
    return win[:, :, ::stride, ::stride]  # (B, C, Ho, Wo, 3, 3)


def _check_conv(x, w, stride):
    if w.ndim != 4 or w.shape[2:] != (3, 3):
        raise ShapeError(f"conv weight must be (Cout, Cin, 3, 3), got {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv expects {w.shape[1]} input channels, got {x.shape[1]}")
    if x.shape[2] % stride or x.shape[3] % stride:
        raise ShapeError(f"spatial size {x.shape[2:]} not divisible by stride {stride}")


def conv2d_forward(x, weight, stride: int = 1, counter: fx.SaturationCounter | None = None):
    """3x3 convolution with zero padding 1 and no bias.

    ``y[o,i,j] = sum_{c,u,v} w[o,c,u,v] * x[c, i*s+u-1, j*s+v-1]``.  On the Q20
    path products accumulate exactly in a wide accumulator and each output
    pixel is rounded once.
    """
    if isinstance(weight, ConvParams):
        weight, stride = weight.weight, weight.stride
    x, single = as_batch(x)
    weight = np.asarray(weight)
    _check_conv(x, weight, stride)
    win = _windows(x, stride)
    if x.dtype.kind == "i":
        return _restore(_conv_q20(win, weight, counter), single)
    y = np.tensordot(win, weight, axes=([1, 4, 5], [1, 2, 3]))
    return _restore(np.ascontiguousarray(y.transpose(0, 3, 1, 2)), single)


def _conv_q20(win, weight, counter):
    # float weights are quantised; integer weights are taken as Q20 raw values
    weight = np.asarray(weight)
    weight = fx.array_from_float(weight, counter) if weight.dtype.kind == "f" else weight.astype(np.int64)
    k = weight.shape[1] * 9
    bound = int(np.abs(win).max(initial=0)) * int(np.abs(weight).max(initial=0)) * k
    if bound < 2 ** 62:
        acc = np.tensordot(win.astype(np.int64), weight, axes=([1, 4, 5], [1, 2, 3]))
    else:
        acc = np.tensordot(win.astype(object), weight.astype(object), axes=([1, 4, 5], [1, 2, 3]))
    y = fx.saturate_array(fx.round_shift_array(acc), counter)
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


def conv2d_vjp(x, weight, stride, gy):
    """Return ``(grad_x, grad_weight)`` for :func:`conv2d_forward`."""
    x, single = as_batch(x)
    gy = gy[None] if single else gy
    _check_conv(x, weight, stride)
    b, c, h, w_ = x.shape
    ho, wo = h // stride, w_ // stride
    if gy.shape != (b, weight.shape[0], ho, wo):
        raise ShapeError(f"upstream gradient shape {gy.shape} does not match conv output")
    win = _windows(x, stride)
    gw = np.tensordot(gy, win, axes=([0, 2, 3], [0, 2, 3]))
    gxp = np.zeros((b, c, h + 2, w_ + 2))
    for u in range(3):
        for v in range(3):
            contrib = np.tensordot(gy, weight[:, :, u, v], axes=([1], [0])).transpose(0, 3, 1, 2)
            gxp[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride] += contrib
    return _restore(gxp[:, :, 1:-1, 1:-1], single), gw


# ---------------------------------------------------------------------------
# batch normalisation


def _bn_axes(mode):
    if mode == "batch":
        return (0, 2, 3)
    if mode == "dynamic":
        return (2, 3)
    if mode == "running":
        return None
    raise ValueError(f"unknown batch-norm mode {mode!r}; expected one of {BN_MODES}")


def _bn_stats(x, p: BatchNormParams, mode):
    axes = _bn_axes(mode)
    if axes is None:
        mu = p.running_mean.reshape(1, -1, 1, 1)
        var = p.running_var.reshape(1, -1, 1, 1)
    else:
        mu = x.mean(axis=axes, keepdims=True)
        var = x.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + p.eps)
    return mu, var, inv


def batchnorm_forward(x, p: BatchNormParams, mode: str = "running", update_running: bool = False,
                      counter: fx.SaturationCounter | None = None):
    """``gamma * (x - mean) / sqrt(var + eps) + beta`` per channel.

    ``mode`` picks the statistics: ``"dynamic"`` uses each feature map's own
    H*W values (what the accelerator computes), ``"batch"`` pools over the
    batch as well (training), ``"running"`` uses the stored estimates.
    """
    x, single = as_batch(x)
    if x.shape[1] != p.channels:
        raise ShapeError(f"batch norm over {p.channels} channels got {x.shape[1]}")
    if x.dtype.kind == "i":
        return _restore(_batchnorm_q20(x, p, mode, counter), single)
    mu, var, inv = _bn_stats(x, p, mode)
    xhat = (x - mu) * inv
    y = p.gamma.reshape(1, -1, 1, 1) * xhat + p.beta.reshape(1, -1, 1, 1)
    if update_running and mode == "batch":
        n = x.shape[0] * x.shape[2] * x.shape[3]
        unbiased = var.ravel() * (n / max(n - 1, 1))
        p.running_mean[:] = (1 - p.momentum) * p.running_mean + p.momentum * mu.ravel()
        p.running_var[:] = (1 - p.momentum) * p.running_var + p.momentum * unbiased
    return _restore(y, single)


def _batchnorm_q20(x, p: BatchNormParams, mode, counter):
    b, c, h, w = x.shape
    hw = h * w
    gamma = fx.array_from_float(p.gamma)
    beta = fx.array_from_float(p.beta)
    eps_raw = max(1, fx.raw_from_float(BN_EPS_Q20))
    if mode == "running":
        mean = np.broadcast_to(fx.array_from_float(p.running_mean), (b, c)).copy()
        var = np.broadcast_to(fx.array_from_float(p.running_var), (b, c)).copy()
        d = x - mean[:, :, None, None]
    else:
        if mode == "batch":
            s = x.sum(axis=(0, 2, 3))
            mean = np.broadcast_to(fx.round_div_array(s, b * hw).astype(np.int64), (b, c)).copy()
        else:
            s = x.sum(axis=(2, 3))
            mean = fx.round_div_array(s, hw).astype(np.int64)
        d = x - mean[:, :, None, None]
        dd = d.astype(object) if np.abs(d).max(initial=0) >= 2 ** 26 else d
        sq = dd * dd
        if mode == "batch":
            var = np.broadcast_to(fx.round_div_array(sq.sum(axis=(0, 2, 3)), b * hw * fx.ONE), (b, c))
        else:
            var = fx.round_div_array(sq.sum(axis=(2, 3)), hw * fx.ONE)
        var = fx.saturate_array(np.asarray(var))
    d = fx.saturate_array(d, counter)
    scale = np.empty((b, c), dtype=np.int64)
    for i in range(b):
        for j in range(c):
            std = fx.q20_sqrt(fx.FixedQ20(int(fx.saturate(int(var[i, j]) + eps_raw))))
            scale[i, j] = fx.q20_div(fx.FixedQ20(int(gamma[j])), std).raw
    y = fx.mul_array(d, scale[:, :, None, None], counter)
    return fx.add_array(y, beta.reshape(1, -1, 1, 1), counter)


def batchnorm_vjp(x, p: BatchNormParams, mode, gy):
    """Return ``(grad_x, grad_gamma, grad_beta)``; stat modes differentiate through the statistics."""
    x, single = as_batch(x)
    gy = gy[None] if single else gy
    if gy.shape != x.shape:
        raise ShapeError(f"upstream gradient shape {gy.shape} != input shape {x.shape}")
    mu, _, inv = _bn_stats(x, p, mode)
    xhat = (x - mu) * inv
    ggamma = (gy * xhat).sum(axis=(0, 2, 3))
    gbeta = gy.sum(axis=(0, 2, 3))
    gxhat = gy * p.gamma.reshape(1, -1, 1, 1)
    axes = _bn_axes(mode)
    if axes is None:
        gx = gxhat * inv
    else:
        m = np.prod([x.shape[a] for a in axes])
        gx = inv / m * (m * gxhat - gxhat.sum(axis=axes, keepdims=True)
                        - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True))
    return _restore(gx, single), ggamma, gbeta


# ---------------------------------------------------------------------------
# activation and head


def relu(x):
    return np.maximum(x, 0)


def relu_vjp(x, gy):
    x = np.asarray(x)
    if np.shape(gy) != x.shape:
        raise ShapeError(f"upstream gradient shape {np.shape(gy)} != input shape {x.shape}")
    return gy * (x > 0)


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def head_forward(x, p: HeadParams):
    """Average-pool each channel, apply the affine map, softmax.  Always float."""
    x, single = as_batch(x)
    if x.dtype.kind == "i":
        x = fx.array_to_float(x)
    if x.shape[1] != p.weight.shape[1]:
        raise ShapeError(f"head expects {p.weight.shape[1]} channels, got {x.shape[1]}")
    pooled = x.mean(axis=(2, 3))
    probs = softmax(pooled @ p.weight.T + p.bias)
    return probs[0] if single else probs


def head_vjp(x, p: HeadParams, g_probs):
    """Return ``(grad_x, grad_weight, grad_bias)`` given the gradient w.r.t. probabilities."""
    x, single = as_batch(x)
    g_probs = np.atleast_2d(g_probs)
    pooled = x.mean(axis=(2, 3))
    probs = softmax(pooled @ p.weight.T + p.bias)
    g_logits = probs * (g_probs - (g_probs * probs).sum(axis=1, keepdims=True))
    gw = g_logits.T @ pooled
    gb = g_logits.sum(axis=0)
    g_pooled = g_logits @ p.weight
    hw = x.shape[2] * x.shape[3]
    gx = np.broadcast_to(g_pooled[:, :, None, None] / hw, x.shape).copy()
    return _restore(gx, single), gw, gb


def vjp(primitive: str, saved: dict, upstream):
    """Generic dispatcher: ``(input_grad, {param_name: grad})`` for one primitive."""
    if primitive == "conv":
        gx, gw = conv2d_vjp(saved["x"], saved["weight"], saved.get("stride", 1), upstream)
        return gx, {"weight": gw}
    if primitive == "batchnorm":
        gx, gg, gb = batchnorm_vjp(saved["x"], saved["params"], saved.get("mode", "running"), upstream)
        return gx, {"gamma": gg, "beta": gb}
    if primitive == "relu":
        return relu_vjp(saved["x"], upstream), {}
    if primitive == "head":
        gx, gw, gb = head_vjp(saved["x"], saved["params"], upstream)
        return gx, {"weight": gw, "bias": gb}
    raise ValueError(f"unknown primitive {primitive!r}")
