"""Residual building blocks: the plain block and the ODEBlock dynamics.

Both run conv -> BN -> ReLU -> conv -> BN.  An ODE block feeds the time ``t``
to each convolution as one extra constant input channel and is integrated
by :func:`~rodenet.odesolve.ode_solve`; a plain block adds a shortcut.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fixedpoint as fx
from .nn_ops import (BatchNormParams, ConvParams, batchnorm_forward, batchnorm_vjp, conv2d_forward,
                     conv2d_vjp, relu, relu_vjp)
from .odesolve import Q20Arithmetic, SolverConfig, ode_solve
from .tensor import ShapeError, as_batch, concat_time_channel

FLAVORS = ("ode", "plain")


@dataclass
class BlockParams:
    conv1: ConvParams
    bn1: BatchNormParams
    conv2: ConvParams
    bn2: BatchNormParams
    flavor: str
    in_ch: int
    out_ch: int

    def __post_init__(self):
        if self.flavor not in FLAVORS:
            raise ValueError(f"flavor must be one of {FLAVORS}")
        extra = 1 if self.flavor == "ode" else 0
        if self.flavor == "ode" and (self.stride != 1 or self.in_ch != self.out_ch):
            raise ShapeError("ODE blocks keep the shape: stride 1 and in_ch == out_ch")
        if self.conv1.weight.shape[:2] != (self.out_ch, self.in_ch + extra):
            raise ShapeError(f"conv1 weight shape {self.conv1.weight.shape} does not fit block")
        if self.conv2.weight.shape[:2] != (self.out_ch, self.out_ch + extra):
            raise ShapeError(f"conv2 weight shape {self.conv2.weight.shape} does not fit block")
        if self.conv2.stride != 1:
            raise ShapeError("second convolution always has stride 1")

    @property
    def stride(self) -> int:
        return self.conv1.stride

    @classmethod
    def init(cls, in_ch: int, out_ch: int, flavor: str = "plain", stride: int = 1,
             rng: np.random.Generator | None = None, zero: bool = False) -> "BlockParams":
        """He-normal (fan-in) convolutions, gamma=1, beta=0; ``zero`` gives all-zero weights and gamma."""
        rng = np.random.default_rng() if rng is None else rng
        extra = 1 if flavor == "ode" else 0

        def conv(cin, cout):
            if zero:
                return np.zeros((cout, cin, 3, 3))
            return rng.normal(0.0, np.sqrt(2.0 / (cin * 9)), size=(cout, cin, 3, 3))

        def bn(c):
            p = BatchNormParams.identity(c)
            if zero:
                p.gamma[:] = 0.0
            return p

        return cls(ConvParams(conv(in_ch + extra, out_ch), stride), bn(out_ch),
                   ConvParams(conv(out_ch + extra, out_ch), 1), bn(out_ch),
                   flavor, in_ch, out_ch)

    def named_arrays(self) -> dict[str, np.ndarray]:
        """Trainable arrays by name; the dict values alias the parameters."""
        return {
            "conv1.weight": self.conv1.weight, "bn1.gamma": self.bn1.gamma, "bn1.beta": self.bn1.beta,
            "conv2.weight": self.conv2.weight, "bn2.gamma": self.bn2.gamma, "bn2.beta": self.bn2.beta,
        }

    def named_buffers(self) -> dict[str, np.ndarray]:
        return {
            "bn1.running_mean": self.bn1.running_mean, "bn1.running_var": self.bn1.running_var,
            "bn2.running_mean": self.bn2.running_mean, "bn2.running_var": self.bn2.running_var,
        }

    def num_params(self) -> int:
        return sum(a.size for a in self.named_arrays().values())


# ---------------------------------------------------------------------------
# time-conditioned convolution


def _time_conv(x, weight, t, clamp_time, counter=None):
    if clamp_time:
        # the time channel is identically zero and contributes nothing
        return conv2d_forward(x, np.ascontiguousarray(weight[:, :-1]), 1, counter)
    if x.dtype.kind == "i":
        t = fx.raw_from_float(t)
    return conv2d_forward(concat_time_channel(x, t), weight, 1, counter)


def _time_conv_vjp(x, weight, t, clamp_time, gy):
    if clamp_time:
        gx, gw_z = conv2d_vjp(x, np.ascontiguousarray(weight[:, :-1]), 1, gy)
        gw = np.zeros_like(weight)
        gw[:, :-1] = gw_z
        return gx, gw
    gx, gw = conv2d_vjp(concat_time_channel(x, t), weight, 1, gy)
    return gx[:, :-1], gw


# ---------------------------------------------------------------------------
# ODE dynamics


def _check_ode(p):
    if p.flavor != "ode":
        raise ValueError("ODE dynamics need an ODE-flavored block")


def dynamics_forward(z, t, p: BlockParams, bn_mode="running", clamp_time=False,
                     update_running=False, counter=None):
    """Evaluate ``f(z, t)`` and return ``(f, cache)`` for :func:`dynamics_vjp`."""
    _check_ode(p)
    z, single = as_batch(z)
    if z.shape[1] != p.in_ch:
        raise ShapeError(f"block expects {p.in_ch} channels, got {z.shape[1]}")
    u1 = _time_conv(z, p.conv1.weight, t, clamp_time, counter)
    v1 = batchnorm_forward(u1, p.bn1, bn_mode, update_running, counter)
    r = relu(v1)
    u2 = _time_conv(r, p.conv2.weight, t, clamp_time, counter)
    out = batchnorm_forward(u2, p.bn2, bn_mode, update_running, counter)
    cache = dict(z=z, t=t, u1=u1, v1=v1, r=r, u2=u2, bn_mode=bn_mode, clamp_time=clamp_time,
                 single=single)
    return (out[0] if single else out), cache


def block_dynamics(z, t, p: BlockParams, bn_mode="running", clamp_time=False,
                   update_running=False, counter=None):
    """conv(z|t) -> BN -> ReLU -> conv(.|t) -> BN; same shape as ``z``."""
    return dynamics_forward(z, t, p, bn_mode, clamp_time, update_running, counter)[0]


def dynamics_vjp(cache, p: BlockParams, g):
    """Return ``(grad_z, {name: grad})`` for one dynamics evaluation."""
    g = g[None] if cache["single"] else g
    t, mode, clamp = cache["t"], cache["bn_mode"], cache["clamp_time"]
    gu2, gg2, gb2 = batchnorm_vjp(cache["u2"], p.bn2, mode, g)
    gr, gw2 = _time_conv_vjp(cache["r"], p.conv2.weight, t, clamp, gu2)
    gv1 = relu_vjp(cache["v1"], gr)
    gu1, gg1, gb1 = batchnorm_vjp(cache["u1"], p.bn1, mode, gv1)
    gz, gw1 = _time_conv_vjp(cache["z"], p.conv1.weight, t, clamp, gu1)
    grads = {"conv1.weight": gw1, "bn1.gamma": gg1, "bn1.beta": gb1,
             "conv2.weight": gw2, "bn2.gamma": gg2, "bn2.beta": gb2}
    return (gz[0] if cache["single"] else gz), grads


def ode_block_forward(z0, p: BlockParams, cfg: SolverConfig, bn_mode="running", clamp_time=False,
                      update_running=False, counter=None):
    """Solve the block's ODE from ``z0``.  ``int64`` input integrates in Q20."""
    _check_ode(p)
    arithmetic = Q20Arithmetic(counter) if np.asarray(z0).dtype.kind == "i" else None

    def f(z, t):
        return block_dynamics(z, t, p, bn_mode, clamp_time, update_running, counter)

    return ode_solve(z0, cfg, f, arithmetic)


# ---------------------------------------------------------------------------
# plain residual block


def shortcut(z, out_ch: int, stride: int = 1):
    """Parameter-free shortcut: stride-``s`` subsampling, new channels zero-padded after the old ones."""
    z, single = as_batch(z)
    y = z[:, :, ::stride, ::stride]
    extra = out_ch - z.shape[1]
    if extra < 0:
        raise ShapeError("shortcut cannot drop channels")
    if extra:
        y = np.concatenate([y, np.zeros((y.shape[0], extra) + y.shape[2:], dtype=y.dtype)], axis=1)
    return y[0] if single else y


def shortcut_vjp(gy, in_ch: int, in_hw, stride: int = 1):
    gy, single = as_batch(gy)
    gx = np.zeros((gy.shape[0], in_ch) + tuple(in_hw))
    gx[:, :, ::stride, ::stride] = gy[:, :in_ch]
    return gx[0] if single else gx


def plain_forward(z, p: BlockParams, bn_mode="running", update_running=False, counter=None):
    """Return ``(f(z) + shortcut(z), cache)``."""
    if p.flavor != "plain":
        raise ValueError("plain_block_forward needs a plain-flavored block")
    z, single = as_batch(z)
    if z.shape[1] != p.in_ch:
        raise ShapeError(f"block expects {p.in_ch} channels, got {z.shape[1]}")
    u1 = conv2d_forward(z, p.conv1.weight, p.stride, counter)
    v1 = batchnorm_forward(u1, p.bn1, bn_mode, update_running, counter)
    r = relu(v1)
    u2 = conv2d_forward(r, p.conv2.weight, 1, counter)
    f = batchnorm_forward(u2, p.bn2, bn_mode, update_running, counter)
    s = shortcut(z, p.out_ch, p.stride)
    out = fx.add_array(f, s, counter) if z.dtype.kind == "i" else f + s
    cache = dict(z=z, u1=u1, v1=v1, r=r, u2=u2, bn_mode=bn_mode, single=single)
    return (out[0] if single else out), cache


def plain_block_forward(z, p: BlockParams, bn_mode="running", update_running=False, counter=None):
    return plain_forward(z, p, bn_mode, update_running, counter)[0]


def plain_vjp(cache, p: BlockParams, g):
    g = g[None] if cache["single"] else g
    mode, z = cache["bn_mode"], cache["z"]
    gu2, gg2, gb2 = batchnorm_vjp(cache["u2"], p.bn2, mode, g)
    gr, gw2 = conv2d_vjp(cache["r"], p.conv2.weight, 1, gu2)
    gv1 = relu_vjp(cache["v1"], gr)
    gu1, gg1, gb1 = batchnorm_vjp(cache["u1"], p.bn1, mode, gv1)
    gz, gw1 = conv2d_vjp(z, p.conv1.weight, p.stride, gu1)
    gz = gz + shortcut_vjp(g, p.in_ch, z.shape[2:], p.stride)
    grads = {"conv1.weight": gw1, "bn1.gamma": gg1, "bn1.beta": gb1,
             "conv2.weight": gw2, "bn2.gamma": gg2, "bn2.beta": gb2}
    return (gz[0] if cache["single"] else gz), grads
