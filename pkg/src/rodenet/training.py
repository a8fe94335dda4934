"""Desk-scale training: cross-entropy, unrolled and adjoint gradients, SGD.

Two gradient routes are available for ODE layers:

* ``unrolled`` backpropagates exactly through every solver stage
  (discretise-then-optimise) and keeps all intermediate states;
* ``adjoint`` keeps only each ODE layer's output and recovers gradients
  with one augmented backward solve of (state, adjoint, parameter-gradient),
  the memory-light route.
"""
from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .nn_ops import (batchnorm_forward, batchnorm_vjp, conv2d_forward, conv2d_vjp, head_forward, head_vjp,
                     relu, relu_vjp)
from .network import NetworkModel
from .odeblock import dynamics_forward, dynamics_vjp, plain_forward, plain_vjp
from .odesolve import SolverConfig, SolverError, ode_solve

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
GRAD_MODES = ("unrolled", "adjoint")
METRIC_FIELDS = ("epoch", "lr", "train_loss", "train_acc", "eval_loss", "eval_acc", "grad_mode")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr0: float = 0.01
    milestones: tuple = (100, 150)
    decay: float = 0.1
    weight_decay: float = 1e-4
    epochs: int = 200
    batch_size: int = 128
    momentum: float = 0.0
    grad_mode: str = "unrolled"
    seed: int = 0

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.grad_mode not in GRAD_MODES:
            raise ValueError(f"grad_mode must be one of {GRAD_MODES}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        self.milestones = tuple(self.milestones)


def learning_rate(epoch: int, cfg: TrainConfig | None = None) -> float:
    """Step schedule: ``lr0 * decay ** #{milestones <= epoch}`` (epochs count from 1)."""
    cfg = cfg or TrainConfig()
    k = sum(1 for m in cfg.milestones if m <= epoch)
    # dividing by 1/decay keeps 0.01 -> 0.001 -> 0.0001 exact in binary floating point
    return cfg.lr0 / (1.0 / cfg.decay) ** k


# ---------------------------------------------------------------------------
# loss


def loss(probs, label: int) -> float:
    """Cross-entropy ``-log p[label]`` of one probability vector (floored at 1e-12)."""
    p = float(np.asarray(probs)[label])
    if p < PROB_FLOOR:
        log.warning("probability of the true label %.3g below floor; clamped", p)
        p = PROB_FLOOR
    return -np.log(p)


def batch_loss(probs, labels):
    """Mean cross-entropy and its gradient w.r.t. the probabilities."""
    probs = np.atleast_2d(probs)
    labels = np.asarray(labels)
    b = len(labels)
    p = probs[np.arange(b), labels]
    clamped = p < PROB_FLOOR
    if clamped.any():
        log.warning("%d true-label probabilities clamped at %.0e", int(clamped.sum()), PROB_FLOOR)
    value = float(-np.log(np.maximum(p, PROB_FLOOR)).mean())
    g = np.zeros_like(probs)
    g[np.arange(b), labels] = np.where(clamped, 0.0, -1.0 / (b * np.maximum(p, PROB_FLOOR)))
    return value, g


# ---------------------------------------------------------------------------
# forward with a tape, backward


def _tableau_backward(cfg: SolverConfig, caches, block, g, grads, prefix):
    """Reverse-mode through the explicit Runge-Kutta steps recorded in ``caches``."""
    tab = cfg.tableau
    h = cfg.h
    n_stages = len(tab.b)
    for i in reversed(range(cfg.steps)):
        step = caches[i * n_stages:(i + 1) * n_stages]
        gk = [h * b * g for b in tab.b]
        gz = g.copy()
        for s in reversed(range(n_stages)):
            vz, vth = dynamics_vjp(step[s], block, gk[s])
            _accumulate(grads, prefix, vth)
            gz += vz
            for j, a in enumerate(tab.a[s]):
                if a:
                    gk[j] = gk[j] + h * a * vz
        g = gz
    return g


def _accumulate(grads, prefix, local):
    for k, v in local.items():
        name = f"{prefix}.{k}"
        if name in grads:
            grads[name] = grads[name] + v
        else:
            grads[name] = v


def _flatten(arrays):
    return np.concatenate([np.ravel(a) for a in arrays])


def adjoint_backward(block, cfg: SolverConfig, z1, a1, bn_mode="batch", clamp_time=False):
    """Augmented backward solve from ``t1`` to ``t0``.

    Integrates ``dz/dt = f``, ``da/dt = -a df/dz`` and
    ``dg/dt = -a df/dtheta`` jointly with the forward method and step
    count, starting from ``(z(t1), dL/dz(t1), 0)``.  Returns
    ``(z(t0) reconstructed, dL/dz(t0), {name: dL/dtheta})``.
    """
    shape = z1.shape
    nz = z1.size
    names = list(block.named_arrays())
    sizes = [block.named_arrays()[k].size for k in names]

    def aug(s, t):
        z = s[:nz].reshape(shape)
        a = s[nz:2 * nz].reshape(shape)
        fz, cache = dynamics_forward(z, t, block, bn_mode, clamp_time)
        gz, gth = dynamics_vjp(cache, block, a)
        return np.concatenate([fz.ravel(), -gz.ravel(), -_flatten([gth[k] for k in names])])

    s1 = np.concatenate([z1.ravel(), a1.ravel(), np.zeros(sum(sizes))])
    try:
        s0 = ode_solve(s1, cfg.reversed(), aug)
    except SolverError as exc:
        raise TrainingError(f"adjoint backward reconstruction diverged at step {exc.step}; "
                            "try grad_mode='unrolled'") from exc
    z0 = s0[:nz].reshape(shape)
    a0 = s0[nz:2 * nz].reshape(shape)
    grads, off = {}, 2 * nz
    for k, size in zip(names, sizes):
        grads[k] = s0[off:off + size].reshape(block.named_arrays()[k].shape)
        off += size
    return z0, a0, grads


def _forward_tape(model: NetworkModel, x, grad_mode, bn_mode, update_running):
    tape = []
    u = conv2d_forward(x, model.stem_conv.weight, 1)
    v = batchnorm_forward(u, model.stem_bn, bn_mode, update_running)
    tape.append(("stem", x, u, v))
    z = relu(v)
    for layer, entry in model.schedule.entries.items():
        blocks = model.layers[layer]
        if entry.flavor == "ode":
            blk, cfg = blocks[0], model.solver_config(layer)
            if grad_mode == "unrolled":
                caches = []

                def f(zz, t, blk=blk, caches=caches):
                    out, cache = dynamics_forward(zz, t, blk, bn_mode, model.clamp_time, update_running)
                    caches.append(cache)
                    return out

                z = ode_solve(z, cfg, f)
                tape.append(("ode_unrolled", layer, cfg, caches))
            else:
                def f(zz, t, blk=blk):
                    return dynamics_forward(zz, t, blk, bn_mode, model.clamp_time, update_running)[0]

                z = ode_solve(z, cfg, f)
                tape.append(("ode_adjoint", layer, cfg, z))
        else:
            for i, blk in enumerate(blocks):
                z, cache = plain_forward(z, blk, bn_mode, update_running)
                tape.append(("plain", f"{layer}.{i}", blk, cache))
    probs = head_forward(z, model.head)
    tape.append(("head", z))
    return probs, tape


def _backward(model: NetworkModel, tape, g_probs, bn_mode):
    grads = {}
    _, zf = tape[-1]
    g, gw, gb = head_vjp(zf, model.head, g_probs)
    grads["fc.weight"], grads["fc.bias"] = gw, gb
    for rec in reversed(tape[:-1]):
        kind = rec[0]
        if kind == "plain":
            _, prefix, blk, cache = rec
            g, local = plain_vjp(cache, blk, g)
            _accumulate(grads, prefix, local)
        elif kind == "ode_unrolled":
            _, layer, cfg, caches = rec
            g = _tableau_backward(cfg, caches, model.layers[layer][0], g, grads, f"{layer}.0")
        elif kind == "ode_adjoint":
            _, layer, cfg, z1 = rec
            _, g, local = adjoint_backward(model.layers[layer][0], cfg, z1, g, bn_mode, model.clamp_time)
            _accumulate(grads, f"{layer}.0", local)
        elif kind == "stem":
            _, x, u, v = rec
            g = relu_vjp(v, g)
            g, gg, gbeta = batchnorm_vjp(u, model.stem_bn, bn_mode, g)
            _, gw = conv2d_vjp(x, model.stem_conv.weight, 1, g)
            grads["conv1.weight"], grads["conv1.bn.gamma"], grads["conv1.bn.beta"] = gw, gg, gbeta
    return grads


def compute_gradients(model: NetworkModel, images, labels, grad_mode="unrolled", bn_mode="batch",
                      weight_decay=0.0, update_running=False):
    """Mean cross-entropy over the batch and its gradient for every trainable array.

    ``weight_decay`` adds ``weight_decay * theta`` to each gradient.
    Returns ``(loss, grads, probs)``.
    """
    if grad_mode not in GRAD_MODES:
        raise ValueError(f"grad_mode must be one of {GRAD_MODES}")
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    labels = np.atleast_1d(labels)
    probs, tape = _forward_tape(model, x, grad_mode, bn_mode, update_running)
    value, g_probs = batch_loss(probs, labels)
    grads = _backward(model, tape, g_probs, bn_mode)
    params = model.named_parameters()
    out = {}
    for name, theta in params.items():
        gr = grads.get(name)
        gr = np.zeros_like(theta) if gr is None else np.asarray(gr).reshape(theta.shape)
        if not np.all(np.isfinite(gr)):
            raise TrainingError(f"non-finite gradient in {name}")
        out[name] = gr + weight_decay * theta if weight_decay else gr
    return value, out, probs


def grad_unrolled(model, images, labels, bn_mode="batch", weight_decay=0.0, update_running=False):
    value, grads, _ = compute_gradients(model, images, labels, "unrolled", bn_mode, weight_decay, update_running)
    return value, grads


def grad_adjoint(model, images, labels, bn_mode="batch", weight_decay=0.0, update_running=False):
    value, grads, _ = compute_gradients(model, images, labels, "adjoint", bn_mode, weight_decay, update_running)
    return value, grads


def adjoint_discrepancy(model, images, labels, bn_mode="batch") -> dict[str, float]:
    """Relative difference ``|g_adj - g_unr| / |g_unr|`` per trainable array."""
    _, gu = grad_unrolled(model, images, labels, bn_mode)
    _, ga = grad_adjoint(model, images, labels, bn_mode)
    out = {}
    for k in gu:
        den = np.linalg.norm(gu[k])
        out[k] = float(np.linalg.norm(ga[k] - gu[k]) / den) if den > 0 else float(np.linalg.norm(ga[k]))
    return out


# ---------------------------------------------------------------------------
# optimiser and loop


def sgd_step(params: dict, grads: dict, cfg: TrainConfig, epoch: int, velocity: dict | None = None) -> dict:
    """In-place ``theta -= lr(epoch) * (g + weight_decay * theta)``, with optional momentum."""
    lr = learning_rate(epoch, cfg)
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {theta.shape} for {name}")
        step = g + cfg.weight_decay * theta if cfg.weight_decay else g
        if cfg.momentum:
            if velocity is None:
                raise ValueError("momentum needs a velocity dict")
            buf = velocity.get(name)
            buf = step.copy() if buf is None else cfg.momentum * buf + step
            velocity[name] = buf
            step = buf
        theta -= lr * step
    return params


def evaluate(model: NetworkModel, ds: Dataset, bn_mode="running", batch_size=256):
    """Mean loss and accuracy of ``model`` on ``ds``."""
    from .network import forward

    total, correct = 0.0, 0
    for start in range(0, len(ds), batch_size):
        xb = ds.images[start:start + batch_size]
        yb = ds.labels[start:start + batch_size]
        probs = forward(model, xb, "float", bn_mode)
        total += batch_loss(probs, yb)[0] * len(yb)
        correct += int((probs.argmax(axis=1) == yb).sum())
    return total / len(ds), correct / len(ds)


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    eval_loss: float | None
    eval_acc: float | None
    grad_mode: str

    def row(self):
        return [self.epoch, f"{self.lr:.6g}", f"{self.train_loss:.6f}", f"{self.train_acc:.6f}",
                "" if self.eval_loss is None else f"{self.eval_loss:.6f}",
                "" if self.eval_acc is None else f"{self.eval_acc:.6f}", self.grad_mode]


@dataclass
class TrainResult:
    model: NetworkModel
    history: list = field(default_factory=list)


def train(model: NetworkModel, dataset: Dataset, cfg: TrainConfig, eval_dataset: Dataset | None = None,
          log_path: str | os.PathLike | None = None, step_callback=None) -> TrainResult:
    """Mini-batch SGD with batch-statistics BN; deterministic for a fixed ``cfg.seed``.

    ``step_callback(epoch, step, model)`` runs after every parameter update.
    Metrics are appended to ``log_path`` as CSV if given.
    """
    if len(dataset) == 0:
        raise TrainingError("training dataset is empty")
    rng = np.random.default_rng(cfg.seed)
    params = model.named_parameters()
    velocity = {} if cfg.momentum else None
    result = TrainResult(model)
    writer_fh = None
    if log_path is not None:
        new = not os.path.exists(log_path) or os.path.getsize(log_path) == 0
        writer_fh = open(log_path, "a", newline="")
        writer = csv.writer(writer_fh)
        if new:
            writer.writerow(METRIC_FIELDS)
    try:
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(len(dataset))
            seen, loss_sum, correct = 0, 0.0, 0
            for step, start in enumerate(range(0, len(order), cfg.batch_size)):
                idx = order[start:start + cfg.batch_size]
                xb, yb = dataset.images[idx], dataset.labels[idx]
                value, grads, probs = compute_gradients(model, xb, yb, cfg.grad_mode, "batch", 0.0,
                                                        update_running=True)
                sgd_step(params, grads, cfg, epoch, velocity)
                seen += len(idx)
                loss_sum += value * len(idx)
                correct += int((probs.argmax(axis=1) == yb).sum())
                if step_callback is not None:
                    step_callback(epoch, step, model)
            ev_loss = ev_acc = None
            if eval_dataset is not None and len(eval_dataset):
                ev_loss, ev_acc = evaluate(model, eval_dataset)
            m = EpochMetrics(epoch, learning_rate(epoch, cfg), loss_sum / seen, correct / seen, ev_loss, ev_acc,
                             cfg.grad_mode)
            result.history.append(m)
            log.info("epoch %d lr %.4g loss %.4f acc %.3f", epoch, m.lr, m.train_loss, m.train_acc)
            if writer_fh is not None:
                writer.writerow(m.row())
                writer_fh.flush()
    finally:
        if writer_fh is not None:
            writer_fh.close()
    return result
