"""Cycle model for PL-offloaded layers and the PS/PL offload simulator.

A PL convolution with ``n`` multiply-add units runs a layer in
``A / n + B`` cycles: ``A`` is the parallelisable convolution work and
``B`` the batch-norm work that does not shrink with ``n``.  Processor-side
(PS) times are measured inputs; the simulator swaps the offloaded layers'
PS time for PL cycles plus word-by-word transfer.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
import yaml
from scipy.optimize import least_squares, nnls
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_consistent_length, check_is_fitted

from .network import (BYTES_PER_PARAM, DEFAULT_CLASSES, DEFAULT_WIDTHS, Schedule, _GEOMETRY, build_schedule,
                      layer_channels, layer_param_count, normalize_arch)

CLOCK_HZ = 1e8
OFFLOADABLE = ("layer1", "layer2_2", "layer3_2")
PARALLELISMS = (1, 4, 8, 16, 32)
IMAGE_SIZE = 32
DEFAULT_CONFIG = "default_costmodel.yaml"


class CostModelError(ValueError):
    pass


# ---------------------------------------------------------------------------
# cycle models


@dataclass(frozen=True)
class LayerCycleModel:
    """``cycles(n) = A / n + B`` at ``clock_hz``."""

    A: float
    B: float
    clock_hz: float = CLOCK_HZ
    max_residual: float = 0.0  # largest |fit - point| in cycles, when fitted
    max_rel_residual: float = 0.0

    def __post_init__(self):
        if not self.A > 0:
            raise CostModelError(f"A must be positive, got {self.A}")
        if self.B < 0:
            raise CostModelError(f"B must be non-negative, got {self.B}")
        if not self.clock_hz > 0:
            raise CostModelError("clock_hz must be positive")

    def cycles(self, n) -> float:
        return self.A / n + self.B

    def seconds(self, n) -> float:
        return layer_cycles(self, n) / self.clock_hz


def fit_cycle_model(points, clock_hz: float = CLOCK_HZ) -> LayerCycleModel:
    """Least-squares fit of ``cycles = A / n + B`` to ``(n, cycles)`` points.

    The fit is constrained to ``A, B >= 0`` and records the largest absolute
    and relative residual.

    Raises
    ------
    CostModelError
        If fewer than two distinct ``n`` are given or the fit has ``A = 0``.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n, c = pts[:, 0], pts[:, 1]
    if np.any(n < 1):
        raise CostModelError("parallelism must be >= 1")
    if len(np.unique(n)) < 2:
        raise CostModelError("degenerate design: need at least two distinct parallelism values")
    design = np.column_stack([1.0 / n, np.ones_like(n)])
    (A, B), _ = nnls(design, c)
    if A <= 0:
        raise CostModelError("fit gives A = 0; cycles do not fall with parallelism")
    resid = design @ np.array([A, B]) - c
    rel = np.abs(resid) / np.abs(c)
    return LayerCycleModel(float(A), float(B), clock_hz, float(np.abs(resid).max()), float(rel.max()))


def layer_cycles(model: LayerCycleModel, n) -> int:
    """Cycles of one block execution on ``conv_x n``, rounded up."""
    if n < 1:
        raise CostModelError(f"parallelism must be >= 1, got {n}")
    return math.ceil(model.cycles(n))


class CycleModel(RegressorMixin, BaseEstimator):
    """Estimator form of :func:`fit_cycle_model`: ``X`` holds parallelism, ``y`` cycles.

    Attributes
    ----------
    A_, B_ : float
        Fitted coefficients.
    max_residual_ : float
        Largest absolute residual on the training points.
    """

    def __init__(self, clock_hz: float = CLOCK_HZ):
        self.clock_hz = clock_hz

    def fit(self, X, y):
        X = check_array(X, ensure_2d=False).reshape(-1)
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        check_consistent_length(X, y)
        m = fit_cycle_model(np.column_stack([X, y]), self.clock_hz)
        self.A_, self.B_, self.max_residual_ = m.A, m.B, m.max_residual
        self.n_features_in_ = 1
        return self

    def predict(self, X):
        check_is_fitted(self, ["A_", "B_"])
        X = check_array(X, ensure_2d=False).reshape(-1)
        return self.A_ / X + self.B_

    def to_layer_model(self) -> LayerCycleModel:
        check_is_fitted(self, ["A_", "B_"])
        return LayerCycleModel(self.A_, self.B_, self.clock_hz, self.max_residual_)


# ---------------------------------------------------------------------------
# layer geometry


def _fmap_hw(layer: str, image_size: int):
    return image_size // _GEOMETRY[layer][3]


def layer_macs(layer: str, flavor: str = "ode", widths=DEFAULT_WIDTHS, image_size: int = IMAGE_SIZE,
               num_classes: int = DEFAULT_CLASSES, in_channels: int = 3) -> int:
    """Multiply-adds of one execution of ``layer``."""
    if layer == "conv1":
        return widths[0] * in_channels * 9 * image_size ** 2
    if layer == "fc":
        return widths[2] * num_classes
    cin, cout, _ = layer_channels(layer, widths)
    hw = _fmap_hw(layer, image_size) ** 2
    extra = 1 if flavor == "ode" else 0
    return 9 * hw * cout * ((cin + extra) + (cout + extra))


def fmap_elements(layer: str, widths=DEFAULT_WIDTHS, image_size: int = IMAGE_SIZE) -> int:
    """Elements of the layer's output feature map."""
    _, cout, _ = layer_channels(layer, widths)
    return cout * _fmap_hw(layer, image_size) ** 2


def transfer_words(layer: str, widths=DEFAULT_WIDTHS, image_size: int = IMAGE_SIZE) -> int:
    """32-bit words moved per execution: the input plus the output feature map."""
    cin, cout, stride = layer_channels(layer, widths)
    hw_out = _fmap_hw(layer, image_size)
    return cin * (hw_out * stride) ** 2 + cout * hw_out ** 2


def analytic_cycle_model(layer: str, reference: LayerCycleModel, reference_layer: str = "layer3_2",
                         widths=DEFAULT_WIDTHS, image_size: int = IMAGE_SIZE) -> LayerCycleModel:
    """Scale a reference model by MACs (for ``A``) and output elements (for ``B``)."""
    ka = layer_macs(layer, "ode", widths, image_size) / layer_macs(reference_layer, "ode", widths, image_size)
    kb = fmap_elements(layer, widths, image_size) / fmap_elements(reference_layer, widths, image_size)
    return LayerCycleModel(reference.A * ka, reference.B * kb, reference.clock_hz)


def calibrate_cycle_model(layer: str, observations, reference: LayerCycleModel, parallelism: int = 16,
                          transfer_cycles_per_word: float = 1.0, widths=DEFAULT_WIDTHS,
                          image_size: int = IMAGE_SIZE) -> LayerCycleModel:
    """Calibrate a layer's model from observed PL times.

    ``observations`` are ``(executions, seconds)`` pairs.  The per-execution
    time is the least-squares slope through the origin; after removing
    transfer cycles it fixes ``cycles(parallelism)``, and the A/B split is
    taken from :func:`analytic_cycle_model`.
    """
    obs = np.asarray(observations, dtype=np.float64).reshape(-1, 2)
    e, t = obs[:, 0], obs[:, 1]
    if not np.any(e > 0):
        raise CostModelError(f"no executions observed for {layer}")
    per_exec = float(e @ t / (e @ e))
    cycles = per_exec * reference.clock_hz - transfer_cycles_per_word * transfer_words(layer, widths, image_size)
    shape = analytic_cycle_model(layer, reference, widths=widths, image_size=image_size)
    s = cycles / shape.cycles(parallelism)
    return LayerCycleModel(shape.A * s, shape.B * s, reference.clock_hz)


# ---------------------------------------------------------------------------
# BRAM


@dataclass(frozen=True)
class BramEstimate:
    """Lower bound on on-chip memory for one offloaded layer (bytes)."""

    param_bytes: int
    fmap_bytes: int

    @property
    def total(self) -> int:
        return self.param_bytes + self.fmap_bytes


def bram_lower_bound(layer: str, arch: str = "rodenet3", n: int = 20, widths=DEFAULT_WIDTHS,
                     image_size: int = IMAGE_SIZE) -> BramEstimate:
    """Parameters of one block plus input and output feature maps, 4 bytes each.

    A lower bound only: line buffers, partial sums and banking overhead are
    not counted.  Layers absent from ``arch`` are sized as ODE blocks.
    """
    sched = build_schedule(arch, n)
    flavor = sched[layer].flavor if layer in sched else "ode"
    params = BYTES_PER_PARAM * layer_param_count(layer, flavor, widths)
    _, cout, _ = layer_channels(layer, widths)
    fmap = 2 * BYTES_PER_PARAM * cout * _fmap_hw(layer, image_size) ** 2
    return BramEstimate(params, fmap)


# ---------------------------------------------------------------------------
# offload simulation


@dataclass
class OffloadPlan:
    """What to offload and how.

    ``sw_times`` maps every scheduled layer (conv1 and fc included) to PS
    seconds per block execution.
    """

    arch: str
    n: int
    offload_layers: tuple = ()
    parallelism: int = 16
    sw_times: dict = field(default_factory=dict)
    transfer_cycles_per_word: float = 1.0

    def __post_init__(self):
        self.arch = normalize_arch(self.arch)
        self.offload_layers = tuple(self.offload_layers)
        bad = [l for l in self.offload_layers if l not in OFFLOADABLE]
        if bad:
            raise CostModelError(f"cannot offload {bad}; choose from {OFFLOADABLE}")
        if self.parallelism not in PARALLELISMS:
            raise CostModelError(f"parallelism must be one of {PARALLELISMS}, got {self.parallelism}")
        if self.transfer_cycles_per_word < 0:
            raise CostModelError("transfer_cycles_per_word must be non-negative")


@dataclass(frozen=True)
class SimReport:
    arch: str
    n: int
    offload_layers: tuple
    total_wo_pl: float
    target_wo_pl: float
    target_w_pl: float
    layer_target_wo_pl: dict
    layer_target_w_pl: dict

    @property
    def total_w_pl(self) -> float:
        return self.total_wo_pl - self.target_wo_pl + self.target_w_pl

    @property
    def ratio_of_target(self) -> float:
        """Offloaded share of the PS-only time, in percent."""
        return 100.0 * self.target_wo_pl / self.total_wo_pl

    @property
    def overall_speedup(self) -> float:
        return self.total_wo_pl / self.total_w_pl


def simulate_offload(plan: OffloadPlan, models: dict, schedule: Schedule | None = None,
                     widths=DEFAULT_WIDTHS, image_size: int = IMAGE_SIZE) -> SimReport:
    """Execution time with and without the plan's layers on the PL."""
    sched = build_schedule(plan.arch, plan.n) if schedule is None else schedule
    for layer in plan.offload_layers:
        if layer not in sched:
            raise CostModelError(f"{layer} is not in the {sched.arch} N={sched.n} schedule")
        if layer not in models:
            raise CostModelError(f"no cycle model for offloaded layer {layer}")
    if plan.parallelism == 32:
        warnings.warn("conv_x32 did not meet timing on the reference device; result is optimistic",
                      stacklevel=2)
    total = 0.0
    tgt_wo, tgt_w = {}, {}
    for layer in sched.layers():
        if layer not in plan.sw_times:
            raise CostModelError(f"sw_times has no entry for scheduled layer {layer}")
        execs = sched[layer].executions
        t = execs * float(plan.sw_times[layer])
        total += t
        if layer in plan.offload_layers:
            tgt_wo[layer] = t
            m = models[layer]
            cyc = layer_cycles(m, plan.parallelism) + plan.transfer_cycles_per_word * transfer_words(
                layer, widths, image_size)
            tgt_w[layer] = execs * cyc / m.clock_hz
    return SimReport(sched.arch, sched.n, plan.offload_layers, total, sum(tgt_wo.values()),
                     sum(tgt_w.values()), tgt_wo, tgt_w)


def split_sw_times(schedule: Schedule, total_wo_pl: float, target_wo_pl: dict, widths=DEFAULT_WIDTHS,
                   image_size: int = IMAGE_SIZE, num_classes: int = DEFAULT_CLASSES) -> dict:
    """Per-execution PS seconds for every scheduled layer.

    Target layers get their measured total over their executions; the rest
    of ``total_wo_pl`` is shared by the other layers in proportion to MACs.
    """
    out = {}
    for layer, t in target_wo_pl.items():
        out[layer] = float(t) / schedule[layer].executions
    rest = [l for l in schedule.layers() if l not in target_wo_pl]
    work = {l: schedule[l].executions * layer_macs(l, schedule[l].flavor, widths, image_size, num_classes)
            for l in rest}
    remainder = total_wo_pl - sum(target_wo_pl.values())
    if remainder < 0:
        raise CostModelError("target time exceeds total time")
    denom = sum(work.values())
    for l in rest:
        out[l] = remainder * work[l] / denom / schedule[l].executions
    return out


def fit_sw_times(arch: str, n: int, measured: dict, models: dict, parallelism: int = 16,
                 transfer_cycles_per_word: float = 1.0, widths=DEFAULT_WIDTHS, image_size: int = IMAGE_SIZE):
    """PS times consistent with one measured row, given the cycle models.

    Published rows are rounded to 0.01 s, so (total, target, ratio, PL total,
    speedup) are not exactly consistent with any one model.  The PS-only total
    and per-layer target times are adjusted by least squares, each residual
    scaled by its rounding step.  Returns ``(sw_times, total_wo_pl, target_wo_pl)``.
    """
    sched = build_schedule(arch, n)
    layers = list(measured["target_wo_pl"])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        probe = simulate_offload(OffloadPlan(arch, n, layers, parallelism, {l: 0.0 for l in sched.layers()},
                                             transfer_cycles_per_word), models, sched, widths, image_size)
    tw = probe.target_w_pl
    tgt = np.array([measured["target_wo_pl"][l] for l in layers], dtype=np.float64)
    ratio = np.array([measured["ratio_of_target"][l] for l in layers], dtype=np.float64) / 100.0
    T, Tw, S = (float(measured[k]) for k in ("total_wo_pl", "total_w_pl", "speedup"))

    def residuals(v):
        t_, g = v[0], v[1:]
        tw_total = t_ - g.sum() + tw
        return np.concatenate([[(t_ - T) / 0.005], (g - tgt) / 0.005, (g / t_ - ratio) / 5e-5,
                               [(tw_total - Tw) / 0.005, (t_ / tw_total - S) / 0.005]])

    sol = least_squares(residuals, np.concatenate([[T], tgt]))
    t_fit, g_fit = float(sol.x[0]), {l: float(v) for l, v in zip(layers, sol.x[1:])}
    return split_sw_times(sched, t_fit, g_fit, widths, image_size), t_fit, g_fit


# ---------------------------------------------------------------------------
# configuration


def _int_keys(d):
    return {int(k): v for k, v in d.items()}


def load_cost_config(path=None) -> dict:
    """Read a cost-model YAML config; ``None`` loads the shipped default."""
    if path is None:
        text = resources.files("rodenet").joinpath("resources", DEFAULT_CONFIG).read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    try:
        cfg = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise CostModelError(f"cannot parse cost-model config: {e}") from None
    if not isinstance(cfg, dict):
        raise CostModelError("cost-model config must be a mapping")
    for key in ("sw_times", "measurements"):
        if key in cfg:
            cfg[key] = {normalize_arch(a): _int_keys(v) for a, v in cfg[key].items()}
    return cfg


def models_from_config(cfg: dict) -> dict:
    clock = float(cfg.get("clock_hz", CLOCK_HZ))
    out = {}
    for layer, spec in cfg.get("layers", {}).items():
        if layer not in OFFLOADABLE:
            raise CostModelError(f"unknown layer {layer!r} in cost-model config")
        out[layer] = LayerCycleModel(float(spec["A"]), float(spec["B"]), clock)
    return out


def plans_from_config(cfg: dict) -> list[OffloadPlan]:
    """One plan per (architecture, N) that has both sw_times and an offload target."""
    plans = []
    par = int(cfg.get("parallelism", 16))
    xfer = float(cfg.get("transfer_cycles_per_word", 1.0))
    for arch, by_n in cfg.get("sw_times", {}).items():
        targets = cfg.get("offload", {}).get(arch)
        if targets is None:
            raise CostModelError(f"no offload target listed for {arch}")
        for n in sorted(by_n):
            plans.append(OffloadPlan(arch, n, tuple(targets), par, dict(by_n[n]), xfer))
    return plans


def calibrate_config(measurements: dict, points: dict, offload: dict, parallelism: int = 16,
                     clock_hz: float = CLOCK_HZ, transfer_cycles_per_word: float = 1.0) -> dict:
    """Build a full config from measured rows and cycle points.

    Layers with ``points`` are fitted directly; every other offloaded layer is
    calibrated from the rows' PL target times against the first fitted
    layer.  PS times per row then come from :func:`fit_sw_times`.
    """
    if not points:
        raise CostModelError("need cycle points for at least one layer")
    measurements = {normalize_arch(a): _int_keys(v) for a, v in measurements.items()}
    models = {l: fit_cycle_model(p, clock_hz) for l, p in points.items()}
    reference = models[next(iter(points))]
    obs = {}
    for arch, rows in measurements.items():
        for n, row in rows.items():
            sched = build_schedule(arch, n)
            for layer, t in row.get("target_w_pl", {}).items():
                obs.setdefault(layer, []).append((sched[layer].executions, t))
    for layer, o in obs.items():
        if layer not in models:
            models[layer] = calibrate_cycle_model(layer, o, reference, parallelism, transfer_cycles_per_word)
    sw = {}
    for arch, rows in measurements.items():
        for n, row in sorted(rows.items()):
            times, _, _ = fit_sw_times(arch, n, row, models, parallelism, transfer_cycles_per_word)
            sw.setdefault(arch, {})[n] = {k: float(v) for k, v in times.items()}
    return {
        "clock_hz": clock_hz,
        "transfer_cycles_per_word": transfer_cycles_per_word,
        "parallelism": parallelism,
        "layers": {l: {"A": m.A, "B": m.B} for l, m in models.items()},
        "offload": {normalize_arch(a): list(v) for a, v in offload.items()},
        "sw_times": sw,
    }


def simulate_config(cfg: dict) -> list[SimReport]:
    models = models_from_config(cfg)
    return [simulate_offload(p, models) for p in plans_from_config(cfg)]
