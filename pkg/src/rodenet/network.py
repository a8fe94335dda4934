"""Architectures, execution schedules, parameter accounting and inference.

Seven architectures share one layer skeleton (conv1, layer1, layer2_1,
layer2_2, layer3_1, layer3_2, fc) and differ in how many block instances
each residual layer stacks and how often each instance is executed.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import fixedpoint as fx
from .nn_ops import BatchNormParams, ConvParams, HeadParams, batchnorm_forward, conv2d_forward, head_forward, relu
from .odeblock import BlockParams, ode_block_forward, plain_block_forward
from .odesolve import SolverConfig

ARCHITECTURES = ("resnet", "odenet", "rodenet1", "rodenet2", "rodenet12", "rodenet3", "hybrid3")
DISPLAY_NAMES = {
    "resnet": "ResNet", "odenet": "ODENet", "rodenet1": "rODENet-1", "rodenet2": "rODENet-2",
    "rodenet12": "rODENet-1+2", "rodenet3": "rODENet-3", "hybrid3": "Hybrid-3",
}
_ALIASES = {"rodenet-1": "rodenet1", "rodenet-2": "rodenet2", "rodenet-1+2": "rodenet12",
            "rodenet1+2": "rodenet12", "rodenet-3": "rodenet3", "hybrid-3": "hybrid3"}

RESIDUAL_LAYERS = ("layer1", "layer2_1", "layer2_2", "layer3_1", "layer3_2")
LAYERS = ("conv1",) + RESIDUAL_LAYERS + ("fc",)
DEFAULT_WIDTHS = (16, 32, 64)
DEFAULT_CLASSES = 100
BYTES_PER_PARAM = 4

# (stage index of input width, stage index of output width, stride, spatial divisor)
_GEOMETRY = {
    "layer1": (0, 0, 1, 1),
    "layer2_1": (0, 1, 2, 2),
    "layer2_2": (1, 1, 1, 2),
    "layer3_1": (1, 2, 2, 4),
    "layer3_2": (2, 2, 1, 4),
}

# Stacked blocks / executions per block.  An int is a constant, a pair
# (k, d) means (N - k) / d.  Layers not listed are absent (0 / 0).
_TABLE4 = {
    "resnet": {"layer1": ((2, 6), 1), "layer2_2": ((8, 6), 1), "layer3_2": ((8, 6), 1)},
    "odenet": {"layer1": (1, (2, 6)), "layer2_2": (1, (8, 6)), "layer3_2": (1, (8, 6))},
    "rodenet1": {"layer1": (1, (6, 2))},
    "rodenet2": {"layer1": (1, 1), "layer2_2": (1, (8, 2))},
    "rodenet12": {"layer1": (1, (4, 4)), "layer2_2": (1, (8, 4))},
    "rodenet3": {"layer1": (1, 1), "layer3_2": (1, (8, 2))},
    "hybrid3": {"layer1": ((2, 6), 1), "layer2_2": ((8, 6), 1), "layer3_2": (1, (8, 6))},
}


class ArchitectureError(ValueError):
    pass


def normalize_arch(arch: str) -> str:
    key = arch.strip().lower()
    key = _ALIASES.get(key, key)
    if key not in ARCHITECTURES:
        raise ArchitectureError(f"unknown architecture {arch!r}; choose from {', '.join(ARCHITECTURES)}")
    return key


def validate_n(arch: str, n: int) -> None:
    arch = normalize_arch(arch)
    if int(n) != n or n < 20:
        raise ArchitectureError(f"N must be an integer >= 20, got {n}")
    if (n - 2) % 6:
        raise ArchitectureError(f"N={n} violates N = 2 (mod 6): (N-2)/6 and (N-8)/6 must be integers")
    if arch == "rodenet12" and n % 4:
        raise ArchitectureError(f"N={n} violates N = 0 (mod 4) required by rODENet-1+2: "
                                "(N-4)/4 and (N-8)/4 must be integers")


@dataclass(frozen=True)
class ScheduleEntry:
    stacked: int
    execs: int
    flavor: str  # "ode" or "plain"

    @property
    def executions(self) -> int:
        return self.stacked * self.execs


@dataclass
class Schedule:
    arch: str
    n: int
    entries: dict  # residual layer -> ScheduleEntry, in network order

    def __contains__(self, layer):
        return layer in ("conv1", "fc") or layer in self.entries

    def __getitem__(self, layer) -> ScheduleEntry:
        if layer in ("conv1", "fc"):
            return ScheduleEntry(1, 1, "plain")
        return self.entries[layer]

    def layers(self):
        return ["conv1"] + list(self.entries) + ["fc"]

    def total_block_executions(self) -> int:
        return sum(e.executions for e in self.entries.values())

    def ode_layers(self):
        return [k for k, e in self.entries.items() if e.flavor == "ode"]


def _eval(expr, n):
    if isinstance(expr, int):
        return expr
    k, d = expr
    return (n - k) // d


def build_schedule(arch: str, n: int) -> Schedule:
    """Per-layer (stacked blocks, executions per block) for one architecture."""
    arch = normalize_arch(arch)
    validate_n(arch, n)
    table = _TABLE4[arch]
    entries = {}
    for layer in RESIDUAL_LAYERS:
        if layer in ("layer2_1", "layer3_1"):
            entries[layer] = ScheduleEntry(1, 1, "plain")
            continue
        if layer not in table:
            continue
        s_expr, e_expr = table[layer]
        # a layer is an ODEBlock exactly when its instance is re-executed
        flavor = "ode" if not isinstance(e_expr, int) else "plain"
        entries[layer] = ScheduleEntry(_eval(s_expr, n), _eval(e_expr, n), flavor)
    return Schedule(arch, n, entries)


# ---------------------------------------------------------------------------
# parameter accounting


def block_param_count(in_ch: int, out_ch: int, flavor: str) -> int:
    extra = 1 if flavor == "ode" else 0
    return 9 * (in_ch + extra) * out_ch + 9 * (out_ch + extra) * out_ch + 4 * out_ch


def layer_channels(layer: str, widths=DEFAULT_WIDTHS):
    i, o, stride, _ = _GEOMETRY[layer]
    return widths[i], widths[o], stride


def layer_param_count(layer: str, flavor: str = "plain", widths=DEFAULT_WIDTHS,
                      num_classes=DEFAULT_CLASSES, in_channels=3) -> int:
    if layer == "conv1":
        return 9 * in_channels * widths[0] + 2 * widths[0]
    if layer == "fc":
        return widths[2] * num_classes + num_classes
    cin, cout, _ = layer_channels(layer, widths)
    return block_param_count(cin, cout, flavor)


def param_size_layer(layer: str, arch: str, n: int, widths=DEFAULT_WIDTHS, num_classes=DEFAULT_CLASSES,
                     in_channels=3) -> int:
    """Bytes of one block instance of ``layer`` (4 bytes per parameter)."""
    sched = build_schedule(arch, n)
    if layer not in sched:
        raise ArchitectureError(f"{layer} is absent from {DISPLAY_NAMES[sched.arch]}-{n}")
    return BYTES_PER_PARAM * layer_param_count(layer, sched[layer].flavor, widths, num_classes, in_channels)


def schedule_param_count(sched: Schedule, widths=DEFAULT_WIDTHS, num_classes=DEFAULT_CLASSES, in_channels=3) -> int:
    total = layer_param_count("conv1", widths=widths, in_channels=in_channels)
    total += layer_param_count("fc", widths=widths, num_classes=num_classes)
    for layer, e in sched.entries.items():
        total += e.stacked * layer_param_count(layer, e.flavor, widths)
    return total


def param_size_total(arch: str, n: int, widths=DEFAULT_WIDTHS, num_classes=DEFAULT_CLASSES, in_channels=3) -> int:
    """Total parameter bytes of an architecture."""
    return BYTES_PER_PARAM * schedule_param_count(build_schedule(arch, n), widths, num_classes, in_channels)


def reduction_vs_resnet(arch: str, n: int, **kw) -> float:
    """Percent parameter-size reduction relative to ResNet of the same N."""
    return 100.0 * (1.0 - param_size_total(arch, n, **kw) / param_size_total("resnet", n, **kw))


# ---------------------------------------------------------------------------
# model


@dataclass
class NetworkModel:
    """A built network: stem, residual layers per its schedule, head and solver settings.

    ``time_mode="unit"`` integrates each ODE layer over [0, 1] with
    ``h = 1/M``; ``"resnet"`` uses ``h = 1`` with the time channel clamped
    to zero, the configuration under which an ODE layer is exactly a stack
    of plain blocks sharing weights.
    """

    schedule: Schedule
    stem_conv: ConvParams
    stem_bn: BatchNormParams
    layers: dict  # layer -> list[BlockParams]
    head: HeadParams
    widths: tuple = DEFAULT_WIDTHS
    num_classes: int = DEFAULT_CLASSES
    in_channels: int = 3
    image_size: int = 32
    solver_method: str = "euler"
    steps_mode: str = "schedule"
    explicit_steps: dict = field(default_factory=dict)
    time_mode: str = "unit"
    norm_mean: np.ndarray | None = None
    norm_std: np.ndarray | None = None

    @property
    def arch(self) -> str:
        return self.schedule.arch

    @property
    def n(self) -> int:
        return self.schedule.n

    def solver_config(self, layer: str) -> SolverConfig:
        entry = self.schedule[layer]
        steps = entry.execs
        if self.steps_mode == "explicit":
            steps = int(self.explicit_steps.get(layer, steps))
        elif self.steps_mode != "schedule":
            raise ValueError(f"steps_mode must be 'schedule' or 'explicit', got {self.steps_mode!r}")
        if self.time_mode == "resnet":
            return SolverConfig(self.solver_method, 0.0, float(steps), steps)
        if self.time_mode != "unit":
            raise ValueError(f"time_mode must be 'unit' or 'resnet', got {self.time_mode!r}")
        return SolverConfig(self.solver_method, 0.0, 1.0, steps)

    @property
    def clamp_time(self) -> bool:
        return self.time_mode == "resnet"

    def named_parameters(self) -> dict[str, np.ndarray]:
        """Trainable arrays in a fixed order; values alias the model's arrays."""
        out = {"conv1.weight": self.stem_conv.weight, "conv1.bn.gamma": self.stem_bn.gamma,
               "conv1.bn.beta": self.stem_bn.beta}
        for layer, blocks in self.layers.items():
            for i, blk in enumerate(blocks):
                for k, v in blk.named_arrays().items():
                    out[f"{layer}.{i}.{k}"] = v
        out["fc.weight"] = self.head.weight
        out["fc.bias"] = self.head.bias
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out = {"conv1.bn.running_mean": self.stem_bn.running_mean,
               "conv1.bn.running_var": self.stem_bn.running_var}
        for layer, blocks in self.layers.items():
            for i, blk in enumerate(blocks):
                for k, v in blk.named_buffers().items():
                    out[f"{layer}.{i}.{k}"] = v
        return out

    def num_params(self) -> int:
        return sum(a.size for a in self.named_parameters().values())

    def param_bytes(self) -> int:
        return BYTES_PER_PARAM * schedule_param_count(self.schedule, self.widths, self.num_classes,
                                                      self.in_channels)

    def layer_param_bytes(self, layer: str) -> int:
        if layer == "conv1":
            return BYTES_PER_PARAM * layer_param_count("conv1", widths=self.widths, in_channels=self.in_channels)
        if layer == "fc":
            return BYTES_PER_PARAM * layer_param_count("fc", widths=self.widths, num_classes=self.num_classes)
        return BYTES_PER_PARAM * sum(b.num_params() for b in self.layers[layer])

    def normalize(self, images):
        if self.norm_mean is None:
            return np.asarray(images, dtype=np.float64)
        shape = (-1, 1, 1)
        return (np.asarray(images, dtype=np.float64) - self.norm_mean.reshape(shape)) / self.norm_std.reshape(shape)


def build_model(arch: str = "rodenet3", n: int = 20, widths=DEFAULT_WIDTHS, num_classes: int = DEFAULT_CLASSES,
                in_channels: int = 3, image_size: int = 32, seed: int | None = 0, zero: bool = False,
                schedule: Schedule | None = None, **solver) -> NetworkModel:
    """Build a model with He-normal convolutions, unit BN and a zero-bias head.

    ``zero=True`` builds an all-zero trunk (zero conv weights, gamma = 0) and
    a zero head, whose output is the uniform distribution.
    """
    sched = build_schedule(arch, n) if schedule is None else schedule
    if image_size % 4:
        raise ArchitectureError("image size must be divisible by 4 (two stride-2 stages)")
    rng = np.random.default_rng(seed)
    w0 = widths[0]
    if zero:
        stem_w = np.zeros((w0, in_channels, 3, 3))
    else:
        stem_w = rng.normal(0.0, np.sqrt(2.0 / (in_channels * 9)), size=(w0, in_channels, 3, 3))
    stem_bn = BatchNormParams.identity(w0)
    if zero:
        stem_bn.gamma[:] = 0.0
    layers = {}
    for layer, entry in sched.entries.items():
        cin, cout, stride = layer_channels(layer, widths)
        layers[layer] = [BlockParams.init(cin, cout, entry.flavor, stride, rng, zero)
                         for _ in range(entry.stacked)]
    if zero:
        head_w = np.zeros((num_classes, widths[2]))
    else:
        head_w = rng.normal(0.0, np.sqrt(1.0 / widths[2]), size=(num_classes, widths[2]))
    head = HeadParams(head_w, np.zeros(num_classes))
    return NetworkModel(sched, ConvParams(stem_w, 1), stem_bn, layers, head, tuple(widths), num_classes,
                        in_channels, image_size, **solver)


def forward(model: NetworkModel, images, numeric: str = "float", bn_mode: str | None = None,
            diagnostics: dict | None = None, normalized: bool = True):
    """Class probabilities for one ``(C,H,W)`` image or a ``(B,C,H,W)`` batch.

    ``numeric="q20"`` runs the stem and residual layers in Q20 fixed point and
    the head in float; ``diagnostics`` (if given) receives saturation counts.
    ``bn_mode`` defaults to running statistics for float and per-feature-map
    statistics for Q20.
    """
    x = np.asarray(images, dtype=np.float64)
    if not normalized:
        x = model.normalize(x)
    counter = None
    if numeric == "q20":
        counter = fx.SaturationCounter()
        x = fx.array_from_float(x, counter)
        bn_mode = bn_mode or "dynamic"
    elif numeric == "float":
        bn_mode = bn_mode or "running"
    else:
        raise ValueError(f"numeric must be 'float' or 'q20', got {numeric!r}")
    x = conv2d_forward(x, model.stem_conv.weight, 1, counter)
    x = relu(batchnorm_forward(x, model.stem_bn, bn_mode, counter=counter))
    for layer, entry in model.schedule.entries.items():
        blocks = model.layers[layer]
        if entry.flavor == "ode":
            x = ode_block_forward(x, blocks[0], model.solver_config(layer), bn_mode, model.clamp_time,
                                  counter=counter)
        else:
            for blk in blocks:
                x = plain_block_forward(x, blk, bn_mode, counter=counter)
    probs = head_forward(x, model.head)
    if diagnostics is not None and counter is not None:
        diagnostics["saturated"] = counter.count
        diagnostics["elements"] = counter.total
        diagnostics["saturation_rate"] = counter.rate
    return probs


def predict(model: NetworkModel, images, numeric="float", bn_mode=None):
    return np.argmax(forward(model, images, numeric, bn_mode), axis=-1)


def unroll_ode_layers(model: NetworkModel) -> NetworkModel:
    """Replace every ODE layer executed M times by M plain blocks sharing its weights.

    The time-channel weights are dropped, so the result matches the ODE
    model only in ``time_mode="resnet"``.  An unrolled ODENet has ResNet's
    schedule.
    """
    entries, layers = {}, {}
    for layer, entry in model.schedule.entries.items():
        blocks = model.layers[layer]
        if entry.flavor != "ode":
            entries[layer] = entry
            layers[layer] = blocks
            continue
        src = blocks[0]
        plain = []
        for _ in range(entry.execs):
            plain.append(BlockParams(
                ConvParams(np.ascontiguousarray(src.conv1.weight[:, :-1]), 1), _copy_bn(src.bn1),
                ConvParams(np.ascontiguousarray(src.conv2.weight[:, :-1]), 1), _copy_bn(src.bn2),
                "plain", src.in_ch, src.out_ch))
        entries[layer] = ScheduleEntry(entry.execs, 1, "plain")
        layers[layer] = plain
    arch = model.arch
    if arch == "odenet" and entries == build_schedule("resnet", model.n).entries:
        arch = "resnet"
    sched = Schedule(arch, model.n, entries)
    return NetworkModel(sched, model.stem_conv, model.stem_bn, layers, model.head, model.widths,
                        model.num_classes, model.in_channels, model.image_size, model.solver_method,
                        model.steps_mode, dict(model.explicit_steps), "unit", model.norm_mean, model.norm_std)


def _copy_bn(p: BatchNormParams) -> BatchNormParams:
    return BatchNormParams(p.gamma.copy(), p.beta.copy(), p.running_mean.copy(), p.running_var.copy(),
                           p.eps, p.momentum)
