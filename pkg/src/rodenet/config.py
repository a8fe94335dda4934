"""Run configuration files (YAML): architecture, solver, numerics, training and data.

Example::

    arch: rodenet3
    N: 20
    solver: {method: euler, steps_mode: schedule}
    bn_mode: running
    numeric: float
    model: {widths: [16, 32, 64], num_classes: 100, image_size: 32, seed: 0}
    training: {epochs: 200, batch_size: 128, grad_mode: unrolled}
    data: {variant: cifar100, label: fine}
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields

import yaml

from .network import DEFAULT_CLASSES, DEFAULT_WIDTHS, ArchitectureError, build_model, normalize_arch, validate_n
from .nn_ops import BN_MODES
from .odesolve import TABLEAUS
from .training import TrainConfig

NUMERICS = ("float", "q20")
STEPS_MODES = ("schedule", "explicit")
TIME_MODES = ("unit", "resnet")
_TOP_KEYS = {"arch", "N", "n", "solver", "bn_mode", "numeric", "model", "training", "data"}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    arch: str = "rodenet3"
    n: int = 20
    solver_method: str = "euler"
    steps_mode: str = "schedule"
    explicit_steps: dict = field(default_factory=dict)
    time_mode: str = "unit"
    bn_mode: str | None = None
    numeric: str = "float"
    widths: tuple = DEFAULT_WIDTHS
    num_classes: int = DEFAULT_CLASSES
    image_size: int = 32
    in_channels: int = 3
    seed: int = 0
    training: TrainConfig = field(default_factory=TrainConfig)
    data: dict = field(default_factory=dict)

    def build_model(self):
        return build_model(self.arch, self.n, widths=self.widths, num_classes=self.num_classes,
                           in_channels=self.in_channels, image_size=self.image_size, seed=self.seed,
                           solver_method=self.solver_method, steps_mode=self.steps_mode,
                           explicit_steps=dict(self.explicit_steps), time_mode=self.time_mode)


def _pick(d: dict, key: str, allowed: tuple, default):
    v = d.get(key, default)
    if v is not None and v not in allowed:
        raise ConfigError(f"{key} must be one of {allowed}, got {v!r}")
    return v


def parse_config(raw: dict) -> RunConfig:
    """Validate a parsed mapping and return a :class:`RunConfig`."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        arch = normalize_arch(str(raw.get("arch", "rodenet3")))
        n = int(raw.get("N", raw.get("n", 20)))
        validate_n(arch, n)
    except ArchitectureError as e:
        raise ConfigError(str(e)) from None
    solver = raw.get("solver") or {}
    model = raw.get("model") or {}
    tr = dict(raw.get("training") or {})
    known = {f.name for f in fields(TrainConfig)}
    bad = set(tr) - known
    if bad:
        raise ConfigError(f"unknown training keys: {sorted(bad)}")
    try:
        training = TrainConfig(**tr)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"training: {e}") from None
    explicit = {str(k): int(v) for k, v in (solver.get("steps") or {}).items()}
    if any(v < 1 for v in explicit.values()):
        raise ConfigError("solver.steps must be positive")
    widths = tuple(int(w) for w in model.get("widths", DEFAULT_WIDTHS))
    if len(widths) != 3 or min(widths) < 1:
        raise ConfigError(f"model.widths must be three positive ints, got {list(widths)}")
    image_size = int(model.get("image_size", 32))
    if image_size < 4 or image_size % 4:
        raise ConfigError("model.image_size must be a positive multiple of 4")
    return RunConfig(
        arch=arch, n=n,
        solver_method=_pick(solver, "method", tuple(TABLEAUS), "euler"),
        steps_mode=_pick(solver, "steps_mode", STEPS_MODES, "schedule"),
        explicit_steps=explicit,
        time_mode=_pick(solver, "time_mode", TIME_MODES, "unit"),
        bn_mode=_pick(raw, "bn_mode", BN_MODES, None),
        numeric=_pick(raw, "numeric", NUMERICS, "float"),
        widths=widths, num_classes=int(model.get("num_classes", DEFAULT_CLASSES)), image_size=image_size,
        in_channels=int(model.get("in_channels", 3)), seed=int(model.get("seed", 0)),
        training=training, data=dict(raw.get("data") or {}),
    )


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse config {path}: {e}") from None
    return parse_config(raw or {})
