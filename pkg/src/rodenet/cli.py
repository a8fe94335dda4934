"""Command-line front end.

Exit status: 0 success, 2 usage error, 3 data or config error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
import warnings

import numpy as np
import yaml

from . import checkpoint, costmodel
from .config import ConfigError, load_config
from .data import ChannelNormalizer, DataError, load_cifar, make_synthetic
from .fixedpoint import FixedPointError
from .network import (ARCHITECTURES, DISPLAY_NAMES, LAYERS, ArchitectureError, build_schedule, forward,
                      layer_param_count, normalize_arch, param_size_total, reduction_vs_resnet)
from .odesolve import SolverError
from .tensor import ShapeError
from .training import TrainingError, evaluate, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
DEPTHS = (20, 32, 44, 56)
DATA_ERRORS = (ConfigError, DataError, ArchitectureError, costmodel.CostModelError, checkpoint.CheckpointError,
               ShapeError, OSError, yaml.YAMLError)
NUMERIC_ERRORS = (SolverError, FixedPointError, TrainingError, FloatingPointError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _table(header, rows, out, csv_path=None):
    """Print an aligned table and optionally write it as CSV."""
    cells = [[str(c) for c in header]] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    for r in cells:
        out.write("  ".join(c.rjust(w) for c, w in zip(r, widths)).rstrip() + "\n")
    if csv_path:
        with open(csv_path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(cells)


def _kb(nbytes):
    return f"{nbytes / 1000:.3f}"


# ---------------------------------------------------------------------------
# commands


def cmd_describe(args, out):
    sched = build_schedule(args.arch, args.n)
    rows = []
    for layer in sched.layers():
        e = sched[layer]
        kind = "conv" if layer == "conv1" else ("fc" if layer == "fc" else e.flavor)
        rows.append([layer, kind, e.stacked, e.execs, e.executions])
    out.write(f"{DISPLAY_NAMES[sched.arch]}-{sched.n}\n")
    _table(["layer", "kind", "stacked", "execs_per_block", "executions"], rows, out, args.csv)
    out.write(f"residual block executions: {sched.total_block_executions()}\n")
    return EXIT_OK


def cmd_params(args, out):
    if args.all:
        rows = []
        for arch in ARCHITECTURES:
            for n in DEPTHS:
                if arch == "rodenet12" and n % 4:
                    continue
                total = param_size_total(arch, n)
                rows.append([DISPLAY_NAMES[arch], n, _kb(total), f"{reduction_vs_resnet(arch, n):.2f}"])
        _table(["arch", "N", "total_kB", "reduction_vs_resnet_pct"], rows, out, args.csv)
        return EXIT_OK
    sched = build_schedule(args.arch, args.n)
    rows = []
    for layer in LAYERS:
        if layer not in sched:
            rows.append([layer, "-", 0, _kb(0), _kb(0)])
            continue
        e = sched[layer]
        flavor = "plain" if layer in ("conv1", "fc") else e.flavor
        block = 4 * layer_param_count(layer, flavor)
        rows.append([layer, flavor, e.stacked, _kb(block), _kb(block * e.stacked)])
    _table(["layer", "flavor", "stacked", "block_kB", "layer_kB"], rows, out, args.csv)
    total = param_size_total(sched.arch, sched.n)
    red = reduction_vs_resnet(sched.arch, sched.n)
    out.write(f"total {_kb(total)} kB\n")
    out.write(f"{-red:+.2f}% vs ResNet-{sched.n}\n")
    return EXIT_OK


def _load_images(path, model):
    if path.endswith(".npy"):
        x = np.load(path)
    else:
        x = load_cifar(path, "cifar100" if os.path.getsize(path) % 3074 == 0 else "cifar10").images
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != (model.in_channels, model.image_size, model.image_size):
        raise DataError(f"images of shape {x.shape[1:]} do not fit a "
                        f"{model.in_channels}x{model.image_size}x{model.image_size} model")
    return x


def cmd_infer(args, out):
    model, _ = checkpoint.load(args.checkpoint)
    x = _load_images(args.image, model)
    diag = {}
    probs = forward(model, x, args.numeric, args.bn_mode, diagnostics=diag, normalized=False)
    rows = [[i, int(p.argmax()), f"{p.max():.6f}"] for i, p in enumerate(probs)]
    _table(["index", "class", "probability"], rows, out, args.csv)
    if diag:
        out.write(f"saturated {diag['saturated']} of {diag['elements']} ({diag['saturation_rate']:.3e})\n")
    return EXIT_OK


def _dataset(spec, cfg):
    d = cfg.data
    if spec == "synthetic":
        return make_synthetic(int(d.get("size", 64)), cfg.num_classes, cfg.image_size,
                              float(d.get("noise", 0.5)), int(d.get("seed", cfg.seed)), cfg.in_channels)
    return load_cifar(spec, d.get("variant", "cifar100"), d.get("label", "fine"))


def cmd_train(args, out):
    cfg = load_config(args.config)
    ds = _dataset(args.data, cfg)
    if ds.num_classes != cfg.num_classes:
        raise ConfigError(f"data has {ds.num_classes} classes but model.num_classes is {cfg.num_classes}")
    if ds.images.shape[1:] != (cfg.in_channels, cfg.image_size, cfg.image_size):
        raise ConfigError(f"data images are {ds.images.shape[1:]}, config expects "
                          f"{(cfg.in_channels, cfg.image_size, cfg.image_size)}")
    if args.epochs is not None:
        cfg.training.epochs = args.epochs
    model = cfg.build_model()
    norm = ChannelNormalizer().fit(ds.images)
    model.norm_mean, model.norm_std = norm.mean_, norm.std_ + norm.eps
    ds.images = norm.transform(ds.images)
    result = train(model, ds, cfg.training, log_path=args.log)
    loss, acc = evaluate(model, ds)
    checkpoint.save(model, args.out, extra={"epochs": cfg.training.epochs})
    rows = [[m.epoch, f"{m.lr:.6g}", f"{m.train_loss:.6f}", f"{m.train_acc:.4f}"] for m in result.history]
    _table(["epoch", "lr", "train_loss", "train_acc"], rows, out, args.csv)
    out.write(f"final loss {loss:.6f} accuracy {acc:.4f}; saved {args.out}\n")
    return EXIT_OK


def _plan_config(path):
    """A plan file is either a full cost config or one plan merged onto the default."""
    if path is None:
        return costmodel.load_cost_config()
    cfg = costmodel.load_cost_config(path)
    if "arch" not in cfg:
        return cfg
    base = costmodel.load_cost_config()
    arch, n = normalize_arch(cfg["arch"]), int(cfg.get("N", cfg.get("n", 20)))
    sw = cfg.get("sw_times") or base.get("sw_times", {}).get(arch, {}).get(n)
    if sw is None:
        raise costmodel.CostModelError(f"no sw_times for {arch} N={n}; give them in the plan file")
    merged = dict(base)
    for k in ("clock_hz", "transfer_cycles_per_word", "parallelism", "layers"):
        if k in cfg:
            merged[k] = cfg[k]
    merged["offload"] = {arch: list(cfg.get("offload_layers", base["offload"].get(arch, [])))}
    merged["sw_times"] = {arch: {n: sw}}
    return merged


def cmd_simulate(args, out):
    cfg = _plan_config(args.plan)
    if args.parallelism is not None:
        cfg["parallelism"] = args.parallelism
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        reports = costmodel.simulate_config(cfg)
    rows = []
    for r in reports:
        for i, layer in enumerate(r.offload_layers):
            first = i == 0
            rows.append([DISPLAY_NAMES[r.arch] if first else "", r.n if first else "",
                         f"{r.total_wo_pl:.4f}" if first else "", layer,
                         f"{r.layer_target_wo_pl[layer]:.4f}",
                         f"{100 * r.layer_target_wo_pl[layer] / r.total_wo_pl:.2f}",
                         f"{r.layer_target_w_pl[layer]:.4f}",
                         f"{r.total_w_pl:.4f}" if first else "", f"{r.overall_speedup:.2f}" if first else ""])
    _table(["arch", "N", "total_wo_pl_s", "target", "target_wo_pl_s", "ratio_pct", "target_w_pl_s",
            "total_w_pl_s", "speedup"], rows, out, args.csv)
    for w in {str(w.message) for w in caught}:
        out.write(f"warning: {w}\n")
    return EXIT_OK


def _read_points(path):
    if path.endswith(".csv"):
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        pts = {}
        try:
            for r in rows:
                pts.setdefault(r.get("layer", "layer3_2"), []).append((float(r["n"]), float(r["cycles"])))
        except (KeyError, ValueError) as e:
            raise DataError(f"{path}: points CSV needs columns n, cycles (and optionally layer): {e}") from None
        return {"cycle_points": pts}
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict) or "cycle_points" not in doc:
        raise DataError(f"{path}: expected a mapping with 'cycle_points'")
    return doc


def cmd_calibrate(args, out):
    doc = _read_points(args.points)
    rows = []
    for layer, pts in doc["cycle_points"].items():
        m = costmodel.fit_cycle_model(pts)
        rows.append([layer, f"{m.A:.2f}", f"{m.B:.2f}", f"{m.max_residual:.0f}", f"{100 * m.max_rel_residual:.3f}",
                     costmodel.layer_cycles(m, 16)])
    _table(["layer", "A", "B", "max_residual_cycles", "max_residual_pct", "cycles_n16"], rows, out, args.csv)
    if "measurements" in doc:
        cfg = costmodel.calibrate_config(doc["measurements"], doc["cycle_points"], doc.get("offload", {}))
        for layer, ab in cfg["layers"].items():
            if layer not in doc["cycle_points"]:
                out.write(f"calibrated {layer}: A={ab['A']:.2f} B={ab['B']:.2f}\n")
        if args.out:
            with open(args.out, "w") as fh:
                yaml.safe_dump(cfg, fh, sort_keys=False)
            out.write(f"wrote {args.out}\n")
    elif args.out:
        raise DataError("--out needs measurements in the points file")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rodenet", description="ODENet / rODENet models, training and offload cost model.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--csv", metavar="PATH", help="also write the table as CSV")

    sp = sub.add_parser("describe", help="print an architecture's execution schedule")
    sp.add_argument("--arch", required=True)
    sp.add_argument("--n", type=int, required=True)
    common(sp)
    sp = sub.add_parser("params", help="parameter sizes and reduction vs ResNet")
    sp.add_argument("--arch", default="rodenet3")
    sp.add_argument("--n", type=int, default=20)
    sp.add_argument("--all", action="store_true", help="all architectures at N in 20, 32, 44, 56")
    common(sp)
    sp = sub.add_parser("infer", help="classify images with a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--image", required=True, help=".npy array or CIFAR binary file")
    sp.add_argument("--numeric", choices=("float", "q20"), default="float")
    sp.add_argument("--bn-mode", choices=("running", "dynamic", "batch"), default=None)
    common(sp)
    sp = sub.add_parser("train", help="train a model from a config file")
    sp.add_argument("--config", required=True)
    sp.add_argument("--data", required=True, help="CIFAR binary file, or 'synthetic'")
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--epochs", type=int, default=None, help="override training.epochs")
    sp.add_argument("--log", default=None, help="append per-epoch metrics CSV here")
    common(sp)
    sp = sub.add_parser("simulate", help="simulate PS/PL offload")
    sp.add_argument("--plan", default=None, help="plan or cost-model YAML (default: shipped config)")
    sp.add_argument("--parallelism", type=int, choices=costmodel.PARALLELISMS, default=None)
    common(sp)
    sp = sub.add_parser("calibrate", help="fit cycle models from measured points")
    sp.add_argument("--points", required=True, help="YAML with cycle_points (and measurements), or CSV n,cycles")
    sp.add_argument("--out", default=None, help="write a calibrated cost-model config")
    common(sp)
    return p


COMMANDS = {"describe": cmd_describe, "params": cmd_params, "infer": cmd_infer, "train": cmd_train,
            "simulate": cmd_simulate, "calibrate": cmd_calibrate}


def _limit_threads():
    n = os.environ.get("RODENET_THREADS")
    if not n:
        return None
    try:
        limit = int(n)
    except ValueError:
        raise UsageError(f"RODENET_THREADS must be an integer, got {n!r}") from None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=max(1, limit))


def run(argv=None, out=None) -> int:
    """Run one command; returns the exit status."""
    out = sys.stdout if out is None else out
    err = sys.stderr
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("missing command; choose from " + ", ".join(COMMANDS))
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        limiter = _limit_threads()
        try:
            return COMMANDS[args.command](args, out)
        finally:
            if limiter is not None:
                limiter.unregister()
    except UsageError as e:
        err.write(f"rodenet: usage error: {e}\n")
        return EXIT_USAGE
    except NUMERIC_ERRORS as e:
        err.write(f"rodenet: numeric error: {e}\n")
        return EXIT_NUMERIC
    except DATA_ERRORS as e:
        msg = f"{e.strerror}: {e.filename}" if isinstance(e, OSError) and e.strerror else str(e)
        err.write(f"rodenet: {msg}\n")
        return EXIT_DATA
    except ValueError as e:
        err.write(f"rodenet: invalid value: {e}\n")
        return EXIT_DATA


def main():  # pragma: no cover
    sys.exit(run())


def run_capture(argv) -> tuple[int, str]:
    """Run and return ``(status, stdout text)``."""
    buf = io.StringIO()
    return run(argv, buf), buf.getvalue()
