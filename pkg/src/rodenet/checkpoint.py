"""Binary checkpoints: header, JSON manifest of named float32 tensors, payloads.

Layout (little-endian)::

    b"RODN" | u16 version | u8 arch id | u16 N | u32 manifest length | manifest JSON | payloads

The manifest holds model settings and an ordered tensor list
``{name, dtype, shape, kind}``; ``kind`` is ``param`` or ``buffer``.
Payloads follow in manifest order.
"""
from __future__ import annotations

import json
import os
import struct

import numpy as np

from .network import ARCHITECTURES, NetworkModel, build_model

MAGIC = b"RODN"
VERSION = 1
_HEADER = struct.Struct("<4sHBHI")
_DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def _model_meta(model: NetworkModel) -> dict:
    return {
        "widths": list(model.widths), "num_classes": model.num_classes, "in_channels": model.in_channels,
        "image_size": model.image_size, "solver_method": model.solver_method, "steps_mode": model.steps_mode,
        "explicit_steps": dict(model.explicit_steps), "time_mode": model.time_mode,
        "norm_mean": None if model.norm_mean is None else [float(v) for v in model.norm_mean],
        "norm_std": None if model.norm_std is None else [float(v) for v in model.norm_std],
    }


def to_bytes(model: NetworkModel, extra: dict | None = None) -> bytes:
    tensors = [(k, v, "param") for k, v in model.named_parameters().items()]
    tensors += [(k, v, "buffer") for k, v in model.named_buffers().items()]
    manifest = {
        "model": _model_meta(model),
        "extra": extra or {},
        "tensors": [{"name": k, "dtype": "f32", "shape": list(v.shape), "kind": kind} for k, v, kind in tensors],
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    head = _HEADER.pack(MAGIC, VERSION, ARCHITECTURES.index(model.arch), model.n, len(blob))
    payload = b"".join(np.ascontiguousarray(v, dtype=_DTYPE).tobytes() for _, v, _ in tensors)
    return head + blob + payload


def from_bytes(buf: bytes) -> tuple[NetworkModel, dict]:
    """Rebuild a model; returns ``(model, extra)``.

    Raises
    ------
    CheckpointError
        On a bad header, a truncated payload, or tensors that do not match
        the architecture's parameter size.
    """
    if len(buf) < _HEADER.size:
        raise CheckpointError("checkpoint is truncated")
    magic, version, arch_id, n, mlen = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if arch_id >= len(ARCHITECTURES):
        raise CheckpointError(f"unknown architecture id {arch_id}")
    off = _HEADER.size
    try:
        manifest = json.loads(buf[off:off + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt manifest: {e}") from None
    off += mlen
    meta = manifest["model"]
    model = build_model(ARCHITECTURES[arch_id], n, widths=tuple(meta["widths"]), num_classes=meta["num_classes"],
                        in_channels=meta["in_channels"], image_size=meta["image_size"], seed=None,
                        solver_method=meta["solver_method"], steps_mode=meta["steps_mode"],
                        explicit_steps=dict(meta["explicit_steps"]), time_mode=meta["time_mode"])
    if meta["norm_mean"] is not None:
        model.norm_mean = np.array(meta["norm_mean"])
        model.norm_std = np.array(meta["norm_std"])
    targets = {"param": model.named_parameters(), "buffer": model.named_buffers()}
    param_bytes = 0
    for t in manifest["tensors"]:
        if t["dtype"] != "f32":
            raise CheckpointError(f"tensor {t['name']}: unsupported dtype {t['dtype']}")
        dest = targets.get(t["kind"], {}).get(t["name"])
        if dest is None:
            raise CheckpointError(f"tensor {t['name']} does not belong to {ARCHITECTURES[arch_id]}")
        if tuple(t["shape"]) != dest.shape:
            raise CheckpointError(f"tensor {t['name']}: shape {t['shape']} != expected {list(dest.shape)}")
        nbytes = dest.size * _DTYPE.itemsize
        if off + nbytes > len(buf):
            raise CheckpointError("checkpoint payload is truncated")
        dest[...] = np.frombuffer(buf, dtype=_DTYPE, count=dest.size, offset=off).reshape(dest.shape)
        off += nbytes
        if t["kind"] == "param":
            param_bytes += nbytes
    if param_bytes != model.param_bytes():
        raise CheckpointError(f"parameter payload is {param_bytes} bytes, architecture needs {model.param_bytes()}")
    if off != len(buf):
        raise CheckpointError(f"{len(buf) - off} trailing bytes after payload")
    return model, manifest.get("extra", {})


def save(model: NetworkModel, path: str | os.PathLike, extra: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(model, extra))


def load(path: str | os.PathLike) -> tuple[NetworkModel, dict]:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
