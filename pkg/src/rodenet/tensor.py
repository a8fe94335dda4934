"""Channel-major feature maps.

Feature maps are plain numpy arrays shaped ``(C, H, W)`` or, batched,
``(B, C, H, W)``.  Float tensors are ``float64``/``float32``; fixed-point
tensors are ``int64`` arrays holding Q20 raw values.
"""
from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    pass


def check_chw(x: np.ndarray, name: str = "tensor") -> np.ndarray:
    """Validate a ``(C, H, W)`` or ``(B, C, H, W)`` feature map and return it."""
    x = np.asarray(x)
    if x.ndim not in (3, 4):
        raise ShapeError(f"{name}: expected (C,H,W) or (B,C,H,W), got shape {x.shape}")
    if min(x.shape) < 1:
        raise ShapeError(f"{name}: every dimension must be >= 1, got {x.shape}")
    return x


def as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    """Return ``(batched_x, was_single)`` so kernels can work on 4-D input."""
    x = check_chw(x)
    if x.ndim == 3:
        return x[None], True
    return x, False


def concat_time_channel(z: np.ndarray, t) -> np.ndarray:
    """Append one constant channel holding ``t`` to a feature map.

    For Q20 (``int64``) maps ``t`` must already be a raw fixed-point value.
    """
    z = check_chw(z, "z")
    shape = list(z.shape)
    shape[-3] = 1
    tc = np.full(shape, t, dtype=z.dtype)
    return np.concatenate([z, tc], axis=-3)
