"""Normalization layers: LayerNorm, ScaleNorm, RMSNorm, FixNorm and cosine logits.

All norms act on the last axis. LayerNorm adds ``eps`` to the variance; the
ℓ2-based norms clamp the denominator norm at ``eps`` instead, so a zero vector
maps to zero rather than to NaN.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .tensor import ShapeError, Tensor, _check, _make, as_tensor, div, matmul, mul, norm_l2
from . import tensor as _t

VARIANTS = ("LayerNorm", "ScaleNorm", "RMSNorm", "None")
G_MODES = ("learned", "fixed")


@dataclass(frozen=True)
class NormSpec:
    variant: str = "LayerNorm"
    eps: float = 1e-5
    g_mode: str = "learned"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown norm variant {self.variant!r}; expected one of {VARIANTS}")
        if not self.eps > 0:
            raise ValueError(f"norm eps must be positive, got {self.eps}")
        if self.g_mode not in G_MODES:
            raise ValueError(f"unknown g_mode {self.g_mode!r}")


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """``(x - mean) / sqrt(var + eps) * gain + bias`` with population variance."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    if _t._strict:
        _check("layer_norm", x.data, gain.data, bias.data)
    xc = x.data - x.data.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def bwd(g):
        gh = g * gd
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(xhat * gd + bias.data, (x, gain, bias), bwd, "layer_norm")


def scale_norm(x, g, eps: float = 1e-5) -> Tensor:
    """``g * x / max(||x||, eps)`` with a single scalar ``g``."""
    x, g = as_tensor(x), as_tensor(g)
    if g.size != 1:
        raise ShapeError(f"scale_norm: g must be a scalar, got shape {g.shape}")
    if _t._strict:
        _check("scale_norm", x.data, g.data)
    xd = x.data
    raw = np.sqrt(np.sum(xd * xd, axis=-1, keepdims=True))
    live = raw > eps
    n = np.maximum(raw, eps)
    gv = float(g.data.reshape(-1)[0])
    unit = xd / n
    gshape = g.shape

    def bwd(gy):
        # clamped rows have a constant denominator, so only the g/eps term remains
        proj = np.where(live, np.sum(gy * unit, axis=-1, keepdims=True), 0.0)
        gx = (gv / n) * (gy - unit * proj)
        return gx, np.full(gshape, np.sum(gy * unit))

    return _make(unit * gv, (x, g), bwd, "scale_norm")


def rms_norm(x, gain, eps: float = 1e-5) -> Tensor:
    """``gain * x / max(RMS(x), eps)`` where ``RMS(x) = ||x|| / sqrt(d)``."""
    x, gain = as_tensor(x), as_tensor(gain)
    d = x.shape[-1]
    if gain.shape != (d,):
        raise ShapeError(f"rms_norm: x {x.shape} vs gain {gain.shape}")
    if _t._strict:
        _check("rms_norm", x.data, gain.data)
    xd = x.data
    raw = np.sqrt(np.mean(xd * xd, axis=-1, keepdims=True))
    live = raw > eps
    r = np.maximum(raw, eps)
    xr = xd / r
    gd = gain.data

    def bwd(gy):
        u = gy * gd
        proj = np.where(live, np.mean(u * xr, axis=-1, keepdims=True), 0.0)
        gx = (u - xr * proj) / r
        return gx, (gy * xr).sum(axis=tuple(range(gy.ndim - 1)))

    return _make(xr * gd, (x, gain), bwd, "rms_norm")


def fix_norm_rows(W, eps: float = 1e-5) -> Tensor:
    """Divide every row of ``W`` by its ℓ2 norm (clamped at ``eps``)."""
    W = as_tensor(W)
    return div(W, norm_l2(W, axis=-1, eps=eps))


def cosine_logits(x, W, g, eps: float = 1e-5) -> Tensor:
    """``g * (w . x) / (||w|| ||x||)`` for every row ``w`` of ``W``.

    ``x`` is (..., d) and ``W`` is (V, d); the result is (..., V) and every
    entry lies in ``[-|g|, |g|]``.
    """
    x, W, g = as_tensor(x), as_tensor(W), as_tensor(g)
    if x.ndim == 1:
        return _t.reshape(cosine_logits(_t.reshape(x, (1, -1)), W, g, eps), (W.shape[0],))
    dots = matmul(x, _t.transpose(W))
    xn = norm_l2(x, axis=-1, eps=eps)
    wn = _t.reshape(norm_l2(W, axis=-1, eps=eps), (W.shape[0],))
    return mul(div(div(dots, xn), wn), _t.reshape(g, ()))


# Forward elementwise-operation accounting per vector of size d.
#   LayerNorm: mean (sum, d) + centre (d) + square (d) + variance (sum, d)
#              + divide by std (d) + gain (d) + bias (d)             = 7d
#   ScaleNorm: square (d) + sum for the norm (d) + scale by g/norm (d) = 3d
#   RMSNorm:   ScaleNorm's three passes + per-unit gain (d)           = 4d
_OPS_PER_UNIT = {"LayerNorm": 7, "ScaleNorm": 3, "RMSNorm": 4, "None": 0}


def norm_op_count(variant: str, d: int) -> int:
    if variant not in _OPS_PER_UNIT:
        raise ValueError(f"unknown norm variant {variant!r}")
    if d < 1:
        raise ValueError("d must be >= 1")
    return _OPS_PER_UNIT[variant] * d


def norm_param_count(variant: str, d: int) -> int:
    return {"LayerNorm": 2 * d, "ScaleNorm": 1, "RMSNorm": d, "None": 0}[variant]


def init_norm_params(spec: NormSpec, d: int, g_init: float | None = None) -> dict[str, Tensor]:
    """Fresh parameters for one norm site, keyed by role (``gain``/``bias``/``g``)."""
    g0 = math.sqrt(d) if g_init is None else g_init
    learn = spec.g_mode == "learned"
    if spec.variant == "LayerNorm":
        params = {"gain": Tensor(np.ones(d), True), "bias": Tensor(np.zeros(d), True)}
    elif spec.variant == "ScaleNorm":
        params = {"g": Tensor(np.array(g0), learn)}
    elif spec.variant == "RMSNorm":
        # tied-gain start: uniform g/sqrt(d) reproduces ScaleNorm(g) exactly
        params = {"gain": Tensor(np.full(d, g0 / math.sqrt(d)), learn)}
    else:
        params = {}
    count = sum(p.size for p in params.values())
    assert count == norm_param_count(spec.variant, d), (spec.variant, count)
    return params


def apply_norm(spec: NormSpec, params: Mapping[str, Tensor], x) -> Tensor:
    if spec.variant == "LayerNorm":
        return layer_norm(x, params["gain"], params["bias"], spec.eps)
    if spec.variant == "ScaleNorm":
        return scale_norm(x, params["g"], spec.eps)
    if spec.variant == "RMSNorm":
        return rms_norm(x, params["gain"], spec.eps)
    return as_tensor(x)
