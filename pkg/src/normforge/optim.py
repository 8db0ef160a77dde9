"""Adam and the InvSqrtDecay / ValDecay / NoWarmup learning-rate schedules."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from .tensor import NonFiniteError, Tensor

SCHEDULES = ("InvSqrtDecay", "ValDecay", "NoWarmup")


class DivergenceError(NonFiniteError):
    """A loss or gradient went non-finite; the run is marked failed."""


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
              state: AdamState, lr: float, strict: bool = True) -> AdamState:
    """One bias-corrected Adam update, applied in place to ``params``."""
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if strict:
        for k, g in grads.items():
            if not np.isfinite(g).all():
                raise DivergenceError(f"non-finite gradient for {k}")
    state.t += 1
    b1, b2, t = state.beta1, state.beta2, state.t
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for k, g in grads.items():
        p = params[k]
        if k not in state.m:
            state.m[k] = np.zeros(p.shape)
            state.v[k] = np.zeros(p.shape)
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


def lr_invsqrt(n: int, lam: float, d: int, n_warmup: int) -> float:
    """Linear warmup then inverse-square-root decay, peaking at ``n = n_warmup``."""
    if n < 1:
        raise ValueError("step n must be >= 1")
    if n_warmup <= 0:
        return lam / math.sqrt(d) / math.sqrt(n)
    return lam / math.sqrt(d) * min(1.0 / math.sqrt(n), n / n_warmup ** 1.5)


@dataclass(frozen=True)
class ScheduleSpec:
    kind: str = "NoWarmup"
    lam: float = 1.0
    d: int = 0  # 0 means the model's d_model
    n_warmup: int = 8000
    base_lr: float = 3e-4
    alpha_decay: float = 0.8
    patience: int = 3
    min_lr: float = 1e-6

    def __post_init__(self):
        if self.kind not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.kind!r}; expected one of {SCHEDULES}")
        if not 0.0 < self.alpha_decay < 1.0:
            raise ValueError("alpha_decay must be in (0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not self.min_lr > 0:
            raise ValueError("min_lr must be positive")
        if self.kind == "ValDecay" and self.n_warmup < 1:
            raise ValueError("ValDecay needs n_warmup >= 1")
        if self.kind == "NoWarmup" and not self.base_lr > 0:
            raise ValueError("NoWarmup needs a positive base_lr")


@dataclass
class ScheduleState:
    step: int = 0
    best: float = -math.inf
    since_best: int = 0
    decay: float = 1.0  # product of all validation decays so far
    lr: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def _base_lr(spec: ScheduleSpec, n: int, d: int) -> float:
    if spec.kind == "InvSqrtDecay":
        return lr_invsqrt(n, spec.lam, d, spec.n_warmup)
    if spec.kind == "ValDecay":
        # warmup along the InvSqrtDecay ramp, then hold at its peak
        return spec.lam / math.sqrt(d) * min(n, spec.n_warmup) / spec.n_warmup ** 1.5
    return spec.base_lr


def lr_val_step(state: ScheduleState, spec: ScheduleSpec, dev_score: float | None = None,
                d: int | None = None) -> ScheduleState:
    """Advance the schedule.

    Without ``dev_score`` this is an optimizer step: the step counter moves
    and ``state.lr`` becomes the rate for that step. With a score it is an
    evaluation: after ``patience`` evaluations without a new best, ValDecay
    and NoWarmup multiply the rate by ``alpha_decay`` and the count restarts.
    """
    d = d or spec.d
    if not d and spec.kind != "NoWarmup":
        raise ValueError("model dimension d is required for InvSqrtDecay/ValDecay")
    if dev_score is None:
        state.step += 1
        state.lr = _base_lr(spec, state.step, d) * state.decay
        return state
    if dev_score > state.best:
        state.best = dev_score
        state.since_best = 0
    else:
        state.since_best += 1
        if spec.kind != "InvSqrtDecay" and state.since_best >= spec.patience:
            state.decay *= spec.alpha_decay
            state.since_best = 0
            state.lr = _base_lr(spec, max(state.step, 1), d) * state.decay
    return state


def current_lr(state: ScheduleState, spec: ScheduleSpec, d: int) -> float:
    """Rate the next optimizer step would use, without advancing the state."""
    return _base_lr(spec, state.step + 1, d) * state.decay
