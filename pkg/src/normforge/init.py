"""Weight initializers.

All samplers draw from a caller-supplied ``numpy.random.Generator``; the
harness seeds a PCG64 generator per run, so a given scheme and seed always
produce the same parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

ATTENTION_INITS = ("xavier_normal", "small_init")
EMBEDDING_INITS = ("auto", "gaussian_inv_sqrt_d", "uniform_pm_0_01")


@dataclass(frozen=True)
class InitScheme:
    attention_init: str = "small_init"
    # "auto" picks uniform_pm_0_01 for FixNorm models, gaussian_inv_sqrt_d otherwise
    embedding_init: str = "auto"
    # 0 means sqrt(d_model)
    g_init: float = 0.0

    def __post_init__(self):
        if self.attention_init not in ATTENTION_INITS:
            raise ValueError(f"unknown attention_init {self.attention_init!r}")
        if self.embedding_init not in EMBEDDING_INITS:
            raise ValueError(f"unknown embedding_init {self.embedding_init!r}")
        if self.g_init < 0:
            raise ValueError("g_init must be positive (or 0 for sqrt(d))")


def xavier_std(d_in: int, d_out: int) -> float:
    return math.sqrt(2.0 / (d_in + d_out))


def xavier_normal(d_in: int, d_out: int, rng: np.random.Generator) -> np.ndarray:
    """(d_out, d_in) matrix of N(0, 2 / (d_in + d_out)) draws."""
    if d_in < 1 or d_out < 1:
        raise ValueError("xavier_normal: dimensions must be >= 1")
    return rng.normal(0.0, xavier_std(d_in, d_out), size=(d_out, d_in))


def small_init_attention(d: int, rng: np.random.Generator) -> np.ndarray:
    """(d, d) attention projection using the feedforward std sqrt(2 / 5d)."""
    if d < 1:
        raise ValueError("small_init_attention: d must be >= 1")
    return rng.normal(0.0, math.sqrt(2.0 / (5 * d)), size=(d, d))


def init_embeddings(mode: str, V: int, d: int, rng: np.random.Generator) -> np.ndarray:
    if V < 1 or d < 1:
        raise ValueError("init_embeddings: V and d must be >= 1")
    if mode == "uniform_pm_0_01":
        return rng.uniform(-0.01, 0.01, size=(V, d))
    if mode == "gaussian_inv_sqrt_d":
        return rng.normal(0.0, math.sqrt(1.0 / d), size=(V, d))
    raise ValueError(f"unknown embedding init mode {mode!r}")


def init_g(d: int) -> float:
    if d < 1:
        raise ValueError("init_g: d must be >= 1")
    return math.sqrt(d)
