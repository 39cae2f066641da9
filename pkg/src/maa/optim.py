"""AdamW with decoupled weight decay, global-norm clipping, and the
linear-warmup + cosine-warm-restart learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .numcore import NumericError, Param


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Param]) -> "AdamWState":
        return cls(
            {p.name: np.zeros_like(p.value) for p in params},
            {p.name: np.zeros_like(p.value) for p in params},
        )


def adamw_step(
    params: Sequence[Param],
    state: AdamWState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.01,
) -> None:
    """One update. Params with ``decay=False`` (LN, biases, modality
    embedding) skip the weight-decay term."""
    if lr < 0:
        raise ConfigError(f"learning rate must be >= 0, got {lr}")
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for p in params:
        if p.name not in state.m:
            state.m[p.name] = np.zeros_like(p.value)
            state.v[p.name] = np.zeros_like(p.value)
        m, v, g = state.m[p.name], state.v[p.name], p.grad
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        if p.decay and weight_decay:
            update = update + weight_decay * p.value
        p.value -= (lr * update).astype(p.value.dtype, copy=False)


def clip_grad_norm(params: Sequence[Param], max_norm: float) -> float:
    """Scale all grads so their joint L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params))
    if not math.isfinite(total):
        raise NumericError("non-finite gradient norm")
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params:
            p.grad *= scale
    return total


@dataclass
class ScheduleConfig:
    base_lr: float = 3e-5
    warmup_steps: int = 0
    t_0: int = 10
    t_mult: float = 2.0
    eta_min: float = 0.0

    def __post_init__(self):
        if self.warmup_steps < 0 or self.t_0 < 1 or self.t_mult < 1 or self.eta_min < 0:
            raise ConfigError(f"invalid schedule {self}")


def lr_at(step: int, cfg: ScheduleConfig) -> float:
    if step < cfg.warmup_steps:
        return cfg.base_lr * (step + 1) / cfg.warmup_steps
    s = step - cfg.warmup_steps
    period = float(cfg.t_0)
    while s >= period:
        s -= period
        period *= cfg.t_mult
    if s == 0:
        return cfg.base_lr  # exact restart value, free of eta_min roundoff
    return cfg.eta_min + (cfg.base_lr - cfg.eta_min) * (1.0 + math.cos(math.pi * s / period)) / 2.0
