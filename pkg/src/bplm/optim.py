"""AdamW with decoupled weight decay, global-norm clipping, and the
warmup-stable-decay and fine-tuning learning-rate schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .tensor import Tensor


@dataclass(frozen=True)
class WsdSchedule:
    peak_lr: float = 5e-4
    warmup_steps: int = 2000
    total_steps: int = 42_000
    decay_steps: int = 2000

    def __post_init__(self):
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")
        if self.warmup_steps + self.decay_steps > self.total_steps:
            raise ValueError("warmup + decay exceed total steps")

    @property
    def decay_start(self) -> int:
        return self.total_steps - self.decay_steps

    def to_dict(self) -> dict:
        return {"peak_lr": self.peak_lr, "warmup_steps": self.warmup_steps,
                "total_steps": self.total_steps, "decay_steps": self.decay_steps}

    @staticmethod
    def from_dict(d: dict) -> "WsdSchedule":
        return WsdSchedule(**d)


def wsd_lr(s: WsdSchedule, step: int) -> float:
    """Linear warmup to peak, constant plateau, linear decay to zero.

    Warmup uses (step + 1) / warmup_steps so step 0 already trains.
    """
    if not 0 <= step < s.total_steps:
        raise ValueError(f"step {step} outside [0, {s.total_steps})")
    if s.warmup_steps and step < s.warmup_steps:
        return s.peak_lr * (step + 1) / s.warmup_steps
    if s.decay_steps and step >= s.decay_start:
        return min(max(s.peak_lr * (s.total_steps - step) / s.decay_steps, 0.0),
                   s.peak_lr)
    return s.peak_lr


def finetune_lr(peak_lr: float, total_steps: int, step: int) -> float:
    """10% linear warmup, then linear decay to zero at total_steps."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    warmup = math.ceil(0.10 * total_steps)
    if step < warmup:
        return peak_lr * (step + 1) / warmup
    return peak_lr * (total_steps - step) / (total_steps - warmup)


@dataclass
class AdamWState:
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-5
    weight_decay: float = 0.1
    decay_norm_gains: bool = False  # RMSNorm gains skip decay by default
    step_count: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def moments_for(self, name: str, shape) -> tuple:
        if name not in self.m:
            self.m[name] = np.zeros(shape)
            self.v[name] = np.zeros(shape)
        return self.m[name], self.v[name]


def clip_global_norm(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients by max_norm/g when the global L2 norm g exceeds
    max_norm. Returns the factor applied."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    # accumulate in sorted-name order so the result is independent of dict
    # insertion order (keeps resumed runs bit-exact)
    total = math.sqrt(sum(float((grads[k] ** 2).sum())
                          for k in sorted(grads)))
    if total <= max_norm:
        return 1.0
    factor = max_norm / total
    for g in grads.values():
        g *= factor
    return factor


def _decays(name: str, state: AdamWState) -> bool:
    return state.decay_norm_gains or "norm" not in name


def adamw_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray],
               state: AdamWState, lr: float) -> None:
    """One decoupled-weight-decay Adam update, in place."""
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        m, v = state.moments_for(name, p.data.shape)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if _decays(name, state) and state.weight_decay:
            update = update + lr * state.weight_decay * p.data
        p.data = p.data - update
