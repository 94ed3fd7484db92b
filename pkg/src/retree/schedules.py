"""Variance schedules for the forward diffusion process.

Steps are 1-indexed in the maths (t = 1..T) and stored 0-indexed; use
``NoiseSchedule.index`` or the scalar accessors rather than raw array indexing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch


@dataclass(frozen=True)
class ScheduleConfig:
    kind: str = "cosine"
    T: int = 1000
    beta_1: float = 1e-4
    beta_T: float = 0.02
    s: float = 0.008

    def build(self) -> "NoiseSchedule":
        if self.kind == "linear":
            return linear_schedule(self.T, self.beta_1, self.beta_T)
        if self.kind == "cosine":
            return cosine_schedule(self.T, self.s)
        raise ValueError(f"unknown schedule kind {self.kind!r}")


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ValueError("betas must be a non-empty 1-D array")
        if not np.all((betas > 0) & (betas < 1)):
            raise ValueError("every beta must lie in (0, 1)")
        alphas = 1.0 - betas
        for name, value in (("betas", betas), ("alphas", alphas), ("alpha_bars", np.cumprod(alphas))):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def T(self) -> int:
        return int(self.betas.size)

    def index(self, t: int) -> int:
        if not 1 <= t <= self.T:
            raise ValueError(f"diffusion step {t} outside [1, {self.T}]")
        return t - 1

    def beta(self, t: int) -> float:
        return float(self.betas[self.index(t)])

    def alpha(self, t: int) -> float:
        return float(self.alphas[self.index(t)])

    def alpha_bar(self, t: int) -> float:
        return float(self.alpha_bars[self.index(t)])

    def as_tensors(self, dtype: torch.dtype = torch.float32) -> dict[str, torch.Tensor]:
        """f32 (or other) views; the float64 arrays remain the source of truth."""
        return {
            "betas": torch.tensor(self.betas, dtype=dtype),
            "alphas": torch.tensor(self.alphas, dtype=dtype),
            "alpha_bars": torch.tensor(self.alpha_bars, dtype=dtype),
        }


def linear_schedule(T: int, beta_1: float = 1e-4, beta_T: float = 0.02) -> NoiseSchedule:
    if T < 2:
        raise ValueError("T must be at least 2")
    if not 0 < beta_1 <= beta_T < 1:
        raise ValueError(f"need 0 < beta_1 <= beta_T < 1, got {beta_1}, {beta_T}")
    return NoiseSchedule(np.linspace(beta_1, beta_T, T, dtype=np.float64))


def cosine_alpha_bar(t, T: int, s: float = 0.008):
    """Closed-form cumulative signal level f(t)/f(0)."""
    f = lambda u: np.cos((np.asarray(u, dtype=np.float64) / T + s) / (1 + s) * math.pi / 2) ** 2
    return f(t) / f(0)


def cosine_schedule(T: int, s: float = 0.008, max_beta: float = 0.999) -> NoiseSchedule:
    if T < 2:
        raise ValueError("T must be at least 2")
    bars = cosine_alpha_bar(np.arange(T + 1), T, s)
    betas = np.clip(1.0 - bars[1:] / bars[:-1], 0.0, max_beta)
    return NoiseSchedule(betas)
