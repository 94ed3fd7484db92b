"""Forward corruption and ancestral sampling.

Tensors handed to these functions live in the model range [-1, 1]. Random
draws during sampling come from counter-based Philox substreams keyed by
(seed, sample index, t), so a sample does not depend on its batch-mates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .numerics import ShapeError
from .schedules import NoiseSchedule


def substream(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *key])))


def normal_like(shape, gen: np.random.Generator, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(gen.standard_normal(shape)).to(dtype)


def _coef(values: np.ndarray, t, schedule: NoiseSchedule, like: torch.Tensor) -> torch.Tensor:
    """Per-sample coefficient broadcast over the trailing image dims."""
    if isinstance(t, (int, np.integer)):
        return torch.tensor(values[schedule.index(int(t))], dtype=like.dtype)
    t = torch.as_tensor(t, dtype=torch.long)
    if t.min() < 1 or t.max() > schedule.T:
        raise ValueError(f"diffusion step outside [1, {schedule.T}]")
    c = torch.as_tensor(values, dtype=like.dtype)[t - 1]
    return c.reshape(-1, *([1] * (like.dim() - 1)))


def q_sample(schedule: NoiseSchedule, x0, t, eps):
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps; ``t`` is an int or one per sample."""
    if eps.shape != x0.shape:
        raise ShapeError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    a = _coef(np.sqrt(schedule.alpha_bars), t, schedule, x0)
    s = _coef(np.sqrt(1.0 - schedule.alpha_bars), t, schedule, x0)
    return a * x0 + s * eps


def q_step(schedule: NoiseSchedule, x_prev, t, eps):
    """One forward Markov step: sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) eps."""
    if eps.shape != x_prev.shape:
        raise ShapeError(f"eps shape {tuple(eps.shape)} != x shape {tuple(x_prev.shape)}")
    a = _coef(np.sqrt(schedule.alphas), t, schedule, x_prev)
    s = _coef(np.sqrt(schedule.betas), t, schedule, x_prev)
    return a * x_prev + s * eps


def p_sample_step(schedule: NoiseSchedule, model, x_t, t: int, cond=None, z=None, rng=None):
    """x_{t-1} = (x_t - (1-a_t)/sqrt(1-abar_t) eps_hat) / sqrt(a_t) + sqrt(b_t) z.

    z is zero at t == 1; otherwise it is ``z`` if given, else drawn from ``rng``
    (a ``torch.Generator`` or ``None`` for the global generator).
    """
    i = schedule.index(t)
    eps_hat = model(x_t, t, cond)
    if eps_hat.shape != x_t.shape:
        raise ShapeError(f"model output {tuple(eps_hat.shape)} != x_t {tuple(x_t.shape)}")
    alpha, alpha_bar, beta = schedule.alphas[i], schedule.alpha_bars[i], schedule.betas[i]
    mean = (x_t - ((1.0 - alpha) / math.sqrt(1.0 - alpha_bar)) * eps_hat) / math.sqrt(alpha)
    if t == 1:
        return mean
    if z is None:
        z = torch.randn(x_t.shape, generator=rng, dtype=x_t.dtype)
    return mean + math.sqrt(beta) * z


@dataclass
class DiffusionProcess:
    schedule: NoiseSchedule
    data_channels: int = 1
    cond_channels: int = 0
    height: int = 32
    width: int = 32

    def __post_init__(self):
        if self.data_channels not in (1, 3):
            raise ValueError("data_channels must be 1 or 3")
        if self.cond_channels not in (0, 1):
            raise ValueError("cond_channels must be 0 or 1")

    @property
    def model_channels(self) -> int:
        return self.data_channels + self.cond_channels

    def q_sample(self, x0, t, eps):
        return q_sample(self.schedule, x0, t, eps)

    def q_step(self, x_prev, t, eps):
        return q_step(self.schedule, x_prev, t, eps)

    def p_sample_step(self, model, x_t, t, cond=None, z=None, rng=None):
        self._check_model(model)
        return p_sample_step(self.schedule, model, x_t, t, cond, z, rng)

    def _check_model(self, model) -> None:
        cfg = getattr(model, "cfg", None)
        if cfg is not None and cfg.in_channels != self.model_channels:
            raise ShapeError(
                f"model takes {cfg.in_channels} channels, process supplies "
                f"{self.data_channels} data + {self.cond_channels} cond"
            )

    def _check_cond(self, cond, n: int) -> None:
        if self.cond_channels == 0:
            if cond is not None:
                raise ValueError("unconditional process was given a conditioning map")
            return
        if cond is None:
            raise ValueError("conditional process requires a conditioning map")
        if tuple(cond.shape) != (n, self.cond_channels, self.height, self.width):
            raise ShapeError(
                f"cond shape {tuple(cond.shape)} != {(n, self.cond_channels, self.height, self.width)}"
            )

    def _noise(self, seed: int, first: int, count: int, key: int) -> torch.Tensor:
        shape = (self.data_channels, self.height, self.width)
        return torch.stack([normal_like(shape, substream(seed, first + j, key)) for j in range(count)])

    @torch.no_grad()
    def sample(self, model, n: int, cond=None, seed: int = 0, batch_size: int = 256, progress=None):
        """Ancestral sampling from x_T ~ N(0, I) down to x_0.

        The conditioning map is concatenated to x_t at every step. Returns
        [n, data_channels, H, W] in the model range (not clipped).
        """
        self._check_model(model)
        self._check_cond(cond, n)
        was_training = getattr(model, "training", None)
        if was_training is not None:
            model.eval()
        out = []
        try:
            for first in range(0, n, batch_size):
                count = min(batch_size, n - first)
                c = None if cond is None else cond[first:first + count]
                x = self._noise(seed, first, count, 0)
                for t in range(self.schedule.T, 0, -1):
                    z = self._noise(seed, first, count, t) if t > 1 else None
                    x = p_sample_step(self.schedule, model, x, t, c, z=z)
                    if progress is not None:
                        progress(first, t)
                out.append(x)
        finally:
            if was_training is not None:
                model.train(was_training)
        return torch.cat(out)
