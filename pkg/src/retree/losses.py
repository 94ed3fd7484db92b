"""Training objectives: noise-prediction loss, SSIM, adversarial terms, BCE and
the feature-space (perceptual) loss hook."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn.functional as F

from .numerics import ShapeError

LOG_CLAMP = 1e-7

FeatureExtractor = Callable[[torch.Tensor], torch.Tensor]


def _same_shape(a, b, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def gen_loss(eps_hat, z):
    """Mean over all elements of |d| + d**2 with d = eps_hat - z."""
    _same_shape(eps_hat, z, "gen_loss")
    d = eps_hat - z
    return (d.abs() + d * d).mean()


@dataclass(frozen=True)
class SsimConfig:
    window: int = 11
    sigma: float = 1.5
    K1: float = 0.01
    K2: float = 0.03
    L: float = 1.0

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError("SSIM window must be a positive odd integer")
        if self.C1 <= 0 or self.C2 <= 0:
            raise ValueError("SSIM constants must be positive")

    @property
    def C1(self) -> float:
        return (self.K1 * self.L) ** 2

    @property
    def C2(self) -> float:
        return (self.K2 * self.L) ** 2


def gaussian_window(size: int, sigma: float, dtype=torch.float64) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(coords ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g).to(dtype)


def ssim_map(X, Y, cfg: SsimConfig = SsimConfig()):
    """Per-window SSIM over valid (unpadded) Gaussian windows, [N, C, H', W']."""
    _same_shape(X, Y, "ssim")
    if X.dim() == 3:
        X, Y = X[None], Y[None]
    n, c, h, w = X.shape
    if h < cfg.window or w < cfg.window:
        raise ShapeError(f"image {h}x{w} smaller than SSIM window {cfg.window}")
    kernel = gaussian_window(cfg.window, cfg.sigma, X.dtype).expand(c, 1, cfg.window, cfg.window)
    filt = lambda img: F.conv2d(img, kernel, groups=c)
    mu_x, mu_y = filt(X), filt(Y)
    var_x = filt(X * X) - mu_x ** 2
    var_y = filt(Y * Y) - mu_y ** 2
    cov = filt(X * Y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + cfg.C1) * (2 * cov + cfg.C2)
    den = (mu_x ** 2 + mu_y ** 2 + cfg.C1) * (var_x + var_y + cfg.C2)
    return num / den


def ssim(X, Y, cfg: SsimConfig = SsimConfig()):
    """Mean SSIM over windows, channels and batch."""
    return ssim_map(X, Y, cfg).mean()


def ssim_loss(X, Y, cfg: SsimConfig = SsimConfig()):
    return (1 - ssim(X, Y, cfg)) / 2


def adversarial_losses(d_real, d_fake) -> dict[str, torch.Tensor]:
    """Discriminator and (non-saturating) generator losses from D probabilities.

    ``d_real`` / ``d_fake`` are D's outputs on real and generated pairs.
    """
    real = d_real.clamp(LOG_CLAMP, 1 - LOG_CLAMP)
    fake = d_fake.clamp(LOG_CLAMP, 1 - LOG_CLAMP)
    d_loss = -torch.log(1 - fake).mean() - torch.log(real).mean()
    g_loss = -torch.log(fake).mean()
    return {"d_loss": d_loss, "g_loss": g_loss}


def pair_adversarial_losses(D, real_pair, fake_pair) -> dict[str, torch.Tensor]:
    """``adversarial_losses`` evaluated on (fundus, vessel) pairs through ``D``."""
    from .networks import discriminate

    return adversarial_losses(discriminate(D, *real_pair), discriminate(D, *fake_pair))


def bce_loss(pred, target):
    _same_shape(pred, target, "bce_loss")
    p = pred.clamp(LOG_CLAMP, 1 - LOG_CLAMP)
    return -(target * torch.log(p) + (1 - target) * torch.log(1 - p)).mean()


def identity_extractor(x):
    return x


def feature_loss(X, Y, extractor: FeatureExtractor = identity_extractor):
    fx, fy = extractor(X), extractor(Y)
    if fx.shape != fy.shape:
        raise ShapeError(f"extractor produced mismatched features {tuple(fx.shape)} vs {tuple(fy.shape)}")
    return ((fx - fy) ** 2).mean()


@dataclass(frozen=True)
class SRLossWeights:
    # unvalidated desk defaults; nothing published pins these
    pixel: float = 1.0
    ssim: float = 1.0
    adversarial: float = 0.01
    aux: float = 1.0


def sr_generator_loss(sr, hr, d_fake=None, mode: str = "rgb", weights: SRLossWeights = SRLossWeights(),
                      ssim_cfg: SsimConfig = SsimConfig(), extractor: FeatureExtractor = identity_extractor):
    """Combined super-resolution objective.

    ``mode='binary'`` swaps the feature loss for BCE on the clamped output;
    the two are never combined.
    """
    terms = {
        "pixel": (sr - hr).abs().mean(),
        "ssim": ssim_loss(sr, hr, ssim_cfg),
    }
    if mode == "binary":
        terms["bce"] = bce_loss(sr.clamp(0, 1), hr)
    elif mode == "rgb":
        terms["feature"] = feature_loss(sr, hr, extractor)
    else:
        raise ValueError(f"unknown SR mode {mode!r}")
    total = weights.pixel * terms["pixel"] + weights.ssim * terms["ssim"]
    total = total + weights.aux * (terms.get("bce", 0) + terms.get("feature", 0))
    if d_fake is not None:
        terms["adversarial"] = -torch.log(d_fake.clamp(LOG_CLAMP, 1 - LOG_CLAMP)).mean()
        total = total + weights.adversarial * terms["adversarial"]
    return total, terms
