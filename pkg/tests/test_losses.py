import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from retree.losses import (
    SRLossWeights,
    SsimConfig,
    adversarial_losses,
    bce_loss,
    feature_loss,
    gen_loss,
    pair_adversarial_losses,
    sr_generator_loss,
    ssim,
    ssim_loss,
)
from retree.networks import Discriminator
from retree.numerics import ShapeError, grad_check


def reference_ssim(x, y, window=11, sigma=1.5, k1=0.01, k2=0.03, L=1.0):
    """Straightforward sliding-window SSIM over valid windows, float64 numpy."""
    half = window // 2
    ax = np.arange(window) - half
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2
    values = []
    for ch in range(x.shape[0]):
        for i in range(x.shape[1] - window + 1):
            for j in range(x.shape[2] - window + 1):
                a = x[ch, i:i + window, j:j + window]
                b = y[ch, i:i + window, j:j + window]
                ma, mb = (g * a).sum(), (g * b).sum()
                va = (g * (a - ma) ** 2).sum()
                vb = (g * (b - mb) ** 2).sum()
                cov = (g * (a - ma) * (b - mb)).sum()
                values.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(values))


# -- gen_loss ---------------------------------------------------------------

def test_gen_loss_cases():
    z = torch.randn(2, 1, 4, 4)
    assert gen_loss(z, z).item() == 0.0
    assert gen_loss(z + 1, z).item() == pytest.approx(2.0, abs=1e-6)
    a, b = torch.randn(3, 5, dtype=torch.float64), torch.randn(3, 5, dtype=torch.float64)
    d = (a - b).numpy()
    assert gen_loss(a, b).item() == pytest.approx(float(np.mean(np.abs(d) + d ** 2)), abs=1e-6)
    assert gen_loss(a, b).item() == pytest.approx(gen_loss(b, a).item(), abs=1e-12)
    with pytest.raises(ShapeError):
        gen_loss(torch.zeros(2), torch.zeros(3))


# -- SSIM -------------------------------------------------------------------

def test_ssim_identical():
    x = torch.rand(2, 3, 16, 16, dtype=torch.float64)
    assert abs(ssim(x, x).item() - 1.0) <= 1e-6
    assert ssim_loss(x, x).item() == pytest.approx(0.0, abs=1e-6)


def test_ssim_constant_images():
    c = 0.3
    x = torch.full((1, 1, 12, 12), c, dtype=torch.float64)
    y = x + 1.0
    cfg = SsimConfig()
    expected = (2 * c * (c + 1) + cfg.C1) / (c ** 2 + (c + 1) ** 2 + cfg.C1)
    assert ssim(x, y).item() == pytest.approx(expected, abs=1e-9)


def test_ssim_matches_reference_on_50_pairs():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(50):
        c = rng.integers(1, 4)
        x = rng.random((c, 16, 16))
        y = np.clip(x + rng.normal(0, rng.uniform(0.05, 0.5), x.shape), 0, 1)
        got = ssim(torch.from_numpy(x)[None], torch.from_numpy(y)[None]).item()
        worst = max(worst, abs(got - reference_ssim(x, y)))
    assert worst <= 1e-5


def test_ssim_symmetry_and_range():
    g = torch.Generator().manual_seed(1)
    x, y = torch.rand(2, 1, 16, 16, generator=g, dtype=torch.float64), torch.rand(2, 1, 16, 16, generator=g, dtype=torch.float64)
    assert ssim(x, y).item() == pytest.approx(ssim(y, x).item(), abs=1e-6)
    assert -1 <= ssim(x, y).item() <= 1
    assert ssim(x, 1 - x).item() < 0
    assert 0 <= ssim_loss(x, 1 - x).item() <= 1


def test_ssim_loss_anticorrelated_extreme():
    # equal window means and mirrored deviations give ssim close to -1
    from retree.losses import gaussian_window

    cfg = SsimConfig(K1=1e-6, K2=1e-6)
    d = torch.randn(1, 1, 11, 11, dtype=torch.float64)
    d = d - (gaussian_window(11, 1.5) * d).sum()
    assert ssim_loss(0.5 + 0.1 * d, 0.5 - 0.1 * d, cfg).item() == pytest.approx(1.0, abs=1e-3)


def test_ssim_errors():
    with pytest.raises(ShapeError, match="window"):
        ssim(torch.rand(1, 1, 8, 8), torch.rand(1, 1, 8, 8))
    with pytest.raises(ValueError):
        SsimConfig(window=10)
    with pytest.raises(ValueError):
        SsimConfig(K1=0.0)


def test_ssim_loss_grad_check():
    g = torch.Generator().manual_seed(2)
    y = torch.rand(1, 1, 12, 12, generator=g, dtype=torch.float64)
    assert grad_check(lambda x: ssim_loss(x, y), torch.rand(1, 1, 12, 12, generator=g)) <= 1e-4


# -- adversarial ------------------------------------------------------------

def test_adversarial_cases():
    perfect = adversarial_losses(torch.ones(4), torch.zeros(4))
    assert perfect["d_loss"].item() == pytest.approx(0.0, abs=1e-6)
    half = adversarial_losses(torch.full((4,), 0.5), torch.full((4,), 0.5))
    assert half["d_loss"].item() == pytest.approx(2 * math.log(2), abs=1e-6)
    assert half["g_loss"].item() == pytest.approx(math.log(2), abs=1e-6)
    r = torch.rand(16, dtype=torch.float64) * 0.98 + 0.01
    f = torch.rand(16, dtype=torch.float64) * 0.98 + 0.01
    out = adversarial_losses(r, f)
    assert out["d_loss"].item() == pytest.approx(float(-np.mean(np.log(1 - f.numpy())) - np.mean(np.log(r.numpy()))), abs=1e-6)
    assert out["g_loss"].item() == pytest.approx(float(-np.mean(np.log(f.numpy()))), abs=1e-6)
    assert torch.isfinite(adversarial_losses(torch.zeros(2), torch.ones(2))["d_loss"])


def test_pair_adversarial_losses():
    D = Discriminator(4, 8, vit_heads=2)
    real = (torch.rand(2, 3, 32, 32), torch.rand(2, 1, 32, 32))
    fake = (torch.rand(2, 3, 32, 32), torch.rand(2, 1, 32, 32))
    out = pair_adversarial_losses(D, real, fake)
    assert out["d_loss"].item() > 0 and out["g_loss"].item() > 0


# -- BCE / feature ----------------------------------------------------------

def test_bce_cases():
    assert bce_loss(torch.ones(5), torch.ones(5)).item() == pytest.approx(0.0, abs=1e-6)
    assert bce_loss(torch.full((5,), 0.5), torch.tensor([0.0, 1, 1, 0, 1])).item() == pytest.approx(0.6931, abs=1e-4)
    p = torch.rand(20, dtype=torch.float64) * 0.9 + 0.05
    t = (torch.rand(20, dtype=torch.float64) > 0.5).double()
    ref = -np.mean(t.numpy() * np.log(p.numpy()) + (1 - t.numpy()) * np.log(1 - p.numpy()))
    assert bce_loss(p, t).item() == pytest.approx(float(ref), abs=1e-6)
    with pytest.raises(ShapeError):
        bce_loss(torch.zeros(3), torch.zeros(4))


def test_feature_loss_cases():
    x, y = torch.rand(2, 3, 8, 8), torch.rand(2, 3, 8, 8)
    assert feature_loss(x, x).item() == 0.0
    assert feature_loss(x, y).item() == pytest.approx(((x - y) ** 2).mean().item(), abs=1e-7)
    W = torch.randn(5, 3 * 64, dtype=torch.float64)
    extractor = lambda im: im.reshape(im.shape[0], -1) @ W.T
    xd, yd = x.double(), y.double()
    manual = ((extractor(xd) - extractor(yd)) ** 2).mean().item()
    assert feature_loss(xd, yd, extractor).item() == pytest.approx(manual, abs=1e-6)
    shapes = iter([(2, -1), (1, -1)])
    with pytest.raises(ShapeError):
        feature_loss(x, y, lambda im: im.reshape(*next(shapes)))


# -- SR objective -----------------------------------------------------------

def test_sr_loss_modes_are_exclusive():
    sr, hr = torch.rand(2, 1, 16, 16), (torch.rand(2, 1, 16, 16) > 0.5).float()
    _, binary = sr_generator_loss(sr, hr, mode="binary")
    assert "bce" in binary and "feature" not in binary
    _, rgb = sr_generator_loss(torch.rand(2, 3, 16, 16), torch.rand(2, 3, 16, 16), mode="rgb")
    assert "feature" in rgb and "bce" not in rgb
    with pytest.raises(ValueError):
        sr_generator_loss(sr, hr, mode="gray")


def test_sr_loss_weighted_sum():
    sr, hr = torch.rand(2, 3, 16, 16), torch.rand(2, 3, 16, 16)
    d_fake = torch.full((2,), 0.3)
    w = SRLossWeights(pixel=2.0, ssim=0.5, adversarial=0.1, aux=3.0)
    total, terms = sr_generator_loss(sr, hr, d_fake, "rgb", w)
    expected = 2.0 * terms["pixel"] + 0.5 * terms["ssim"] + 3.0 * terms["feature"] + 0.1 * terms["adversarial"]
    assert total.item() == pytest.approx(expected.item(), rel=1e-6)
    assert terms["adversarial"].item() == pytest.approx(-math.log(0.3), rel=1e-6)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(0.01, 5.0))
def test_losses_non_negative_property(seed, scale):
    g = torch.Generator().manual_seed(seed)
    a, b = torch.randn(2, 1, 12, 12, generator=g) * scale, torch.randn(2, 1, 12, 12, generator=g) * scale
    assert gen_loss(a, b).item() >= 0
    assert feature_loss(a, b).item() >= 0
    p = torch.sigmoid(a)
    assert bce_loss(p, (b > 0).float()).item() >= 0
    s = ssim_loss(torch.sigmoid(a).double(), torch.sigmoid(b).double()).item()
    assert -1e-9 <= s <= 1 + 1e-9
