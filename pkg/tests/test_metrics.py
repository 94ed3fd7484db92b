import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from retree.metrics import (
    ConfusionCounts,
    EigenSolverError,
    GaussianStats,
    PooledProjectionEmbedder,
    accuracy,
    confusion,
    embed,
    f1,
    fid,
    fid_between,
    gaussian_stats,
    jaccard,
    jacobi_eigh,
    kappa,
    mcc,
    precision,
    precision_recall_f1_accuracy,
    psnr,
    psnr_from_mse,
    recall,
    sqrtm_psd,
)
from retree.errors import NumericError
from retree.numerics import ShapeError

HAND = ConfusionCounts(tp=6, tn=3, fp=1, fn=2)


def pixel_loop_counts(pred, gt, threshold=0.5):
    tp = tn = fp = fn = 0
    for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        hit = p >= threshold
        if hit and g == 1:
            tp += 1
        elif hit:
            fp += 1
        elif g == 1:
            fn += 1
        else:
            tn += 1
    return tp, tn, fp, fn


def oracle_metrics(tp, tn, fp, fn):
    n = tp + tn + fp + fn
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    acc = (tp + tn) / n
    p1, p2 = (tp + fn) / n, (tp + fp) / n
    acc_r = p1 * p2 + (1 - p1) * (1 - p2)
    den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    return {
        "jaccard": tp / (tp + fp + fn) if tp + fp + fn else 1.0,
        "precision": p,
        "recall": r,
        "f1": 2 * p * r / (p + r) if p + r else 0.0,
        "accuracy": acc,
        "mcc": (tp * tn - fp * fn) / math.sqrt(den) if den else 0.0,
        "kappa": (acc - acc_r) / (1 - acc_r) if acc_r != 1 else 0.0,
    }


# -- confusion-derived ------------------------------------------------------

def test_confusion_trivial_cases():
    gt = (torch.rand(16, 16) > 0.5).float()
    c = confusion(gt, gt)
    assert c.fp == c.fn == 0
    inv = confusion(1 - gt, gt)
    assert inv.tp == inv.tn == 0
    assert c.total == 256


def test_confusion_errors():
    with pytest.raises(ValueError, match="binary"):
        confusion(torch.zeros(4), torch.full((4,), 0.5))
    with pytest.raises(ShapeError):
        confusion(torch.zeros(4), torch.zeros(5))


def test_hand_case():
    assert jaccard(HAND) == pytest.approx(6 / 9)
    prfa = precision_recall_f1_accuracy(HAND)
    assert prfa["precision"] == pytest.approx(6 / 7)
    assert prfa["recall"] == pytest.approx(6 / 8)
    assert prfa["accuracy"] == pytest.approx(9 / 12)
    P, R = 6 / 7, 6 / 8
    assert prfa["f1"] == pytest.approx(2 * P * R / (P + R))
    assert mcc(HAND) == pytest.approx(16 / math.sqrt(7 * 8 * 4 * 5))
    assert mcc(HAND) == pytest.approx(0.478, abs=1e-3)
    p1, p2 = 8 / 12, 7 / 12
    acc_r = p1 * p2 + (1 - p1) * (1 - p2)
    assert kappa(HAND) == pytest.approx((9 / 12 - acc_r) / (1 - acc_r))


def test_degenerate_conventions():
    perfect = ConfusionCounts(5, 5, 0, 0)
    assert all(v == 1 for v in precision_recall_f1_accuracy(perfect).values())
    assert mcc(perfect) == 1 and kappa(perfect) == 1
    assert mcc(ConfusionCounts(0, 0, 5, 5)) == -1
    all_negative = ConfusionCounts(0, 6, 0, 4)
    assert recall(all_negative) == 0 and precision(all_negative) == 0 and f1(all_negative) == 0
    assert mcc(all_negative) == 0
    assert jaccard(ConfusionCounts(0, 9, 0, 0)) == 1
    assert jaccard(ConfusionCounts(0, 4, 3, 3)) == 0
    assert kappa(ConfusionCounts(0, 9, 0, 0)) == 0


def test_metrics_match_oracle_on_1000_pairs():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        density = rng.uniform(0, 1)
        gt = (rng.random((16, 16)) < density).astype(np.float64)
        pred = rng.random((16, 16))
        counts = pixel_loop_counts(pred, gt)
        c = confusion(pred, gt)
        assert (c.tp, c.tn, c.fp, c.fn) == counts
        ref = oracle_metrics(*counts)
        got = {"jaccard": jaccard(c), "mcc": mcc(c), "kappa": kappa(c), **precision_recall_f1_accuracy(c)}
        for key, value in ref.items():
            assert abs(got[key] - value) <= 1e-9, key
        if c.tp + c.fp + c.fn:
            assert abs(jaccard(c) - f1(c) / (2 - f1(c))) <= 1e-9


def test_kappa_chance_level():
    rng = np.random.default_rng(1)
    gt = (rng.random(200_000) < 0.3).astype(float)
    pred = (rng.random(200_000) < 0.3).astype(float)
    assert abs(kappa(confusion(pred, gt))) < 0.01


def test_confusion_counts_add():
    assert HAND + HAND == ConfusionCounts(12, 6, 2, 4)


@settings(max_examples=200, deadline=None)
@given(tp=st.integers(0, 500), tn=st.integers(0, 500), fp=st.integers(0, 500), fn=st.integers(0, 500))
def test_metric_ranges_property(tp, tn, fp, fn):
    c = ConfusionCounts(tp, tn, fp, fn)
    if c.total == 0:
        return
    for value in (jaccard(c), precision(c), recall(c), f1(c), accuracy(c)):
        assert 0 <= value <= 1
    assert -1 - 1e-12 <= mcc(c) <= 1 + 1e-12
    assert -1 - 1e-12 <= kappa(c) <= 1 + 1e-12
    if tp + fp + fn:
        assert abs(jaccard(c) - f1(c) / (2 - f1(c))) <= 1e-9


# -- PSNR -------------------------------------------------------------------

def test_psnr_cases():
    x = torch.rand(3, 8, 8)
    assert psnr(x, x) == math.inf
    assert psnr_from_mse(0.01) == 20.0
    y = torch.rand(3, 8, 8)
    mse = float(np.mean((x.double().numpy() - y.double().numpy()) ** 2))
    assert abs(psnr(x, y) - 10 * math.log10(1 / mse)) <= 1e-9
    a = torch.zeros(10, 10, dtype=torch.float64)
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)


# -- Frechet distance -------------------------------------------------------

def test_gaussian_stats_cases():
    s = gaussian_stats(np.array([[0.0, 0.0], [2.0, 0.0]]))
    np.testing.assert_allclose(s.mu, [1, 0])
    assert s.sigma[0, 0] == pytest.approx(2.0)
    assert np.array_equal(s.sigma, s.sigma.T)
    assert np.all(gaussian_stats(np.ones((5, 3))).sigma == 0)
    with pytest.raises(ValueError):
        gaussian_stats(np.ones((1, 3)))


def test_jacobi_matches_reconstruction():
    rng = np.random.default_rng(2)
    a = rng.standard_normal((12, 12))
    a = a + a.T
    w, v = jacobi_eigh(a)
    np.testing.assert_allclose(v @ np.diag(w) @ v.T, a, atol=1e-9)
    np.testing.assert_allclose(v.T @ v, np.eye(12), atol=1e-9)
    np.testing.assert_allclose(np.sort(w), np.linalg.eigvalsh(a), atol=1e-9)


def test_jacobi_non_convergence_and_psd():
    a = np.random.default_rng(3).standard_normal((6, 6))
    with pytest.raises(EigenSolverError):
        jacobi_eigh(a + a.T, max_sweeps=1)
    assert issubclass(EigenSolverError, NumericError)
    with pytest.raises(EigenSolverError, match="PSD"):
        sqrtm_psd(-np.eye(3))


def test_sqrtm_psd():
    rng = np.random.default_rng(4)
    m = rng.standard_normal((5, 5))
    a = m @ m.T
    r = sqrtm_psd(a)
    np.testing.assert_allclose(r @ r, a, atol=1e-9)


def _stats(mu, sigma):
    return GaussianStats(np.asarray(mu, float), np.atleast_2d(np.asarray(sigma, float)), 100)


def test_fid_closed_forms():
    a = _stats([0.0], [[1.0]])
    assert abs(fid(a, _stats([2.0], [[1.0]])) - 4.0) <= 1e-9
    assert abs(fid(a, a)) <= 1e-6
    # diagonal covariances decompose per axis
    va, vb = np.array([1.0, 2.0, 0.5]), np.array([3.0, 0.2, 0.5])
    ma, mb = np.array([0.0, 1.0, -1.0]), np.array([1.0, 1.0, 2.0])
    per_axis = sum((x - y) ** 2 + p + q - 2 * math.sqrt(p * q) for x, y, p, q in zip(ma, mb, va, vb))
    assert fid(_stats(ma, np.diag(va)), _stats(mb, np.diag(vb))) == pytest.approx(per_axis, abs=1e-9)
    with pytest.raises(ShapeError):
        fid(a, _stats([0.0, 1.0], np.eye(2)))


def test_fid_symmetry_and_shift():
    rng = np.random.default_rng(5)
    fa, fb = rng.standard_normal((300, 8)), rng.standard_normal((300, 8)) @ rng.standard_normal((8, 8)) * 0.5
    a, b = gaussian_stats(fa), gaussian_stats(fb)
    assert abs(fid(a, a)) <= 1e-6
    assert abs(fid(a, b) - fid(b, a)) <= 1e-6
    delta = rng.standard_normal(8)
    shifted = gaussian_stats(fa + delta)
    assert abs(fid(a, shifted) - float(delta @ delta)) <= 1e-6


# -- embedding --------------------------------------------------------------

def test_default_embedder():
    images = torch.rand(6, 1, 32, 32)
    f1_, f2_ = embed(images), embed(images.clone())
    assert f1_.shape == (6, 64)
    assert np.array_equal(f1_, f2_)
    assert PooledProjectionEmbedder()(torch.rand(3, 3, 16, 16)).shape == (3, 64)


def test_fid_real_halves_beat_noise(tmp_path):
    from retree.data import SyntheticTreeParams, synth_vessel_tree

    maps = torch.stack([synth_vessel_tree(SyntheticTreeParams(seed=i)) for i in range(200)])
    noise = torch.rand(100, 1, 32, 32, generator=torch.Generator().manual_seed(0))
    assert fid_between(maps[:100], maps[100:]) < fid_between(maps[100:], noise)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (20, 3), elements=st.floats(-10, 10)), arrays(np.float64, (20, 3), elements=st.floats(-10, 10)))
def test_fid_properties(fa, fb):
    a, b = gaussian_stats(fa), gaussian_stats(fb)
    ab, ba = fid(a, b), fid(b, a)
    assert ab >= 0
    assert abs(ab - ba) <= 1e-6 * max(1.0, ab)
    assert fid(a, a) <= 1e-6 * max(1.0, float(np.trace(a.sigma)))
