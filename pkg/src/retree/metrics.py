"""Segmentation, image-quality and distribution metrics.

Empty-denominator conventions: precision, recall, f1 and mcc are 0; the
jaccard index of two empty masks is 1; kappa is 0 when chance agreement is 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch
import torch.nn.functional as F

from .errors import NumericError
from .numerics import ShapeError


class EigenSolverError(NumericError):
    pass


def _as_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


# -- confusion-derived ------------------------------------------------------

@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)


def confusion(pred, gt, threshold: float = 0.5) -> ConfusionCounts:
    pred, gt = _as_numpy(pred), _as_numpy(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"pred shape {pred.shape} != gt shape {gt.shape}")
    if not np.all((gt == 0) | (gt == 1)):
        raise ValueError("ground truth must be binary {0, 1}")
    p = pred >= threshold
    g = gt == 1
    tp = int(np.count_nonzero(p & g))
    tn = int(np.count_nonzero(~p & ~g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, tn, fp, fn)


def jaccard(c: ConfusionCounts) -> float:
    union = c.tp + c.fp + c.fn
    return 1.0 if union == 0 else c.tp / union


def precision(c: ConfusionCounts) -> float:
    return c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0


def recall(c: ConfusionCounts) -> float:
    return c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0


def f1(c: ConfusionCounts) -> float:
    p, r = precision(c), recall(c)
    return 2 * p * r / (p + r) if p + r else 0.0


def accuracy(c: ConfusionCounts) -> float:
    return (c.tp + c.tn) / c.total if c.total else 0.0


def precision_recall_f1_accuracy(c: ConfusionCounts) -> dict[str, float]:
    return {"precision": precision(c), "recall": recall(c), "f1": f1(c), "accuracy": accuracy(c)}


def mcc(c: ConfusionCounts) -> float:
    # standard (TN+FP)(TN+FN) factor in the denominator
    den = (c.tp + c.fp) * (c.tp + c.fn) * (c.tn + c.fp) * (c.tn + c.fn)
    if den == 0:
        return 0.0
    return (c.tp * c.tn - c.fp * c.fn) / math.sqrt(den)


def random_accuracy(c: ConfusionCounts) -> float:
    p1 = (c.tp + c.fn) / c.total
    p2 = (c.tp + c.fp) / c.total
    return p1 * p2 + (1 - p1) * (1 - p2)


def kappa(c: ConfusionCounts) -> float:
    if c.total == 0:
        return 0.0
    acc_r = random_accuracy(c)
    if acc_r == 1:
        return 0.0
    return (accuracy(c) - acc_r) / (1 - acc_r)


def segmentation_report(c: ConfusionCounts) -> dict[str, float]:
    return {
        "jaccard": jaccard(c),
        "mcc": mcc(c),
        "kappa": kappa(c),
        **precision_recall_f1_accuracy(c),
    }


# -- image quality ----------------------------------------------------------

def psnr_from_mse(mse: float, max_value: float = 1.0) -> float:
    if mse == 0:
        return math.inf
    return 10 * math.log10(max_value ** 2 / mse)


def psnr(X, Y, max_value: float = 1.0) -> float:
    x = _as_numpy(X).astype(np.float64)
    y = _as_numpy(Y).astype(np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"psnr: shapes {x.shape} and {y.shape} differ")
    return psnr_from_mse(float(np.mean((x - y) ** 2)), max_value)


# -- Frechet distance -------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GaussianStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int


def gaussian_stats(features) -> GaussianStats:
    feats = _as_numpy(features).astype(np.float64)
    if feats.ndim != 2:
        raise ShapeError("features must be an [n, d] matrix")
    n = feats.shape[0]
    if n < 2:
        raise ValueError("need at least 2 samples for a covariance")
    mu = feats.mean(axis=0)
    centered = feats - mu
    sigma = centered.T @ centered / (n - 1)
    return GaussianStats(mu, (sigma + sigma.T) / 2, n)


def jacobi_eigh(a: np.ndarray, tol: float = 1e-10, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns (eigenvalues, eigenvectors as columns).
    """
    a = np.array(a, dtype=np.float64)
    d = a.shape[0]
    if a.shape != (d, d):
        raise ShapeError("jacobi_eigh needs a square matrix")
    v = np.eye(d)
    scale = max(np.abs(a).max(), 1e-300)
    off_diagonal = ~np.eye(d, dtype=bool)
    for _ in range(max_sweeps):
        off = math.sqrt(np.sum(a[off_diagonal] ** 2))
        if off <= tol * scale:
            return np.diag(a).copy(), v
        for p in range(d - 1):
            for q in range(p + 1, d):
                apq = a[p, q]
                if abs(apq) < 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2 * apq)
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1))
                c = 1 / math.sqrt(t * t + 1)
                s = t * c
                ap, aq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap, aq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    raise EigenSolverError(f"Jacobi iteration did not converge in {max_sweeps} sweeps")


def _clip_eigenvalues(w: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    limit = -tol * max(1.0, float(np.abs(w).max(initial=0.0)))
    if np.any(w < limit):
        raise EigenSolverError(f"matrix is not PSD: eigenvalue {w.min():.3g}")
    return np.where(w < 0, 0.0, w)


def sqrtm_psd(a: np.ndarray) -> np.ndarray:
    w, v = jacobi_eigh(a)
    return (v * np.sqrt(_clip_eigenvalues(w))) @ v.T


def trace_sqrt_product(sigma_a: np.ndarray, sigma_b: np.ndarray) -> float:
    """Tr((A B)^{1/2}) through the symmetric form A^{1/2} B A^{1/2}."""
    root_a = sqrtm_psd(sigma_a)
    m = root_a @ sigma_b @ root_a
    w, _ = jacobi_eigh((m + m.T) / 2)
    return float(np.sum(np.sqrt(_clip_eigenvalues(w))))


def fid(a: GaussianStats, b: GaussianStats) -> float:
    if a.mu.shape != b.mu.shape:
        raise ShapeError(f"feature dims differ: {a.mu.shape[0]} vs {b.mu.shape[0]}")
    mean_term = float(np.sum((a.mu - b.mu) ** 2))
    cov_term = float(np.trace(a.sigma) + np.trace(b.sigma)) - 2 * trace_sqrt_product(a.sigma, b.sigma)
    return max(0.0, mean_term + cov_term)


# -- embedding --------------------------------------------------------------

@lru_cache(maxsize=16)
def _projection(in_dim: int, out_dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    big, small = max(in_dim, out_dim), min(in_dim, out_dim)
    q, r = np.linalg.qr(rng.standard_normal((big, small)))
    q = q * np.sign(np.diag(r))
    return q if in_dim >= out_dim else q.T  # [in_dim, out_dim]


class PooledProjectionEmbedder:
    """Average-pool to pool x pool per channel, flatten, then a fixed random
    orthogonal projection to ``dim`` features."""

    def __init__(self, dim: int = 64, pool: int = 8, seed: int = 0):
        self.dim, self.pool, self.seed = dim, pool, seed

    def __call__(self, images) -> np.ndarray:
        x = torch.as_tensor(images, dtype=torch.float64)
        if x.dim() == 3:
            x = x[:, None]
        pooled = F.adaptive_avg_pool2d(x, self.pool).flatten(1).numpy()
        return pooled @ _projection(pooled.shape[1], self.dim, self.seed)


def embed(images, embedder=None) -> np.ndarray:
    return (embedder or PooledProjectionEmbedder())(images)


def fid_between(images_a, images_b, embedder=None) -> float:
    embedder = embedder or PooledProjectionEmbedder()
    return fid(gaussian_stats(embed(images_a, embedder)), gaussian_stats(embed(images_b, embedder)))
