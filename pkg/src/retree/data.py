"""Image I/O, dataset layout, the procedural vessel/fundus synthesizer and
discriminator-based realism filtering.

The synthesizer is a stand-in for clinical data: it draws branching random
walks from the optic-disc rim and renders a fundus-like RGB image around them.
Its statistics are frozen by tests, not matched to any real dataset.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from PIL import Image

from .errors import DataError

MANIFEST_NAME = "manifest.txt"
SPLITS = ("train", "val", "test")
# 28,800 / 200 / 1,000 images
PAPER_SPLIT = (28800, 200, 1000)


def worker_count() -> int:
    return max(1, int(os.environ.get("RETREE_THREADS", os.cpu_count() or 1)))


# -- value ranges -----------------------------------------------------------

def to_model_range(x):
    return x * 2 - 1


def to_unit_range(x):
    return ((x + 1) / 2).clamp(0, 1)


# -- image I/O --------------------------------------------------------------

def load_image(path) -> torch.Tensor:
    """8-bit PNG -> float32 [C, H, W] in [0, 1]; grayscale gives C=1, RGB C=3."""
    try:
        img = Image.open(path)
        img.load()
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    if img.mode in ("1", "L"):
        img = img.convert("L")
    elif img.mode in ("P", "RGBA"):
        img = img.convert("RGB")
    elif img.mode != "RGB":
        raise DataError(f"{path}: unsupported image mode {img.mode!r} (need 8-bit L or RGB)")
    arr = np.asarray(img, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return torch.from_numpy(np.ascontiguousarray(arr))


def save_image(t, path) -> None:
    arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
    if arr.ndim == 3:
        arr = arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0)
    if arr.ndim not in (2, 3) or (arr.ndim == 3 and arr.shape[2] != 3):
        raise DataError(f"cannot save array of shape {arr.shape} as PNG")
    data = np.clip(np.rint(np.asarray(arr, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(data, mode="L" if data.ndim == 2 else "RGB").save(path, format="PNG")


def load_vessel(path) -> torch.Tensor:
    img = load_image(path)
    if img.shape[0] != 1:
        img = img.mean(dim=0, keepdim=True)
    return (img >= 0.5).to(torch.float32)


@dataclass
class ImagePair:
    fundus: torch.Tensor  # [3, H, W] in [0, 1]
    vessel: torch.Tensor  # [1, H, W] in {0, 1}
    id: str = ""

    def __post_init__(self):
        if self.fundus.shape[-2:] != self.vessel.shape[-2:]:
            raise DataError(f"pair {self.id}: fundus and vessel sizes differ")


# -- synthesizer ------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticTreeParams:
    size: int = 32
    trunks: int = 4
    branch_prob: float = 0.05
    step: float = 0.025  # fraction of image size per walk step
    width: float = 0.06  # initial vessel width, fraction of image size
    width_decay: float = 0.72
    curvature_jitter: float = 0.22  # radians, std per step
    disc_x: float = 0.66
    disc_y: float = 0.5
    disc_radius: float = 0.07
    disc_jitter: float = 0.05
    fov_radius: float = 0.47
    max_branches: int = 24
    max_length: float = 1.0  # walk length per branch, fraction of image size
    seed: int = 0

    def __post_init__(self):
        if self.size < 32:
            raise ValueError("synthetic images must be at least 32x32")
        if self.trunks < 1:
            raise ValueError("need at least one trunk")
        if not 0 <= self.branch_prob <= 1:
            raise ValueError("branch_prob must be a probability")
        if not 0 < self.width_decay <= 1:
            raise ValueError("width_decay must be in (0, 1]")


def fov_mask(size: int, radius: float = 0.47) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    c = size / 2
    return (xx - c) ** 2 + (yy - c) ** 2 <= (radius * size) ** 2


def _disc_location(p: SyntheticTreeParams, rng: np.random.Generator) -> tuple[float, float, float]:
    jx, jy = rng.uniform(-p.disc_jitter, p.disc_jitter, size=2)
    return (p.disc_x + jx) * p.size, (p.disc_y + jy) * p.size, p.disc_radius * p.size


def _stamp(canvas: np.ndarray, x: float, y: float, radius: float) -> None:
    size = canvas.shape[0]
    r = max(radius, 0.5)
    x0, x1 = max(int(math.floor(x - r)), 0), min(int(math.ceil(x + r)), size - 1)
    y0, y1 = max(int(math.floor(y - r)), 0), min(int(math.ceil(y + r)), size - 1)
    if x0 > x1 or y0 > y1:
        return
    yy, xx = np.mgrid[y0:y1 + 1, x0:x1 + 1] + 0.5
    canvas[y0:y1 + 1, x0:x1 + 1] |= (xx - x) ** 2 + (yy - y) ** 2 <= r * r
    ix, iy = int(x), int(y)
    if 0 <= ix < size and 0 <= iy < size:
        canvas[iy, ix] = True


def synth_vessel_tree(p: SyntheticTreeParams = SyntheticTreeParams()) -> torch.Tensor:
    """Binary [1, H, W] vessel map from branching random walks."""
    rng = np.random.default_rng(p.seed)
    size = p.size
    cx, cy, rd = _disc_location(p, rng)
    fov = fov_mask(size, p.fov_radius)
    canvas = np.zeros((size, size), dtype=bool)
    step = p.step * size
    max_steps = int(p.max_length / p.step)
    min_width = 1.0

    offset = rng.uniform(0, 2 * math.pi)
    active = []
    for k in range(p.trunks):
        heading = offset + 2 * math.pi * k / p.trunks + rng.normal(0, 0.3)
        active.append((cx + rd * math.cos(heading), cy + rd * math.sin(heading), heading, p.width * size, 0))
    spawned = len(active)

    while active:
        x, y, heading, width, steps = active.pop()
        c = size / 2
        while steps < max_steps:
            heading += rng.normal(0, p.curvature_jitter)
            x += step * math.cos(heading)
            y += step * math.sin(heading)
            steps += 1
            if (x - c) ** 2 + (y - c) ** 2 > (p.fov_radius * size) ** 2:
                break
            _stamp(canvas, x, y, width / 2)
            if spawned < p.max_branches and rng.random() < p.branch_prob:
                turn = rng.choice((-1.0, 1.0)) * rng.uniform(0.4, 0.9)
                child_width = max(width * p.width_decay, min_width)
                active.append((x, y, heading + turn, child_width, steps))
                spawned += 1
                width = max(width * math.sqrt(p.width_decay), min_width)
    canvas &= fov
    return torch.from_numpy(canvas.astype(np.float32))[None]


def _smooth_field(size: int, rng: np.random.Generator, terms: int = 3) -> np.ndarray:
    yy, xx = (np.mgrid[0:size, 0:size] + 0.5) / size
    out = np.zeros((size, size))
    for _ in range(terms):
        fx, fy = rng.uniform(0.5, 2.0, size=2)
        phase = rng.uniform(0, 2 * math.pi)
        out += np.cos(2 * math.pi * (fx * xx + fy * yy) + phase)
    return out / terms


def synth_fundus(vessel, seed: int = 0, disc: tuple[float, float, float] | None = None,
                 fov_radius: float = 0.47, noise: float = 0.012) -> torch.Tensor:
    """Fundus-like RGB [3, H, W] in [0, 1] with vessels rendered darker.

    ``disc`` is (x, y, radius) in pixels; by default it is placed where
    ``synth_vessel_tree`` would put it for the same seed and size.
    """
    v = np.asarray(vessel.detach().cpu().numpy() if isinstance(vessel, torch.Tensor) else vessel)
    v = v.reshape(v.shape[-2:]) > 0.5
    size = v.shape[0]
    rng = np.random.default_rng([seed, 1])
    if disc is None:
        disc = _disc_location(SyntheticTreeParams(size=max(size, 32), seed=seed), np.random.default_rng(seed))
    cx, cy, rd = disc

    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    r2 = ((xx - size / 2) ** 2 + (yy - size / 2) ** 2) / (fov_radius * size) ** 2
    tint = rng.uniform(-0.05, 0.05, size=3)
    illum = 1 + 0.06 * _smooth_field(size, rng)
    base = np.stack([
        (0.78 + tint[0] - 0.28 * r2) * illum,
        (0.36 + tint[1] - 0.14 * r2) * illum,
        (0.16 + tint[2] - 0.06 * r2) * illum,
    ])
    blob = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * (0.9 * rd) ** 2))
    base = base + blob[None] * np.array([0.18, 0.34, 0.26])[:, None, None]
    darken = np.array([0.62, 0.48, 0.55])[:, None, None]
    img = np.where(v[None], base * darken, base)
    img = img + rng.normal(0, noise, size=img.shape)
    img = np.clip(img, 0, 1) * fov_mask(size, fov_radius)[None]
    return torch.from_numpy(img.astype(np.float32))


def local_background_mean(lum: np.ndarray, vessel: np.ndarray, fov: np.ndarray, radius: int = 3) -> np.ndarray:
    """Mean of non-vessel in-FOV pixels in a (2r+1)^2 window around every pixel."""
    bg = (~vessel) & fov
    k = 2 * radius + 1
    pad = lambda a: np.pad(a, radius)
    win = lambda a: np.lib.stride_tricks.sliding_window_view(pad(a), (k, k)).sum(axis=(-1, -2))
    total = win(np.where(bg, lum, 0.0))
    count = win(bg.astype(np.float64))
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(count > 0, total / np.maximum(count, 1), np.nan)


def heuristic_vessel_map(fundus, ratio: float = 0.8, radius: int = 3, fov_radius: float = 0.47) -> np.ndarray:
    """Threshold segmentation: pixel darker than ``ratio`` x its local mean."""
    img = np.asarray(fundus.detach().cpu().numpy() if isinstance(fundus, torch.Tensor) else fundus)
    lum = img.mean(axis=0)
    fov = fov_mask(lum.shape[0], fov_radius)
    local = local_background_mean(lum, np.zeros_like(fov), fov, radius)
    return (lum < ratio * local) & fov


def darker_counts(fundus, vessel, radius: int = 3, fov_radius: float = 0.47) -> tuple[int, int]:
    """(vessel pixels darker than their local background mean, vessel pixels with a background)."""
    img = np.asarray(fundus.detach().cpu().numpy() if isinstance(fundus, torch.Tensor) else fundus)
    v = np.asarray(vessel.detach().cpu().numpy() if isinstance(vessel, torch.Tensor) else vessel)
    v = v.reshape(v.shape[-2:]) > 0.5
    lum = img.mean(axis=0)
    fov = fov_mask(lum.shape[0], fov_radius)
    local = local_background_mean(lum, v, fov, radius)
    mask = v & ~np.isnan(local)
    return int(np.count_nonzero(lum[mask] < local[mask])), int(np.count_nonzero(mask))


def darker_fraction(fundus, vessel, radius: int = 3, fov_radius: float = 0.47) -> float:
    """Fraction of vessel pixels whose luminance is below their local background mean."""
    darker, total = darker_counts(fundus, vessel, radius, fov_radius)
    return darker / total if total else 0.0


def synth_pair(params: SyntheticTreeParams, item_id: str = "") -> ImagePair:
    vessel = synth_vessel_tree(params)
    disc = _disc_location(params, np.random.default_rng(params.seed))
    fundus = synth_fundus(vessel, params.seed, disc=disc, fov_radius=params.fov_radius)
    return ImagePair(fundus, vessel, item_id)


# -- dataset layout ---------------------------------------------------------

@dataclass
class DatasetManifest:
    root: Path
    resolution: int
    entries: list[tuple[str, str, str, str]] = field(default_factory=list)  # id, split, fundus, vessel

    def ids(self, split: str | None = None) -> list[str]:
        return [e[0] for e in self.entries if split is None or e[1] == split]

    @property
    def splits(self) -> dict[str, list[str]]:
        return {s: self.ids(s) for s in SPLITS}

    def write(self) -> Path:
        path = Path(self.root) / MANIFEST_NAME
        lines = [f"# resolution {self.resolution}"]
        lines += [" ".join(e) for e in self.entries]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    @classmethod
    def read(cls, root) -> "DatasetManifest":
        root = Path(root)
        path = root / MANIFEST_NAME
        if not path.exists():
            raise DataError(f"no {MANIFEST_NAME} in {root}")
        resolution = 0
        entries = []
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if len(parts) == 2 and parts[0] == "resolution":
                    resolution = int(parts[1])
                continue
            parts = line.split()
            if len(parts) != 4 or parts[1] not in SPLITS:
                raise DataError(f"{path}:{lineno}: expected 'id split fundus_path vessel_path'")
            entries.append(tuple(parts))
        m = cls(root, resolution, entries)
        m.validate()
        return m

    def validate(self) -> None:
        seen = set()
        for item_id, _, fundus, vessel in self.entries:
            if item_id in seen:
                raise DataError(f"duplicate id {item_id} in manifest")
            seen.add(item_id)
            for rel in (fundus, vessel):
                if not (Path(self.root) / rel).exists():
                    raise DataError(f"manifest lists missing file {rel}")

    def load_pair(self, item_id: str) -> ImagePair:
        entry = next(e for e in self.entries if e[0] == item_id)
        return ImagePair(load_image(Path(self.root) / entry[2]), load_vessel(Path(self.root) / entry[3]), item_id)

    def load_split(self, split: str | None = None) -> list[ImagePair]:
        return [self.load_pair(i) for i in self.ids(split)]


def paper_split(n: int) -> tuple[int, int, int]:
    """Scale the published train/val/test sizes to ``n`` items."""
    total = sum(PAPER_SPLIT)
    val = round(n * PAPER_SPLIT[1] / total)
    test = round(n * PAPER_SPLIT[2] / total)
    return n - val - test, val, test


def _ensure_empty(root: Path, force: bool) -> None:
    if root.exists() and any(root.iterdir()) and not force:
        raise DataError(f"{root} exists and is not empty (use force to overwrite)")


def make_dataset(n: int, splits: Sequence[int], params: SyntheticTreeParams, root, force: bool = False) -> DatasetManifest:
    """Write ``n`` synthetic pairs as PNGs plus a manifest under ``root``.

    Item i uses seed (params.seed, i); ids are zero-padded indices.
    """
    if len(splits) != 3 or sum(splits) != n or min(splits) < 0:
        raise DataError(f"splits {tuple(splits)} must be three non-negative counts summing to {n}")
    root = Path(root)
    _ensure_empty(root, force)
    (root / "fundus").mkdir(parents=True, exist_ok=True)
    (root / "vessel").mkdir(parents=True, exist_ok=True)

    labels = [s for s, k in zip(SPLITS, splits) for _ in range(k)]
    width = max(5, len(str(n)))

    def build(i: int) -> tuple[str, str, str, str]:
        item_id = f"{i:0{width}d}"
        seed = int(np.random.SeedSequence([params.seed, i]).generate_state(1)[0])
        pair = synth_pair(replace(params, seed=seed), item_id)
        fpath, vpath = f"fundus/{item_id}.png", f"vessel/{item_id}.png"
        save_image(pair.fundus, root / fpath)
        save_image(pair.vessel, root / vpath)
        return item_id, labels[i], fpath, vpath

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        entries = list(pool.map(build, range(n)))
    manifest = DatasetManifest(root, params.size, entries)
    manifest.write()
    return manifest


def write_pairs(pairs: Iterable[ImagePair], root, split: str = "train", force: bool = False) -> DatasetManifest:
    """Store generated pairs in the standard dataset layout."""
    root = Path(root)
    _ensure_empty(root, force)
    entries = []
    resolution = 0
    for pair in pairs:
        fpath, vpath = f"fundus/{pair.id}.png", f"vessel/{pair.id}.png"
        save_image(pair.fundus, root / fpath)
        save_image(pair.vessel, root / vpath)
        entries.append((pair.id, split, fpath, vpath))
        resolution = pair.vessel.shape[-1]
    manifest = DatasetManifest(root, resolution, entries)
    manifest.write()
    return manifest


def stack_pairs(pairs: Sequence[ImagePair]) -> tuple[torch.Tensor, torch.Tensor]:
    return torch.stack([p.fundus for p in pairs]), torch.stack([p.vessel for p in pairs])


# -- realism filtering ------------------------------------------------------

@torch.no_grad()
def score_pairs(D, pairs: Sequence[ImagePair], batch_size: int = 64) -> np.ndarray:
    from .networks import discriminate

    was_training = getattr(D, "training", False)
    if hasattr(D, "eval"):
        D.eval()
    scores = []
    for i in range(0, len(pairs), batch_size):
        fundus, vessel = stack_pairs(pairs[i:i + batch_size])
        scores.append(np.asarray(discriminate(D, to_model_range(fundus), to_model_range(vessel)), dtype=np.float64))
    if hasattr(D, "train"):
        D.train(was_training)
    return np.concatenate(scores) if scores else np.zeros(0)


def filter_realistic(D, pairs: Sequence[ImagePair], threshold: float = 0.8) -> tuple[list[ImagePair], dict]:
    """Keep pairs the discriminator scores strictly above ``threshold``."""
    scores = score_pairs(D, pairs)
    kept = [p for p, s in zip(pairs, scores) if s > threshold]
    hist, edges = np.histogram(scores, bins=10, range=(0.0, 1.0))
    report = {
        "threshold": threshold,
        "kept": len(kept),
        "dropped": len(pairs) - len(kept),
        "scores": {p.id: float(s) for p, s in zip(pairs, scores)},
        "histogram": {"counts": hist.tolist(), "edges": edges.tolist()},
    }
    return kept, report


def params_dict(p: SyntheticTreeParams) -> dict:
    return asdict(p)
