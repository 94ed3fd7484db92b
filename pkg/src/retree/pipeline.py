"""Desk-scale experiments. ``run_desk_pipeline`` drives the command-line
interface end to end: synthetic data, vessel diffusion, sampling, conditioned
fundus diffusion and conditioned sampling, followed by the distribution and
rendering checks. ``rtt_ablation`` pairs toy runs with and without repetitive
training under the same wall-clock budget."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import torch

from .cli import main as cli_main
from .data import DatasetManifest, darker_counts, load_image, load_vessel
from .diffusion import q_sample
from .losses import gen_loss
from .metrics import fid_between
from .networks import DenoiserConfig
from .schedules import NoiseSchedule, ScheduleConfig
from .training import TrainConfig, fit, load_model


@dataclass(frozen=True)
class DeskSettings:
    n: int = 600
    splits: tuple[int, int, int] = (400, 0, 200)
    n_samples: int = 200
    T: int = 200
    vessel_epochs: int = 60
    fundus_epochs: int = 40
    seed: int = 0
    overrides: tuple[str, ...] = (
        "train.batch_size=16",
        "train.learning_rate=0.001",
    )


@dataclass
class DeskReport:
    fid_generated: float
    fid_noise: float
    darker_fraction: float
    vessel_train_s: float
    fundus_train_s: float
    timings: dict = field(default_factory=dict)

    @property
    def fid_ratio(self) -> float:
        return self.fid_generated / self.fid_noise


def _run(argv: list[str]) -> None:
    code = cli_main(argv)
    if code:
        raise RuntimeError(f"retree {' '.join(argv)} exited with status {code}")


def _stack(paths, loader) -> torch.Tensor:
    return torch.stack([loader(p) for p in paths])


def run_desk_pipeline(workdir, settings: DeskSettings = DeskSettings()) -> DeskReport:
    work = Path(workdir)
    common = ["--seed", str(settings.seed), "--set", f"schedule.T={settings.T}", "--force"]
    for item in settings.overrides:
        common += ["--set", item]
    timings = {}

    def timed(name, argv):
        t0 = time.perf_counter()
        _run(argv)
        timings[name] = time.perf_counter() - t0

    data = work / "data"
    timed("synth", ["synth-data", "--out", str(data), "--n", str(settings.n),
                    "--splits", ",".join(map(str, settings.splits)), *common])
    timed("train_vessel", ["train-vessel", "--data", str(data), "--out", str(work / "vessel"),
                           "--epochs", str(settings.vessel_epochs), *common])
    timed("sample_vessel", ["sample", "--stage", "vessel", "--ckpt", str(work / "vessel" / "last.rtck"),
                            "--n", str(settings.n_samples), "--out", str(work / "gen_vessel"), *common])

    manifest = DatasetManifest.read(data)
    held_out = _stack([data / e[3] for e in manifest.entries if e[1] == "test"], load_vessel)
    generated = _stack(sorted((work / "gen_vessel" / "vessel").glob("*.png")), load_vessel)
    noise = torch.rand(generated.shape, generator=torch.Generator().manual_seed(settings.seed))
    fid_generated = fid_between(generated, held_out)
    fid_noise = fid_between(noise, held_out)

    timed("train_fundus", ["train-fundus", "--data", str(data), "--out", str(work / "fundus"),
                           "--epochs", str(settings.fundus_epochs), *common])
    timed("sample_fundus", ["sample", "--stage", "fundus", "--ckpt", str(work / "fundus" / "last.rtck"),
                            "--cond-dir", str(work / "gen_vessel" / "vessel"), "--out", str(work / "gen_fundus"),
                            *common])
    darker = total = 0
    for entry in DatasetManifest.read(work / "gen_fundus").entries:
        d, t = darker_counts(load_image(work / "gen_fundus" / entry[2]), load_vessel(work / "gen_fundus" / entry[3]))
        darker, total = darker + d, total + t
    return DeskReport(fid_generated, fid_noise, darker / total if total else 0.0,
                      timings["train_vessel"], timings["train_fundus"], timings)


# -- RTT ablation -----------------------------------------------------------

@torch.no_grad()
def held_out_loss(model, x0: torch.Tensor, schedule: NoiseSchedule, draws: int = 8, seed: int = 0) -> float:
    """Noise-prediction loss averaged over fixed (t, eps) draws."""
    g = torch.Generator().manual_seed(seed)
    total = 0.0
    for _ in range(draws):
        t = torch.randint(1, schedule.T + 1, (x0.shape[0],), generator=g)
        eps = torch.randn(x0.shape, generator=g)
        total += float(gen_loss(model(q_sample(schedule, x0, t, eps), t), eps))
    return total / draws


@dataclass
class AblationResult:
    loss_rtt: float
    loss_vanilla: float
    epochs_rtt: int
    epochs_vanilla: int

    @property
    def rtt_not_worse(self) -> bool:
        return self.loss_rtt <= self.loss_vanilla


def rtt_ablation(x0: torch.Tensor, budget_s: float, denoiser: DenoiserConfig, schedule: ScheduleConfig,
                 train: TrainConfig, eval_x0: torch.Tensor | None = None) -> AblationResult:
    """Train with and without RTT for ``budget_s`` seconds each, then compare held-out loss."""
    outcome = {}
    for enabled in (True, False):
        cfg = replace(train, rtt_enabled=enabled)
        start, epochs, ckpt = time.perf_counter(), 0, None
        while time.perf_counter() - start < budget_s:
            epochs += 1
            ckpt = fit("vessel", x0, replace(cfg, epochs=epochs), resume=ckpt, denoiser=denoiser,
                       schedule=schedule).final
        loss = held_out_loss(load_model(ckpt), x0 if eval_x0 is None else eval_x0, schedule.build())
        outcome[enabled] = (loss, epochs)
    return AblationResult(outcome[True][0], outcome[False][0], outcome[True][1], outcome[False][1])
