"""Train the toy bimodal denoiser and report how samples cluster around the two modes.

    python3 scripts/toy_bimodal.py --epochs 150
"""

import argparse
import time

import numpy as np
import torch

from retree.diffusion import DiffusionProcess
from retree.networks import DenoiserConfig
from retree.schedules import ScheduleConfig
from retree.training import TrainConfig, fit, load_model


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--epochs", type=int, default=150)
    p.add_argument("--schedule", choices=("linear", "cosine"), default="linear")
    p.add_argument("--groups", type=int, default=1, help="GroupNorm groups in the denoiser")
    p.add_argument("--samples", type=int, default=500)
    args = p.parse_args()
    g = torch.Generator().manual_seed(0)
    modes = torch.randint(0, 2, (512,), generator=g).float() - 0.5
    x0 = modes[:, None, None, None].expand(512, 1, 8, 8).contiguous()
    den = DenoiserConfig(1, 1, base_channels=8, down_factor=2, num_down=2, num_up=2, vit_depth=1, time_dim=32,
                         T=200, groups=args.groups)
    sched = ScheduleConfig(args.schedule, T=200)
    start = time.perf_counter()
    result = fit("vessel", x0, TrainConfig(batch_size=64, learning_rate=2e-3, epochs=args.epochs), denoiser=den,
                 schedule=sched)
    print(f"trained {args.epochs} epochs in {time.perf_counter() - start:.0f} s, "
          f"final avg loss {result.epoch_averages[-1]:.4f}")
    samples = DiffusionProcess(sched.build(), 1, 0, 8, 8).sample(load_model(result.final), args.samples, seed=1)
    means = samples.mean(dim=(1, 2, 3)).numpy()
    near = np.minimum(np.abs(means - 0.5), np.abs(means + 0.5)) <= 0.15
    print(f"near a mode: {near.mean():.1%}  positive: {np.mean(near & (means > 0)):.1%}  "
          f"negative: {np.mean(near & (means < 0)):.1%}")
    counts, edges = np.histogram(means, bins=10, range=(-1, 1))
    for c, lo in zip(counts, edges):
        print(f"  [{lo:+.1f}, {lo + 0.2:+.1f})  {c}")


if __name__ == "__main__":
    main()
