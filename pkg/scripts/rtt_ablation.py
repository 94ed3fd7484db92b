"""Paired toy runs with and without repetitive training at equal wall-clock budget.

    python3 scripts/rtt_ablation.py --budget 60 --repeats 3
"""

import argparse

import torch

from retree.networks import DenoiserConfig
from retree.pipeline import rtt_ablation
from retree.schedules import ScheduleConfig
from retree.training import TrainConfig


def toy_images(n: int, seed: int) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    modes = torch.randint(0, 2, (n, 1, 1, 1), generator=g).float() - 0.5
    return modes.expand(n, 1, 8, 8).contiguous()


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--budget", type=float, default=30.0, help="seconds per arm")
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--T", type=int, default=200)
    args = p.parse_args()
    den = DenoiserConfig(1, 1, base_channels=8, down_factor=2, num_down=2, num_up=2, vit_depth=1, time_dim=32,
                         T=args.T)
    sched = ScheduleConfig("linear", T=args.T)
    wins = 0
    for r in range(args.repeats):
        train = TrainConfig(batch_size=64, learning_rate=2e-3, seed=r)
        res = rtt_ablation(toy_images(512, r), args.budget, den, sched, train, eval_x0=toy_images(256, 1000 + r))
        wins += res.rtt_not_worse
        print(f"repeat {r}: rtt {res.loss_rtt:.4f} ({res.epochs_rtt} ep)  "
              f"vanilla {res.loss_vanilla:.4f} ({res.epochs_vanilla} ep)")
    print(f"rtt_not_worse={wins}/{args.repeats}")


if __name__ == "__main__":
    main()
