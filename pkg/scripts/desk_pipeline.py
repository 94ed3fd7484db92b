"""Run the desk-scale two-stage pipeline and print its report.

    python3 scripts/desk_pipeline.py --workdir runs/desk --vessel-epochs 60 --fundus-epochs 40
"""

import argparse
import json
from dataclasses import asdict

from retree.pipeline import DeskSettings, run_desk_pipeline


def main() -> None:
    defaults = DeskSettings()
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--workdir", required=True)
    p.add_argument("--n", type=int, default=defaults.n)
    p.add_argument("--samples", type=int, default=defaults.n_samples)
    p.add_argument("--T", type=int, default=defaults.T)
    p.add_argument("--vessel-epochs", type=int, default=defaults.vessel_epochs)
    p.add_argument("--fundus-epochs", type=int, default=defaults.fundus_epochs)
    p.add_argument("--seed", type=int, default=defaults.seed)
    args = p.parse_args()
    test = args.n // 3
    settings = DeskSettings(n=args.n, splits=(args.n - test, 0, test), n_samples=args.samples, T=args.T,
                            vessel_epochs=args.vessel_epochs, fundus_epochs=args.fundus_epochs, seed=args.seed)
    report = run_desk_pipeline(args.workdir, settings)
    print(json.dumps({**asdict(report), "fid_ratio": report.fid_ratio}, indent=2))


if __name__ == "__main__":
    main()
