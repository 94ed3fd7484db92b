"""Command-line entry point: ``retree <command> [options]``.

Every command prints a human-readable table followed by ``key=value`` lines
(one per reported quantity) on stdout. Exit status: 0 on success, 2 for
configuration errors, 3 for data or checkpoint errors, 4 for numeric failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .config import RunConfig, dump_config, load_config
from .data import (
    DatasetManifest,
    ImagePair,
    filter_realistic,
    load_image,
    load_vessel,
    make_dataset,
    paper_split,
    save_image,
    to_model_range,
    to_unit_range,
    worker_count,
    write_pairs,
)
from .diffusion import DiffusionProcess
from .errors import ConfigError, DataError, RetreeError
from .losses import ssim
from .metrics import ConfusionCounts, confusion, fid_between, PooledProjectionEmbedder, psnr, segmentation_report
from .training import fit, load_checkpoint, load_model, make_stage

log = logging.getLogger("retree")

TRAIN_STAGES = {"train-vessel": "vessel", "train-fundus": "fundus", "train-disc": "disc", "train-sr": "sr", "train-seg": "seg"}


# -- helpers ----------------------------------------------------------------

def _emit(rows: dict, title: str = "") -> None:
    """Human table, then machine-readable key=value lines."""
    if title:
        print(title)
    width = max((len(k) for k in rows), default=0)
    for k, v in rows.items():
        print(f"  {k:<{width}}  {_fmt(v)}")
    for k, v in rows.items():
        print(f"{k}={_fmt(v)}")


def _fmt(v) -> str:
    return f"{v:.6g}" if isinstance(v, float) else str(v)


def _check_out(path: Path, force: bool) -> Path:
    if path.exists() and (not path.is_dir() or any(path.iterdir())) and not force:
        raise DataError(f"{path} exists and is not empty; pass --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _manifest(path) -> DatasetManifest:
    if path is None:
        raise DataError("--data is required")
    return DatasetManifest.read(path)


def _png_dir(path) -> list[Path]:
    path = Path(path)
    if (path / "vessel").is_dir() and not any(path.glob("*.png")):
        path = path / "vessel"
    files = sorted(path.glob("*.png"))
    if not files:
        raise DataError(f"no PNG images in {path}")
    return files


def _stack_dir(path, loader=load_image) -> tuple[torch.Tensor, list[str]]:
    files = _png_dir(path)
    images = [loader(f) for f in files]
    if len({tuple(i.shape) for i in images}) != 1:
        raise DataError(f"images in {path} differ in shape")
    return torch.stack(images), [f.stem for f in files]


def _seed_for(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence([seed, *key]).generate_state(1)[0] & 0x7FFFFFFF)


def _sample_ids(n: int) -> list[str]:
    width = max(5, len(str(n)))
    return [f"{i:0{width}d}" for i in range(n)]


# -- commands ---------------------------------------------------------------

def cmd_synth_data(args, cfg: RunConfig) -> None:
    out = _check_out(Path(args.out), args.force)
    splits = tuple(int(s) for s in args.splits.split(",")) if args.splits else paper_split(args.n)
    manifest = make_dataset(args.n, splits, cfg.data, out, force=True)
    counts = {f"n_{s}": len(ids) for s, ids in manifest.splits.items()}
    _emit({"root": str(out), "resolution": manifest.resolution, **counts}, "synthetic dataset")


def cmd_train(args, cfg: RunConfig) -> None:
    stage = TRAIN_STAGES[args.command]
    out = _check_out(Path(args.out), args.force or args.resume is not None)
    manifest = _manifest(args.data)
    if stage == "fundus" and not manifest.ids("train"):
        raise DataError("train-fundus needs vessel maps paired with fundus images in the train split")
    train = cfg.train if args.epochs is None else replace(cfg.train, epochs=args.epochs)
    (out / "config.ini").write_text(dump_config(cfg), encoding="utf-8")
    kwargs = {}
    if stage in ("vessel", "fundus"):
        channels = (1, 1) if stage == "vessel" else (4, 3)
        kwargs = {"denoiser": cfg.denoiser_config(*channels), "schedule": cfg.schedule}
    elif stage == "sr":
        kwargs = {"sr": cfg.sr, "ssim": cfg.ssim}
    elif stage == "seg":
        kwargs = {"seg": cfg.seg}
    elif stage == "disc":
        fakes = DatasetManifest.read(args.fakes).load_split(None) if args.fakes else None
        kwargs = {"disc": cfg.disc, "fakes": fakes}
    resume = load_checkpoint(args.resume) if args.resume else None
    if resume is not None and resume.stage != stage:
        raise DataError(f"--resume checkpoint is for stage {resume.stage!r}, not {stage!r}")
    result = fit(stage, manifest, train, resume=resume, out_dir=out,
                 on_epoch=lambda e, avg: log.info("epoch %d avg loss %.6f", e, avg), **kwargs)
    avgs = result.epoch_averages
    _emit({
        "stage": stage,
        "epochs": len(avgs),
        "final_loss": avgs[-1] if avgs else float("nan"),
        "best_loss": min(avgs) if avgs else float("nan"),
        "checkpoint": str(out / "best.rtck"),
    }, f"trained {stage}")


def _sample_vessels(ckpt_path, n: int, seed: int, cfg: RunConfig) -> torch.Tensor:
    ckpt = load_checkpoint(ckpt_path)
    if ckpt.stage != "vessel":
        raise DataError(f"{ckpt_path} is a {ckpt.stage!r} checkpoint, expected 'vessel'")
    model = load_model(ckpt)
    schedule = _schedule_of(ckpt)
    size = _resolution_of(ckpt, cfg)
    proc = DiffusionProcess(schedule, 1, 0, size, size)
    x = proc.sample(model, n, seed=seed, batch_size=cfg.sample.batch_size)
    return (to_unit_range(x) >= 0.5).to(torch.float32)


def _schedule_of(ckpt):
    from .schedules import ScheduleConfig

    return ScheduleConfig(**ckpt.meta["configs"]["schedule"]).build()


def _resolution_of(ckpt, cfg: RunConfig) -> int:
    return int(ckpt.meta.get("resolution") or cfg.data.size)


def _apply_sr(paths, fundus: torch.Tensor, vessel: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    for path in paths or ():
        ckpt = load_checkpoint(path)
        if ckpt.stage != "sr":
            raise DataError(f"{path} is not a super-resolution checkpoint")
        G = load_model(ckpt)
        with torch.no_grad():
            if ckpt.meta["configs"]["sr"]["mode"] == "rgb":
                fundus = G(fundus).clamp(0, 1)
                if vessel.shape[-1] != fundus.shape[-1]:
                    vessel = torch.nn.functional.interpolate(vessel, size=fundus.shape[-2:], mode="nearest")
            else:
                vessel = (G(vessel) >= 0.5).to(torch.float32)
                if fundus.shape[-1] != vessel.shape[-1]:
                    fundus = torch.nn.functional.interpolate(fundus, size=vessel.shape[-2:], mode="bilinear",
                                                             align_corners=False)
    return fundus, vessel


def cmd_sample(args, cfg: RunConfig) -> None:
    out = _check_out(Path(args.out), args.force)
    if args.stage == "vessel":
        vessel = _sample_vessels(args.ckpt, args.n, args.seed_value, cfg)
        ids = _sample_ids(args.n)
        empty = torch.zeros(vessel.shape[0], 3, *vessel.shape[-2:])
        _, vessel = _apply_sr(args.sr_ckpt, empty, vessel)
        (out / "vessel").mkdir(exist_ok=True)
        for item_id, v in zip(ids, vessel):
            save_image(v, out / "vessel" / f"{item_id}.png")
        _emit({"stage": "vessel", "n": len(ids), "out": str(out / "vessel"),
               "vessel_fraction": float(vessel.mean())}, "sampled vessel maps")
        return

    if args.cond_dir is None and args.vessel_ckpt is None:
        raise DataError("sample --stage fundus needs --cond-dir or --vessel-ckpt for conditioning maps")
    if args.cond_dir is not None:
        vessel, ids = _stack_dir(args.cond_dir, load_vessel)
        if args.n is not None:
            if args.n > len(ids):
                raise DataError(f"--n {args.n} exceeds the {len(ids)} maps in {args.cond_dir}")
            vessel, ids = vessel[:args.n], ids[:args.n]
    else:
        vessel = _sample_vessels(args.vessel_ckpt, args.n, _seed_for(args.seed_value, 1), cfg)
        ids = _sample_ids(args.n)
    ckpt = load_checkpoint(args.ckpt)
    if ckpt.stage != "fundus":
        raise DataError(f"{args.ckpt} is a {ckpt.stage!r} checkpoint, expected 'fundus'")
    model = load_model(ckpt)
    proc = DiffusionProcess(_schedule_of(ckpt), 3, 1, *vessel.shape[-2:])
    x = proc.sample(model, len(ids), cond=to_model_range(vessel), seed=args.seed_value,
                    batch_size=cfg.sample.batch_size)
    fundus, vessel = _apply_sr(args.sr_ckpt, to_unit_range(x), vessel)
    write_pairs([ImagePair(f, v, i) for f, v, i in zip(fundus, vessel, ids)], out, split="train", force=True)
    _emit({"stage": "fundus", "n": len(ids), "out": str(out)}, "sampled fundus images")


def cmd_filter(args, cfg: RunConfig) -> None:
    ckpt = load_checkpoint(args.disc_ckpt)
    if ckpt.stage != "disc":
        raise DataError(f"{args.disc_ckpt} is not a discriminator checkpoint")
    pairs = _manifest(args.data).load_split(None)
    D = load_model(ckpt)
    kept, report = filter_realistic(D, pairs, args.threshold)
    out = _check_out(Path(args.out), args.force)
    write_pairs(kept, out, split="train", force=True)
    (out / "filter_report.json").write_text(json.dumps(report, indent=2, sort_keys=True), encoding="utf-8")
    _emit({"threshold": args.threshold, "kept": report["kept"], "dropped": report["dropped"],
           "histogram": ",".join(str(c) for c in report["histogram"]["counts"])}, "realism filter")


def _seg_counts(pred: torch.Tensor, gt: torch.Tensor) -> ConfusionCounts:
    total = ConfusionCounts(0, 0, 0, 0)
    for p, g in zip(pred, gt):
        total = total + confusion(p, g)
    return total


def cmd_evaluate(args, cfg: RunConfig) -> None:
    rows: dict = {}
    if args.pred or args.gt:
        if not (args.pred and args.gt):
            raise ConfigError("--pred and --gt must be given together")
        pred, pid = _stack_dir(args.pred, load_vessel if not args.quality else load_image)
        gt, gid = _stack_dir(args.gt, load_vessel if not args.quality else load_image)
        if pid != gid:
            raise DataError("--pred and --gt directories hold different file names")
        if args.quality:
            rows["psnr"] = float(np.mean([psnr(p, g) for p, g in zip(pred, gt)]))
            rows["ssim"] = float(ssim(pred.to(torch.float64), gt.to(torch.float64), cfg.ssim))
        else:
            rows.update(segmentation_report(_seg_counts(pred, gt)))
    if args.seg_ckpt:
        pairs = _manifest(args.data).load_split(args.split)
        if not pairs:
            raise DataError(f"split {args.split!r} of {args.data} is empty")
        model = load_model(args.seg_ckpt, "seg")
        images = torch.stack([p.fundus for p in pairs])
        masks = torch.stack([p.vessel for p in pairs])
        with torch.no_grad():
            pred = model(images)
        rows.update(segmentation_report(_seg_counts(pred, masks)))
    if args.fid_real or args.fid_fake:
        if not (args.fid_real and args.fid_fake):
            raise ConfigError("--fid-real and --fid-fake must be given together")
        real, _ = _stack_dir(args.fid_real)
        fake, _ = _stack_dir(args.fid_fake)
        embedder = PooledProjectionEmbedder(cfg.metrics.dim, cfg.metrics.pool, cfg.metrics.seed)
        rows["fid"] = fid_between(real, fake, embedder)
    if not rows:
        raise ConfigError("evaluate needs --pred/--gt, --seg-ckpt/--data or --fid-real/--fid-fake")
    if args.report:
        Path(args.report).write_text(json.dumps(rows, indent=2, sort_keys=True), encoding="utf-8")
    _emit(rows, "evaluation")


def cmd_grid(args, cfg: RunConfig) -> None:
    out = Path(args.out)
    if out.exists() and not args.force:
        raise DataError(f"{out} exists; pass --force to overwrite")
    columns = [{f.stem: f for f in _png_dir(d)} for d in args.dirs]
    names = sorted(set.intersection(*(set(c) for c in columns)))[:args.n]
    if not names:
        raise DataError("the grid directories share no file names")
    tiles = [[np.asarray(Image.open(col[name]).convert("RGB")) for col in columns] for name in names]
    h, w = tiles[0][0].shape[:2]
    pad = 2
    canvas = np.full((len(names) * (h + pad) + pad, len(columns) * (w + pad) + pad, 3), 255, np.uint8)
    for r, row in enumerate(tiles):
        for c, tile in enumerate(row):
            if tile.shape[:2] != (h, w):
                tile = np.asarray(Image.fromarray(tile).resize((w, h), Image.NEAREST))
            y, x = pad + r * (h + pad), pad + c * (w + pad)
            canvas[y:y + h, x:x + w] = tile
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(canvas).save(out)
    _emit({"rows": len(names), "columns": len(columns), "out": str(out)}, "grid")


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI-style run config (sections mirror RunConfig)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value; repeatable")
    common.add_argument("--seed", type=int, help="seed for all randomness (overrides train.seed and data.seed)")
    common.add_argument("--force", action="store_true", help="allow writing into a non-empty output")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    p = argparse.ArgumentParser(prog="retree", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", parents=[common], help="write a synthetic (fundus, vessel) dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=600)
    s.add_argument("--splits", help="train,val,test counts; default scales the published split")
    s.set_defaults(func=cmd_synth_data)

    for name, stage in TRAIN_STAGES.items():
        s = sub.add_parser(name, parents=[common], help=f"train the {stage} stage")
        s.add_argument("--data", required=True, help="dataset directory with a manifest")
        s.add_argument("--out", required=True, help="directory for loss.log and checkpoints")
        s.add_argument("--epochs", type=int, help="override train.epochs")
        s.add_argument("--resume", help="continue from a checkpoint")
        if stage == "disc":
            s.add_argument("--fakes", help="dataset of generated pairs used as negatives")
        s.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", parents=[common], help="sample vessel maps or conditioned fundus images")
    s.add_argument("--stage", choices=("vessel", "fundus"), required=True)
    s.add_argument("--ckpt", required=True, help="diffusion checkpoint for the chosen stage")
    s.add_argument("--n", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--cond-dir", help="directory of vessel PNGs used as conditioning maps")
    s.add_argument("--vessel-ckpt", help="stage-1 checkpoint that generates the conditioning maps")
    s.add_argument("--sr-ckpt", action="append", help="super-resolution checkpoint(s) applied to the output")
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("filter", parents=[common], help="keep generated pairs the discriminator deems realistic")
    s.add_argument("--disc-ckpt", required=True)
    s.add_argument("--data", required=True, help="dataset of generated pairs")
    s.add_argument("--out", required=True)
    s.add_argument("--threshold", type=float, default=0.8)
    s.set_defaults(func=cmd_filter)

    s = sub.add_parser("evaluate", parents=[common], help="segmentation, image-quality and FID metrics")
    s.add_argument("--pred", help="directory of predicted masks (or images with --quality)")
    s.add_argument("--gt", help="directory of ground-truth masks (or images with --quality)")
    s.add_argument("--quality", action="store_true", help="report PSNR and SSIM instead of mask metrics")
    s.add_argument("--seg-ckpt", help="segmentation checkpoint evaluated on --data")
    s.add_argument("--data", help="dataset directory for --seg-ckpt")
    s.add_argument("--split", default="test")
    s.add_argument("--fid-real", help="directory of real images")
    s.add_argument("--fid-fake", help="directory of generated images")
    s.add_argument("--report", help="also write the metrics as JSON")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("grid", parents=[common], help="side-by-side PNG mosaic of matching files")
    s.add_argument("dirs", nargs="+", help="one directory per column; rows are shared file names")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=8)
    s.set_defaults(func=cmd_grid)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    torch.set_num_threads(worker_count())
    try:
        cfg = load_config(args.config, args.set)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        args.seed_value = cfg.train.seed
        if args.command == "sample" and args.n is None and (args.stage == "vessel" or args.cond_dir is None):
            raise ConfigError("sample needs --n unless --cond-dir supplies the fundus conditioning maps")
        log.info("resolved config:\n%s", dump_config(cfg).strip())
        args.func(args, cfg)
    except RetreeError as exc:
        log.error("%s", exc)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
