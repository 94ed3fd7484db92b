"""Optimisation loops, the repetitive training technique (RTT) and checkpoints.

RTT reading used here: after each batch step, if the batch loss is strictly
greater than the lowest *completed-epoch* average loss seen so far, the same
batch is trained again, at most ``rtt_max_reps`` extra times. Repetition
losses count toward the epoch average. During the first epoch the minimum is
+inf, so nothing repeats.
"""

from __future__ import annotations

import io
import json
import math
import struct
import time
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data import DatasetManifest, ImagePair, stack_pairs, to_model_range
from .diffusion import q_sample
from .errors import DataError, NumericError
from .losses import SRLossWeights, SsimConfig, adversarial_losses, bce_loss, gen_loss, sr_generator_loss
from .networks import Denoiser, DenoiserConfig, Discriminator, RRDBNet, SegUNet, build_denoiser
from .schedules import NoiseSchedule, ScheduleConfig

STAGES = ("vessel", "fundus", "sr", "seg", "disc")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 10
    rtt_enabled: bool = True
    rtt_max_reps: int = 5
    grad_clip: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.rtt_max_reps < 0:
            raise ValueError("rtt_max_reps must be >= 0")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


# -- RTT --------------------------------------------------------------------

@dataclass
class RttState:
    global_min_epoch_avg: float = math.inf
    current_epoch_sum: float = 0.0
    current_epoch_count: int = 0
    reps_histogram: list[int] = field(default_factory=list)
    epoch_averages: list[float] = field(default_factory=list)

    def record(self, loss: float) -> None:
        self.current_epoch_sum += loss
        self.current_epoch_count += 1


def rtt_apply(state: RttState, do_step: Callable[[], float], cfg: TrainConfig) -> int:
    """Run ``do_step`` once, then repeat it while the loss exceeds the stored minimum.

    Returns the number of extra repetitions (0..rtt_max_reps).
    """
    loss = do_step()
    state.record(loss)
    reps = 0
    if cfg.rtt_enabled:
        while loss > state.global_min_epoch_avg and reps < cfg.rtt_max_reps:
            loss = do_step()
            state.record(loss)
            reps += 1
    if len(state.reps_histogram) <= reps:
        state.reps_histogram.extend([0] * (reps + 1 - len(state.reps_histogram)))
    state.reps_histogram[reps] += 1
    return reps


def end_epoch(state: RttState) -> float:
    if state.current_epoch_count == 0:
        raise ValueError("end_epoch called on an epoch with no batches")
    avg = state.current_epoch_sum / state.current_epoch_count
    state.epoch_averages.append(avg)
    state.global_min_epoch_avg = min(state.global_min_epoch_avg, avg)
    state.current_epoch_sum = 0.0
    state.current_epoch_count = 0
    return avg


# -- single steps -----------------------------------------------------------

def make_adam(params, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=cfg.learning_rate, betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_eps)


def optimize_step(loss: torch.Tensor, opt: torch.optim.Optimizer, clip: float = 0.0) -> float:
    value = float(loss.detach())
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss {value}")
    opt.zero_grad(set_to_none=True)
    loss.backward()
    if clip > 0:
        for group in opt.param_groups:
            torch.nn.utils.clip_grad_norm_(group["params"], clip)
    opt.step()
    return value


def train_step(model, batch, schedule: NoiseSchedule, opt, gen: torch.Generator | None = None,
               cond=None, clip: float = 1.0) -> float:
    """One noise-prediction update on ``batch`` (model range [-1, 1])."""
    n = batch.shape[0]
    t = torch.randint(1, schedule.T + 1, (n,), generator=gen)
    eps = torch.randn(batch.shape, generator=gen, dtype=batch.dtype)
    x_t = q_sample(schedule, batch, t, eps)
    loss = gen_loss(model(x_t, t, cond), eps)
    return optimize_step(loss, opt, clip)


# -- stages -----------------------------------------------------------------

class Stage:
    """Bundle of networks + optimisers for one training stage."""

    name = ""

    def __init__(self, train: TrainConfig):
        self.train_cfg = train
        self.modules: dict[str, torch.nn.Module] = {}
        self.optimizers: dict[str, torch.optim.Optimizer] = {}

    def configs(self) -> dict:
        return {}

    def prepare(self, pairs: Sequence[ImagePair]) -> None:
        raise NotImplementedError

    @property
    def resolution(self) -> int:
        """Spatial size of the prepared training images."""
        for name in ("x0", "images", "hr", "fundus"):
            if hasattr(self, name):
                return int(getattr(self, name).shape[-1])
        return 0

    @property
    def size(self) -> int:
        raise NotImplementedError

    def step(self, idx: torch.Tensor, gen: torch.Generator) -> float:
        raise NotImplementedError

    def _finish_init(self) -> None:
        for name, module in self.modules.items():
            self.optimizers[name] = make_adam(module.parameters(), self.train_cfg)


class DiffusionStage(Stage):
    def __init__(self, train: TrainConfig, denoiser: DenoiserConfig, schedule: ScheduleConfig, conditional: bool):
        super().__init__(train)
        self.name = "fundus" if conditional else "vessel"
        self.conditional = conditional
        self.denoiser_cfg = denoiser
        self.schedule_cfg = schedule
        self.schedule = schedule.build()
        self.modules["denoiser"] = build_denoiser(denoiser, train.seed)
        self._finish_init()

    def configs(self):
        return {"denoiser": self.denoiser_cfg.to_dict(), "schedule": asdict(self.schedule_cfg)}

    def prepare(self, pairs):
        if isinstance(pairs, torch.Tensor):
            if self.conditional:
                raise DataError("conditional stage needs (fundus, vessel) pairs")
            self.x0, self.cond = pairs, None
            return
        fundus, vessel = stack_pairs(pairs)
        if self.conditional:
            self.x0, self.cond = to_model_range(fundus), to_model_range(vessel)
        else:
            self.x0, self.cond = to_model_range(vessel), None
        if self.x0.shape[1] + (1 if self.conditional else 0) != self.denoiser_cfg.in_channels:
            raise DataError("dataset channels do not match the denoiser configuration")

    @property
    def size(self):
        return self.x0.shape[0]

    def step(self, idx, gen):
        cond = None if self.cond is None else self.cond[idx]
        return train_step(self.modules["denoiser"], self.x0[idx], self.schedule, self.optimizers["denoiser"],
                          gen, cond, self.train_cfg.grad_clip)


@dataclass(frozen=True)
class SegConfig:
    in_channels: int = 3
    base_channels: int = 16
    depth: int = 3


class SegStage(Stage):
    name = "seg"

    def __init__(self, train: TrainConfig, seg: SegConfig = SegConfig()):
        super().__init__(train)
        self.seg_cfg = seg
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(train.seed)
            self.modules["seg"] = SegUNet(seg.in_channels, seg.base_channels, seg.depth)
        self._finish_init()

    def configs(self):
        return {"seg": asdict(self.seg_cfg)}

    def prepare(self, pairs):
        self.images, self.masks = stack_pairs(pairs)

    @property
    def size(self):
        return self.images.shape[0]

    def step(self, idx, gen):
        pred = self.modules["seg"](self.images[idx])
        return optimize_step(bce_loss(pred, self.masks[idx]), self.optimizers["seg"], self.train_cfg.grad_clip)


@dataclass(frozen=True)
class SRConfig:
    scale: int = 2
    mode: str = "rgb"  # "rgb" (fundus, feature loss) or "binary" (vessel maps, BCE)
    nf: int = 32
    gc: int = 16
    num_blocks: int = 4
    res_scale: float = 0.2
    disc_channels: int = 16
    weight_pixel: float = 1.0
    weight_ssim: float = 1.0
    weight_adversarial: float = 0.01
    weight_aux: float = 1.0

    @property
    def channels(self) -> int:
        return 3 if self.mode == "rgb" else 1

    @property
    def weights(self) -> SRLossWeights:
        return SRLossWeights(self.weight_pixel, self.weight_ssim, self.weight_adversarial, self.weight_aux)


class SRStage(Stage):
    name = "sr"

    def __init__(self, train: TrainConfig, sr: SRConfig = SRConfig(), ssim_cfg: SsimConfig = SsimConfig()):
        super().__init__(train)
        if sr.mode not in ("rgb", "binary"):
            raise ValueError(f"unknown SR mode {sr.mode!r}")
        self.sr_cfg = sr
        self.ssim_cfg = ssim_cfg
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(train.seed)
            self.modules["generator"] = RRDBNet(sr.channels, sr.channels, sr.scale, sr.nf, sr.gc, sr.num_blocks, sr.res_scale)
            if sr.weight_adversarial > 0:
                self.modules["critic"] = Discriminator(sr.channels, sr.disc_channels)
        self._finish_init()

    def configs(self):
        return {"sr": asdict(self.sr_cfg), "ssim": asdict(self.ssim_cfg)}

    def prepare(self, pairs):
        fundus, vessel = stack_pairs(pairs)
        self.hr = fundus if self.sr_cfg.mode == "rgb" else vessel
        self.lr = F.avg_pool2d(self.hr, self.sr_cfg.scale)

    @property
    def size(self):
        return self.hr.shape[0]

    def step(self, idx, gen):
        G = self.modules["generator"]
        critic = self.modules.get("critic")
        lr, hr = self.lr[idx], self.hr[idx]
        sr = G(lr)
        d_fake = critic(to_model_range(sr)) if critic is not None else None
        total, _ = sr_generator_loss(sr, hr, d_fake, self.sr_cfg.mode, self.sr_cfg.weights, self.ssim_cfg)
        value = optimize_step(total, self.optimizers["generator"], self.train_cfg.grad_clip)
        if critic is not None:
            losses = adversarial_losses(critic(to_model_range(hr)), critic(to_model_range(sr.detach())))
            optimize_step(losses["d_loss"], self.optimizers["critic"], self.train_cfg.grad_clip)
        return value


@dataclass(frozen=True)
class DiscConfig:
    in_channels: int = 4
    base_channels: int = 16
    vit_heads: int = 4
    vit_depth: int = 1


def corrupt_pairs(fundus: torch.Tensor, vessel: torch.Tensor, gen: torch.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    """Stand-in fakes: uniform-noise fundus images paired with real vessel maps."""
    noise = torch.rand(fundus.shape, generator=gen, dtype=fundus.dtype)
    return noise, vessel


class DiscStage(Stage):
    name = "disc"

    def __init__(self, train: TrainConfig, disc: DiscConfig = DiscConfig(), fakes: Sequence[ImagePair] | None = None):
        super().__init__(train)
        self.disc_cfg = disc
        self.fake_pairs = fakes
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(train.seed)
            self.modules["disc"] = Discriminator(disc.in_channels, disc.base_channels, disc.vit_heads, disc.vit_depth)
        self._finish_init()

    def configs(self):
        return {"disc": asdict(self.disc_cfg)}

    def prepare(self, pairs):
        self.fundus, self.vessel = stack_pairs(pairs)
        if self.fake_pairs:
            self.fake_fundus, self.fake_vessel = stack_pairs(self.fake_pairs)
        else:
            self.fake_fundus = self.fake_vessel = None

    @property
    def size(self):
        return self.fundus.shape[0]

    def step(self, idx, gen):
        D = self.modules["disc"]
        real = torch.cat([self.fundus[idx], self.vessel[idx]], 1)
        if self.fake_fundus is None:
            ff, fv = corrupt_pairs(self.fundus[idx], self.vessel[idx], gen)
        else:
            pick = torch.randint(0, self.fake_fundus.shape[0], (len(idx),), generator=gen)
            ff, fv = self.fake_fundus[pick], self.fake_vessel[pick]
        fake = torch.cat([ff, fv], 1)
        losses = adversarial_losses(D(to_model_range(real)), D(to_model_range(fake)))
        return optimize_step(losses["d_loss"], self.optimizers["disc"], self.train_cfg.grad_clip)


def make_stage(stage: str, train: TrainConfig, *, denoiser: DenoiserConfig | None = None,
               schedule: ScheduleConfig | None = None, sr: SRConfig | None = None, seg: SegConfig | None = None,
               disc: DiscConfig | None = None, ssim: SsimConfig | None = None, fakes=None) -> Stage:
    if stage == "vessel":
        return DiffusionStage(train, denoiser or DenoiserConfig(1, 1), schedule or ScheduleConfig(), False)
    if stage == "fundus":
        return DiffusionStage(train, denoiser or DenoiserConfig(4, 3), schedule or ScheduleConfig(), True)
    if stage == "sr":
        return SRStage(train, sr or SRConfig(), ssim or SsimConfig())
    if stage == "seg":
        return SegStage(train, seg or SegConfig())
    if stage == "disc":
        return DiscStage(train, disc or DiscConfig(), fakes)
    raise ValueError(f"unknown stage {stage!r}; expected one of {STAGES}")


# -- checkpoints ------------------------------------------------------------

CKPT_MAGIC = b"RTCK"
CKPT_VERSION = 1
_DTYPES = {torch.float32: 0, torch.float64: 1, torch.int64: 2, torch.uint8: 3, torch.int32: 4, torch.bool: 5}
_DTYPES_INV = {v: k for k, v in _DTYPES.items()}
_NP = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8", torch.uint8: "u1", torch.int32: "<i4", torch.bool: "?"}


class CheckpointError(DataError):
    pass


@dataclass
class Checkpoint:
    stage: str
    meta: dict
    tensors: dict[str, torch.Tensor]
    version: int = CKPT_VERSION

    @property
    def epoch(self) -> int:
        return int(self.meta.get("epoch", 0))

    def equals(self, other: "Checkpoint") -> bool:
        if (self.stage, self.version, self.meta) != (other.stage, other.version, other.meta):
            return False
        if self.tensors.keys() != other.tensors.keys():
            return False
        return all(
            a.dtype == b.dtype and a.shape == b.shape and torch.equal(a, b)
            for a, b in ((self.tensors[k], other.tensors[k]) for k in self.tensors)
        )


def _pack_tensors(tensors: dict[str, torch.Tensor]) -> bytes:
    out = io.BytesIO()
    out.write(struct.pack("<I", len(tensors)))
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"cannot serialise dtype {t.dtype} ({name})")
        raw = name.encode("utf-8")
        out.write(struct.pack("<H", len(raw)) + raw)
        out.write(struct.pack("<BB", _DTYPES[t.dtype], t.dim()))
        out.write(struct.pack(f"<{t.dim()}I", *t.shape))
        out.write(t.numpy().astype(_NP[t.dtype], copy=False).tobytes())
    return out.getvalue()


def _unpack_tensors(buf: bytes) -> dict[str, torch.Tensor]:
    (count,) = struct.unpack_from("<I", buf, 0)
    pos = 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        code, rank = struct.unpack_from("<BB", buf, pos)
        pos += 2
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        dtype = _DTYPES_INV[code]
        np_dtype = np.dtype(_NP[dtype])
        count_el = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(buf, dtype=np_dtype, count=count_el, offset=pos).reshape(dims)
        pos += count_el * np_dtype.itemsize
        tensors[name] = torch.from_numpy(arr.copy())
    if pos != len(buf):
        raise CheckpointError("trailing bytes in tensor section")
    return tensors


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    sections = [
        ("meta", json.dumps({"stage": ckpt.stage, **ckpt.meta}, sort_keys=True).encode("utf-8")),
        ("tensors", _pack_tensors(ckpt.tensors)),
    ]
    body = io.BytesIO()
    body.write(CKPT_MAGIC + struct.pack("<II", ckpt.version, len(sections)))
    for name, payload in sections:
        raw = name.encode("utf-8")
        body.write(struct.pack("<H", len(raw)) + raw + struct.pack("<Q", len(payload)))
    for _, payload in sections:
        body.write(payload)
    data = body.getvalue()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(data + struct.pack("<I", zlib.crc32(data)))


def load_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(data) < 16 or data[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt file)")
    version, nsec = struct.unpack_from("<II", body, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    pos = 12
    table = []
    for _ in range(nsec):
        (nlen,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (length,) = struct.unpack_from("<Q", body, pos)
        pos += 8
        table.append((name, length))
    sections = {}
    for name, length in table:
        sections[name] = body[pos:pos + length]
        pos += length
    meta = json.loads(sections["meta"].decode("utf-8"))
    stage = meta.pop("stage")
    return Checkpoint(stage, meta, _unpack_tensors(sections["tensors"]), version)


def _jsonable_rtt(state: RttState) -> dict:
    d = asdict(state)
    d["global_min_epoch_avg"] = None if math.isinf(state.global_min_epoch_avg) else state.global_min_epoch_avg
    return d


def _rtt_from_json(d: dict) -> RttState:
    d = dict(d)
    if d["global_min_epoch_avg"] is None:
        d["global_min_epoch_avg"] = math.inf
    return RttState(**d)


def stage_checkpoint(stage: Stage, rtt: RttState, gen: torch.Generator, epoch: int, extra: dict | None = None) -> Checkpoint:
    tensors = {}
    for name, module in stage.modules.items():
        for key, value in module.state_dict().items():
            tensors[f"model/{name}/{key}"] = value.detach().clone()
    for name, opt in stage.optimizers.items():
        for idx, state in opt.state_dict()["state"].items():
            for key, value in state.items():
                tensors[f"optim/{name}/{idx}/{key}"] = torch.as_tensor(value).clone()
    tensors["rng/torch"] = gen.get_state().clone()
    meta = {
        "configs": stage.configs(),
        "train": asdict(stage.train_cfg),
        "rtt": _jsonable_rtt(rtt),
        "epoch": epoch,
        **(extra or {}),
    }
    return Checkpoint(stage.name, meta, tensors)


def _restore(stage: Stage, ckpt: Checkpoint) -> tuple[RttState, torch.Generator, int]:
    for name, module in stage.modules.items():
        prefix = f"model/{name}/"
        module.load_state_dict({k[len(prefix):]: v for k, v in ckpt.tensors.items() if k.startswith(prefix)})
    for name, opt in stage.optimizers.items():
        sd = opt.state_dict()
        prefix = f"optim/{name}/"
        state: dict[int, dict] = {}
        for key, value in ckpt.tensors.items():
            if key.startswith(prefix):
                idx, field_name = key[len(prefix):].split("/", 1)
                state.setdefault(int(idx), {})[field_name] = value.clone()
        sd["state"] = state
        opt.load_state_dict(sd)
    gen = torch.Generator().manual_seed(0)
    gen.set_state(ckpt.tensors["rng/torch"].clone())
    return _rtt_from_json(ckpt.meta["rtt"]), gen, ckpt.epoch


def stage_from_checkpoint(ckpt: Checkpoint, fakes=None) -> Stage:
    cfgs = ckpt.meta["configs"]
    train = TrainConfig(**ckpt.meta["train"])
    kwargs = {}
    if "denoiser" in cfgs:
        kwargs["denoiser"] = DenoiserConfig(**cfgs["denoiser"])
        kwargs["schedule"] = ScheduleConfig(**cfgs["schedule"])
    if "sr" in cfgs:
        kwargs["sr"] = SRConfig(**cfgs["sr"])
        kwargs["ssim"] = SsimConfig(**cfgs["ssim"])
    if "seg" in cfgs:
        kwargs["seg"] = SegConfig(**cfgs["seg"])
    if "disc" in cfgs:
        kwargs["disc"] = DiscConfig(**cfgs["disc"])
    stage = make_stage(ckpt.stage, train, fakes=fakes, **kwargs)
    _restore(stage, ckpt)
    return stage


def load_model(path_or_ckpt, name: str | None = None) -> torch.nn.Module:
    """Rebuild the primary network of a checkpoint, in eval mode."""
    ckpt = path_or_ckpt if isinstance(path_or_ckpt, Checkpoint) else load_checkpoint(path_or_ckpt)
    stage = stage_from_checkpoint(ckpt)
    default = {"vessel": "denoiser", "fundus": "denoiser", "sr": "generator", "seg": "seg", "disc": "disc"}
    model = stage.modules[name or default[ckpt.stage]]
    model.eval()
    return model


# -- fit --------------------------------------------------------------------

@dataclass
class FitResult:
    final: Checkpoint
    best: Checkpoint
    log: list[str]
    epoch_averages: list[float]


def _training_pairs(dataset):
    if isinstance(dataset, torch.Tensor):
        return dataset
    if isinstance(dataset, DatasetManifest):
        pairs = dataset.load_split("train")
    else:
        pairs = list(dataset)
    if not pairs:
        raise DataError("training set is empty")
    return pairs


def fit(stage: Stage | str, dataset, cfg: TrainConfig | None = None, *, resume: Checkpoint | None = None,
        out_dir=None, log_stream=None, on_epoch: Callable[[int, float], None] | None = None, **stage_kwargs) -> FitResult:
    """Train one stage for ``cfg.epochs`` epochs (continuing from ``resume``).

    Emits one ``epoch step loss reps wallclock_ms`` line per batch; if
    ``out_dir`` is given, also writes ``loss.log``, ``last.rtck`` and
    ``best.rtck`` there.
    """
    if isinstance(stage, str):
        if resume is not None:
            stage = stage_from_checkpoint(resume, fakes=stage_kwargs.get("fakes"))
        else:
            stage = make_stage(stage, cfg or TrainConfig(), **stage_kwargs)
    cfg = cfg or stage.train_cfg
    stage.train_cfg = cfg
    stage.prepare(_training_pairs(dataset))

    if resume is not None:
        rtt, gen, start_epoch = _restore(stage, resume)
        best_avg = min(rtt.epoch_averages, default=math.inf)
        best = resume if rtt.epoch_averages and rtt.epoch_averages[-1] == best_avg else None
    else:
        rtt, gen, start_epoch = RttState(), torch.Generator().manual_seed(cfg.seed), 0
        best_avg, best = math.inf, None

    for module in stage.modules.values():
        module.train()
    out = Path(out_dir) if out_dir else None
    log_file = None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        log_file = open(out / "loss.log", "a" if resume is not None else "w", encoding="utf-8")

    lines: list[str] = []
    t0 = time.perf_counter()
    step = sum(rtt.reps_histogram)
    extra = {"resolution": stage.resolution}
    final = stage_checkpoint(stage, rtt, gen, start_epoch, extra)
    try:
        for epoch in range(start_epoch + 1, cfg.epochs + 1):
            order = torch.randperm(stage.size, generator=gen)
            for first in range(0, stage.size, cfg.batch_size):
                idx = order[first:first + cfg.batch_size]
                last = []

                def do_step():
                    loss = stage.step(idx, gen)
                    last.append(loss)
                    return loss

                reps = rtt_apply(rtt, do_step, cfg)
                step += 1
                line = f"{epoch} {step} {last[-1]:.6f} {reps} {int((time.perf_counter() - t0) * 1000)}"
                lines.append(line)
                for sink in (log_file, log_stream):
                    if sink is not None:
                        sink.write(line + "\n")
            avg = end_epoch(rtt)
            if log_file is not None:
                log_file.flush()
            final = stage_checkpoint(stage, rtt, gen, epoch, extra)
            if avg <= best_avg:
                best_avg, best = avg, final
            if out:
                save_checkpoint(final, out / "last.rtck")
                if best is final:
                    save_checkpoint(best, out / "best.rtck")
            if on_epoch is not None:
                on_epoch(epoch, avg)
    finally:
        if log_file is not None:
            log_file.close()
    if best is None:
        best = final
        if out:
            save_checkpoint(final, out / "last.rtck")
            save_checkpoint(best, out / "best.rtck")
    return FitResult(final, best, lines, list(rtt.epoch_averages))
