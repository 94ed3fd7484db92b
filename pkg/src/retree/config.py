"""Run configuration: one INI-style ``key = value`` file with sections, plus
``section.key=value`` overrides from the command line. Unknown sections or
keys are rejected."""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .data import SyntheticTreeParams
from .errors import ConfigError
from .losses import SsimConfig
from .networks import DenoiserConfig
from .schedules import ScheduleConfig
from .training import DiscConfig, SegConfig, SRConfig, TrainConfig


@dataclass(frozen=True)
class DenoiserArch:
    """Denoiser hyper-parameters shared by both diffusion stages."""

    base_channels: int = 16
    down_factor: int = 4
    num_down: int = 2
    num_up: int = 4
    vit_heads: int = 4
    vit_depth: int = 2
    time_dim: int = 64
    groups: int = 1  # one group keeps per-image intensity offsets visible to the network


@dataclass(frozen=True)
class EmbedConfig:
    dim: int = 64
    pool: int = 8
    seed: int = 0


@dataclass(frozen=True)
class SampleConfig:
    batch_size: int = 100


@dataclass(frozen=True)
class RunConfig:
    schedule: ScheduleConfig = field(default_factory=lambda: ScheduleConfig(kind="linear"))
    denoiser: DenoiserArch = field(default_factory=DenoiserArch)
    train: TrainConfig = field(default_factory=TrainConfig)
    ssim: SsimConfig = field(default_factory=SsimConfig)
    sr: SRConfig = field(default_factory=SRConfig)
    seg: SegConfig = field(default_factory=SegConfig)
    disc: DiscConfig = field(default_factory=DiscConfig)
    data: SyntheticTreeParams = field(default_factory=SyntheticTreeParams)
    metrics: EmbedConfig = field(default_factory=EmbedConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)

    def denoiser_config(self, in_channels: int, out_channels: int) -> DenoiserConfig:
        return DenoiserConfig(in_channels=in_channels, out_channels=out_channels, T=self.schedule.T,
                              **dataclasses.asdict(self.denoiser))

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, train=replace(self.train, seed=seed), data=replace(self.data, seed=seed))


SECTIONS = tuple(f.name for f in fields(RunConfig))


def _convert(value: str, kind, where: str):
    kind = {"int": int, "float": float, "bool": bool, "str": str}.get(kind, kind) if isinstance(kind, str) else kind
    try:
        if kind is bool:
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if kind is int:
            return int(value)
        if kind is float:
            return float(value)
        return value.strip()
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {value!r} as {kind.__name__}") from None


def _apply(cfg: RunConfig, section: str, key: str, value: str) -> RunConfig:
    if section not in SECTIONS:
        raise ConfigError(f"unknown config section [{section}]")
    sub = getattr(cfg, section)
    types = {f.name: f.type for f in fields(sub)}
    if key not in types:
        raise ConfigError(f"unknown key {key!r} in [{section}]")
    converted = _convert(value, types[key], f"{section}.{key}")
    try:
        return replace(cfg, **{section: replace(sub, **{key: converted})})
    except ValueError as exc:
        raise ConfigError(f"{section}.{key} = {value}: {exc}") from None


def parse_config(text: str = "", overrides: list[str] | tuple[str, ...] = ()) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, strict=True)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    cfg = RunConfig()
    for section in parser.sections():
        for key, value in parser.items(section):
            cfg = _apply(cfg, section, key, value)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        lhs, value = item.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        cfg = _apply(cfg, section, key.strip(), value)
    return cfg


def load_config(path=None, overrides=()) -> RunConfig:
    text = ""
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, overrides)


def dump_config(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section in SECTIONS:
        parser[section] = {k: str(v) for k, v in dataclasses.asdict(getattr(cfg, section)).items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
