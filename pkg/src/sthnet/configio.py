"""Flat ``key = value`` configuration files.

Keys carry dotted section prefixes (``net.p = 1/4``, ``train.lr = 0.01``,
``data.task = motion``); ``#`` starts a comment; unknown keys are rejected
with their line number. Proportions accept rationals like ``1/4``.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

from .datasynth import SynthConfig
from .errors import ConfigError
from .network import NetworkConfig
from .train import TrainConfig


def _parse_bool(raw: str) -> bool:
    lowered = raw.lower()
    if lowered in ("on", "true", "1", "yes"):
        return True
    if lowered in ("off", "false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_fraction(raw: str) -> Fraction:
    return Fraction(raw)


def _parse_int_list(raw: str) -> tuple[int, ...]:
    raw = raw.strip()
    if not raw:
        return ()
    return tuple(int(v) for v in raw.split(","))


NET_KEYS = {
    "net.num_class": int,
    "net.frames": int,
    "net.input_hw": int,
    "net.in_channels": int,
    "net.p": _parse_fraction,
    "net.kernel_type": str,
    "net.attention": _parse_bool,
    "net.variant": str,
    "net.scale_factor": int,
    "net.reduction": int,
    "net.seed": int,
}

TRAIN_KEYS = {
    "train.lr": float,
    "train.momentum": float,
    "train.weight_decay": float,
    "train.epochs": int,
    "train.batch_size": int,
    "train.lr_steps": _parse_int_list,
    "train.lr_decay": float,
    "train.seed": int,
}

DATA_KEYS = {
    "data.task": str,
    "data.num_class": int,
    "data.frames_total": int,
    "data.resolution": int,
    "data.object_size": int,
    "data.speed": int,
    "data.noise_sigma": float,
    "data.samples_per_class": int,
    "data.val_fraction": float,
    "data.channels": int,
    "data.seed": int,
}

ALL_KEYS = {**NET_KEYS, **TRAIN_KEYS, **DATA_KEYS}


@dataclass
class RunConfig:
    """Parsed union of the three config sections plus raw values."""

    values: dict
    path: str

    def section(self, prefix: str) -> dict:
        plen = len(prefix) + 1
        return {k[plen:]: v for k, v in self.values.items() if k.startswith(prefix + ".")}

    def network_config(self) -> NetworkConfig:
        kw = self.section("net")
        kw.pop("seed", None)
        if "num_class" not in kw:
            raise ConfigError(f"{self.path}: net.num_class is required")
        return NetworkConfig(**kw)

    def net_seed(self, default: int = 0) -> int:
        return self.values.get("net.seed", default)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.section("train"))

    def synth_config(self) -> SynthConfig:
        return SynthConfig(**self.section("data"))


def parse_config_text(text: str, path: str = "<config>") -> RunConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}: expected 'key = value', got {raw!r}", line=lineno)
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in ALL_KEYS:
            raise ConfigError(f"{path}: unknown key {key!r}", line=lineno)
        if key in values:
            raise ConfigError(f"{path}: duplicate key {key!r}", line=lineno)
        try:
            values[key] = ALL_KEYS[key](value)
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigError(f"{path}: bad value for {key}: {exc}", line=lineno)
    return RunConfig(values=values, path=path)


def load_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(), path=str(path))
