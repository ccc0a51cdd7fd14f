"""Experiment configuration: a flat key = value text format, strictly typed.

Unknown keys are rejected, every value must parse at the field's declared
type, and a config round-trips text -> config -> text. CLI/service overrides
are "key=value" strings applied on top.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import List

from .gan import LossKind, Strategy, TrainConfig

SWEEP_AXES = ("", "base_channels", "r1_gamma")
DATA_SOURCES = ("synthetic", "folder")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data_source: str = "synthetic"
    data_path: str = ""
    synthetic_n: int = 500
    fraction: float = 1.0
    out_dir: str = "runs/out"
    eval_samples: int = 128
    flip_reals: bool = True
    sweep_axis: str = ""
    sweep_values: str = ""

    def validate(self) -> None:
        t = self.train
        if self.data_source not in DATA_SOURCES:
            raise ConfigError(f"data_source must be one of {DATA_SOURCES}, got {self.data_source!r}")
        if self.data_source == "folder" and not self.data_path:
            raise ConfigError("data_path is required when data_source = folder")
        if not 0.0 < self.fraction <= 1.0:
            raise ConfigError(f"fraction must be in (0, 1], got {self.fraction}")
        if self.eval_samples < 64:
            raise ConfigError(f"eval_samples must be >= 64, got {self.eval_samples}")
        if t.total_steps < 0:
            raise ConfigError(f"total_steps must be >= 0, got {t.total_steps}")
        if t.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {t.eval_every}")
        if t.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {t.batch_size}")
        if self.sweep_axis not in SWEEP_AXES:
            raise ConfigError(f"sweep_axis must be one of {SWEEP_AXES}, got {self.sweep_axis!r}")
        if self.sweep_axis and not self.sweep_values:
            raise ConfigError("sweep_values is required when sweep_axis is set")
        if self.sweep_values:
            self.sweep_value_list()  # parses or raises
        from .augment import parse_policy

        parse_policy(t.policy)

    def sweep_value_list(self) -> List[float]:
        vals = []
        for tok in self.sweep_values.split(","):
            tok = tok.strip()
            if not tok:
                continue
            try:
                vals.append(float(tok))
            except ValueError:
                raise ConfigError(f"bad sweep value {tok!r}") from None
        if not vals:
            raise ConfigError("sweep_values is empty")
        return vals


def _flat_fields():
    """(key, owner, field) for every settable key, train fields first."""
    out = []
    for f in fields(TrainConfig):
        out.append((f.name, "train", f))
    for f in fields(ExperimentConfig):
        if f.name != "train":
            out.append((f.name, "top", f))
    return out


_FIELDS = {name: (owner, f) for name, owner, f in _flat_fields()}


def _parse_value(key: str, f, raw: str):
    raw = raw.strip()
    # dataclass annotations are strings here; dispatch on the default's type
    default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int) and not isinstance(default, bool):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from None
    if isinstance(default, Strategy):
        try:
            return Strategy(raw)
        except ValueError:
            raise ConfigError(f"{key}: unknown strategy {raw!r}") from None
    if isinstance(default, LossKind):
        try:
            return LossKind(raw)
        except ValueError:
            raise ConfigError(f"{key}: unknown loss {raw!r}") from None
    return raw


def set_key(cfg: ExperimentConfig, key: str, raw: str) -> None:
    entry = _FIELDS.get(key)
    if entry is None:
        raise ConfigError(f"unknown config key {key!r}")
    owner, f = entry
    value = _parse_value(key, f, raw)
    target = cfg.train if owner == "train" else cfg
    setattr(target, key, value)
    if key in ("strategy", "loss_kind"):
        # re-normalise enum coercion done in TrainConfig.__post_init__
        cfg.train.__post_init__()


def from_text(text: str) -> ExperimentConfig:
    cfg = ExperimentConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, raw = body.split("=", 1)
        set_key(cfg, key.strip(), raw)
    return cfg


def from_file(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return from_text(p.read_text())


def apply_overrides(cfg: ExperimentConfig, overrides) -> ExperimentConfig:
    for ov in overrides or []:
        if "=" not in ov:
            raise ConfigError(f"override must look like key=value, got {ov!r}")
        key, raw = ov.split("=", 1)
        set_key(cfg, key.strip(), raw)
    return cfg


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (Strategy, LossKind)):
        return value.value
    if isinstance(value, float):
        return repr(value)
    return str(value)


def to_text(cfg: ExperimentConfig) -> str:
    lines = []
    for name, owner, f in _flat_fields():
        target = cfg.train if owner == "train" else cfg
        lines.append(f"{name} = {_fmt(getattr(target, name))}")
    return "\n".join(lines) + "\n"


def default_config_text() -> str:
    return to_text(ExperimentConfig())
