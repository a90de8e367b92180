"""Run configuration from flat ``section.key=value`` text.

Example::

    # comments and blank lines are ignored
    seed=7
    ablation=de
    data.source=synthetic
    synth.n_users=500
    trainer.lr=0.01
    model.ae_hidden=64,32

Every field has a default and unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .data import ConfigError, SynthConfig
from .model import ModelConfig, canonical_variant
from .trainer import TrainConfig


@dataclass
class DataConfig:
    source: str = "synthetic"  # "synthetic" or a path to an events file
    threshold: float = 4.0


@dataclass
class EvalSettings:
    n_folds: int = 5
    fold: int = 0
    test_negatives: int = 99
    k: int = 10
    fold_seed: int = 42
    jobs: int = 1


@dataclass
class RunConfig:
    seed: int = 0
    ablation: str = "DASL"
    out: str = "runs"
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    trainer: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)

    def validate(self) -> None:
        try:
            self.ablation = canonical_variant(self.ablation)
            self.model.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        self.synth.validate()
        self.trainer.seed = self.seed
        if not 0 <= self.eval.fold < self.eval.n_folds:
            raise ConfigError(f"eval.fold must be in [0, {self.eval.n_folds})")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        """Canonical flat text; ``parse_config(cfg.to_text())`` reproduces ``cfg``."""
        return "".join(f"{k}={v}\n" for k, v in flat_items(self))


def _coerce(raw: str, default, key: str):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {type(default).__name__}") from None
    return raw.strip()


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def flat_items(cfg: RunConfig) -> list[tuple[str, str]]:
    out = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            out += [(f"{f.name}.{g.name}", _format(getattr(value, g.name)))
                    for g in dataclasses.fields(value) if (f.name, g.name) != ("trainer", "seed")]
        else:
            out.append((f.name, _format(value)))
    return out


def apply_setting(cfg: RunConfig, key: str, raw: str) -> None:
    parts = key.strip().split(".")
    if parts == ["trainer", "seed"]:
        raise ConfigError("trainer.seed is not settable; the top-level seed drives training")
    target = cfg
    for name in parts[:-1]:
        sub = getattr(target, name, None) if name in _field_names(target) else None
        if not dataclasses.is_dataclass(sub):
            raise ConfigError(f"unknown config key {key!r}")
        target = sub
    leaf = parts[-1]
    if leaf not in _field_names(target) or dataclasses.is_dataclass(getattr(target, leaf)):
        raise ConfigError(f"unknown config key {key!r}")
    setattr(target, leaf, _coerce(raw, getattr(target, leaf), key))


def _field_names(obj) -> set[str]:
    return {f.name for f in dataclasses.fields(obj)}


def parse_config(text: str) -> RunConfig:
    cfg = RunConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = line.split("=", 1)
        apply_setting(cfg, key, raw.strip())
    cfg.validate()
    return cfg


def load_config(path=None) -> RunConfig:
    if path is None:
        cfg = RunConfig()
        cfg.validate()
        return cfg
    return parse_config(Path(path).read_text())
