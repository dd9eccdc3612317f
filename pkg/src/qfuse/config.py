"""Flat ``section.key = value`` run configuration files.

Example::

    # desk run
    dataset.num_classes = 8
    model.moe.top_k = 2
    model.ablation.disable_gating = false
    train.epochs = 20

Unknown keys are rejected with the file and line number. :func:`dump`
writes every resolved key, so a run directory always records the full
configuration it was produced with.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .data import DatasetSpec
from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}
# derived from model.num_classes, never set directly
_HIDDEN = {"model.moe.num_classes"}


@dataclass
class RunSettings:
    out_dir: str = ""
    dataset_path: str = ""
    checkpoint: str = ""


@dataclass
class GradcheckSettings:
    step: float = 1e-5
    tolerance: float = 1e-4
    batch: int = 4
    max_coords: int = 0  # 0 checks every coordinate


@dataclass
class RunConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    run: RunSettings = field(default_factory=RunSettings)
    gradcheck: GradcheckSettings = field(default_factory=GradcheckSettings)

    def sync(self) -> None:
        self.model.moe.num_classes = self.model.num_classes

    def set_seed(self, seed: int) -> None:
        self.dataset.seed = self.model.seed = self.train.seed = int(seed)

    def validate(self) -> None:
        self.sync()
        self.dataset.validate()
        self.model.validate()
        self.train.validate()
        if self.model.d_model != self.dataset.d_model:
            raise ConfigError(
                f"model.d_model={self.model.d_model} differs from dataset.d_model={self.dataset.d_model}"
            )
        if self.model.num_classes != self.dataset.num_classes:
            raise ConfigError(
                f"model.num_classes={self.model.num_classes} differs from "
                f"dataset.num_classes={self.dataset.num_classes}"
            )

    def digest(self) -> str:
        return hashlib.sha256(dump(self).encode()).hexdigest()


def _coerce(raw: str, current, where: str):
    if isinstance(current, bool):
        v = raw.lower()
        if v in _TRUE:
            return True
        if v in _FALSE:
            return False
        raise ConfigError(f"{where}: expected a boolean, got {raw!r}")
    try:
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{where}: expected {type(current).__name__}, got {raw!r}") from None
    return raw


def set_key(cfg: RunConfig, key: str, raw: str, where: str = "<override>") -> None:
    parts = key.split(".")
    if key in _HIDDEN:
        raise ConfigError(f"{where}: {key} is derived and cannot be set")
    obj = cfg
    for i, name in enumerate(parts):
        if not dataclasses.is_dataclass(obj) or name not in {f.name for f in dataclasses.fields(obj)}:
            raise ConfigError(f"{where}: unknown key {key!r}")
        if i == len(parts) - 1:
            current = getattr(obj, name)
            if dataclasses.is_dataclass(current):
                raise ConfigError(f"{where}: {key!r} is a section, not a key")
            setattr(obj, name, _coerce(raw.strip(), current, where))
        else:
            obj = getattr(obj, name)


def parse(text: str, source: str = "<string>") -> RunConfig:
    cfg = RunConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}"
        if "=" not in line:
            raise ConfigError(f"{where}: expected key = value, got {line!r}")
        key, raw = line.split("=", 1)
        set_key(cfg, key.strip(), raw, where)
    cfg.sync()
    return cfg


def load(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse(text, str(path))


def _leaves(obj, prefix=""):
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            yield from _leaves(value, key + ".")
        elif key not in _HIDDEN:
            yield key, value


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump(cfg: RunConfig) -> str:
    cfg.sync()
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in _leaves(cfg))
