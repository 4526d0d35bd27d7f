"""Experiment configuration as flat ``key = value`` text.

Keys are ``section.field`` for the ``data``, ``train``, ``tam`` and
``adapt`` sections, plus the top-level ``scenario`` and ``seed``.  Lines
starting with ``#`` are comments.  Values are typed by the dataclass field
they target, so a dumped config parses back to an equal object.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from sfdet.adapt import AdaptConfig
from sfdet.benchmark import BenchmarkScale
from sfdet.datagen import SEVERITIES, ConfigError
from sfdet.detector import TrainConfig
from sfdet.tam import TamConfig


@dataclass
class ExperimentConfig:
    scenario: str = "moderate"
    seed: int = 0
    data: BenchmarkScale = field(default_factory=BenchmarkScale)
    train: TrainConfig = field(default_factory=TrainConfig)
    tam: TamConfig = field(default_factory=TamConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)

    SECTIONS = ("data", "train", "tam", "adapt")

    def validate(self) -> None:
        if self.scenario not in SEVERITIES:
            raise ConfigError(f"scenario must be one of {SEVERITIES}, got {self.scenario!r}")
        self.adapt.validate()

    def with_overrides(self, pairs: dict[str, str]) -> "ExperimentConfig":
        cfg = self
        for key, raw in pairs.items():
            cfg = _set(cfg, key, raw)
        cfg.validate()
        return cfg

    def dumps(self) -> str:
        lines = [f"scenario = {self.scenario}", f"seed = {self.seed}"]
        for section in self.SECTIONS:
            obj = getattr(self, section)
            for f in dataclasses.fields(obj):
                lines.append(f"{section}.{f.name} = {_format(getattr(obj, f.name))}")
        return "\n".join(lines) + "\n"


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _coerce(raw: str, like, key: str):
    raw = raw.strip()
    try:
        if isinstance(like, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, tuple):
            return tuple(type(like[0])(v) for v in raw.split(",")) if like else tuple(raw.split(","))
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(like).__name__}") from None
    return raw


def _set(cfg: ExperimentConfig, key: str, raw: str) -> ExperimentConfig:
    if key in ("scenario", "seed"):
        return dataclasses.replace(cfg, **{key: _coerce(raw, getattr(cfg, key), key)})
    section, _, name = key.partition(".")
    if section not in ExperimentConfig.SECTIONS or not name:
        raise ConfigError(f"unknown config key {key!r}")
    obj = getattr(cfg, section)
    names = {f.name for f in dataclasses.fields(obj)}
    if name not in names:
        raise ConfigError(f"unknown config key {key!r}; {section} has {sorted(names)}")
    new_obj = dataclasses.replace(obj, **{name: _coerce(raw, getattr(obj, name), key)})
    return dataclasses.replace(cfg, **{section: new_obj})


def parse_pairs(text: str, where: str = "<config>") -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{where}:{lineno}: expected 'key = value', got {line!r}")
        pairs[key.strip()] = value.strip()
    return pairs


def loads(text: str, where: str = "<config>") -> ExperimentConfig:
    return ExperimentConfig().with_overrides(parse_pairs(text, where))


def load(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    return loads(path.read_text(), str(path))
