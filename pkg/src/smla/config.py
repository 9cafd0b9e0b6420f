"""Run configuration: flat ``key = value`` text with sections.

Sections ``[model]``, ``[train]``, ``[frontend]`` map onto the dataclasses of
the same name; ``[run]`` holds the ablation selector and paths. Unknown
sections and keys are rejected.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .frontend import FrontendConfig
from .model import ABLATIONS, ModelConfig
from .training import TrainConfig


@dataclass
class RunSection:
    ablation: str = ""
    data_dir: str = ""
    manifest: str = ""
    checkpoint: str = ""
    trials: str = ""
    metrics_log: str = ""
    out: str = ""


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(raw: str, default, key):
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
            return tuple(int(v) for v in raw.split(",") if v.strip())
        return raw.strip()
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def dump_sections(sections: dict) -> str:
    lines = []
    for name, values in sections.items():
        lines.append(f"[{name}]")
        lines.extend(f"{k} = {_format(v)}" for k, v in values.items())
        lines.append("")
    return "\n".join(lines)


def parse_sections(text: str) -> dict:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"cannot parse config: {e}") from None
    return {s: dict(parser[s]) for s in parser.sections()}


def _section_to_dataclass(cls, values: dict, base=None, section=""):
    base = base if base is not None else cls()
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, raw in values.items():
        if key not in names:
            raise ConfigError(f"unknown key {key!r} in [{section}]; valid keys: {', '.join(sorted(names))}")
        kwargs[key] = _coerce(raw, getattr(base, key), f"{section}.{key}")
    return dataclasses.replace(base, **kwargs)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    run: RunSection = field(default_factory=RunSection)

    SECTIONS = ("model", "train", "frontend", "run")

    @classmethod
    def desk(cls, num_speakers=8):
        """Laptop-sized preset: narrow one-block-per-stage trunk on 64×300 inputs."""
        return cls(model=ModelConfig(channels=(8, 8, 16, 32, 64), blocks=(1, 1, 1, 1),
                                     num_speakers=num_speakers),
                   train=TrainConfig(batch_size=32, epochs=30),
                   frontend=FrontendConfig(target_frames=300))

    @classmethod
    def full(cls, num_speakers=1211):
        """Full-size architecture and optimiser schedule."""
        return cls(model=ModelConfig(num_speakers=num_speakers),
                   train=TrainConfig(batch_size=96, epochs=200),
                   frontend=FrontendConfig(target_frames=1200))

    def with_ablation(self, name):
        if name not in ABLATIONS:
            raise ConfigError(f"unknown ablation {name!r}; valid names: {', '.join(ABLATIONS)}")
        mode, fr, dln = ABLATIONS[name]
        return dataclasses.replace(
            self, model=self.model.replace(encoding_mode=mode, use_fr=fr, use_dln=dln),
            run=dataclasses.replace(self.run, ablation=name))

    def to_sections(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in self.SECTIONS}

    def to_text(self) -> str:
        return dump_sections(self.to_sections())

    @classmethod
    def from_sections(cls, sections: dict, base=None) -> "RunConfig":
        base = base or cls()
        unknown = set(sections) - set(cls.SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config section(s) {sorted(unknown)}")
        parts = {name: _section_to_dataclass(type(getattr(base, name)), sections.get(name, {}),
                                             getattr(base, name), name)
                 for name in cls.SECTIONS}
        cfg = cls(**parts)
        if cfg.run.ablation:
            cfg = cfg.with_ablation(cfg.run.ablation)
        return cfg

    @classmethod
    def from_text(cls, text, base=None):
        return cls.from_sections(parse_sections(text), base)

    @classmethod
    def load(cls, path, base=None):
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        return cls.from_text(path.read_text(), base)
