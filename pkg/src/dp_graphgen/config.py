"""Experiment configuration: INI-style ``key = value`` sections with typed defaults.

Sections are ``[experiment]``, ``[model]``, ``[gan]`` and ``[dp]``. Overrides use
dotted keys (``gan.batch_size=128``). The fully resolved configuration can be
written back out so every output directory records exactly what was run.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

from .model import ModelConfig
from .training import DpConfig, GanConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelParams:
    """Architecture hyperparameters; ``num_nodes`` and sequence length come from the data and mode."""

    noise_dim: int = 16
    hidden_dim: int = 40
    down_projection_dim: int = 64
    temperature: float = 1.0


@dataclass(frozen=True)
class ExperimentParams:
    dataset: str = ""
    mode: str = "edge"
    walk_length: int = 2
    sample_volume: int = 400_000
    val_fraction: float = 0.15
    seed: int = 0
    label: str = ""
    output_dir: str = ""


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: ExperimentParams = field(default_factory=ExperimentParams)
    model: ModelParams = field(default_factory=ModelParams)
    gan: GanConfig = field(default_factory=GanConfig)
    dp: DpConfig = field(default_factory=DpConfig)

    def __post_init__(self):
        e = self.experiment
        if e.mode not in ("edge", "walk"):
            raise ConfigError(f"experiment.mode must be edge or walk, got {e.mode!r}")
        if e.mode == "walk" and e.walk_length < 2:
            raise ConfigError("experiment.walk_length must be >= 2")
        if e.sample_volume < 0:
            raise ConfigError("experiment.sample_volume must be >= 0")
        if not 0 <= e.val_fraction < 1:
            raise ConfigError("experiment.val_fraction must lie in [0, 1); 0 disables validation")

    @property
    def sequence_length(self) -> int:
        return 2 if self.experiment.mode == "edge" else self.experiment.walk_length

    def model_config(self, num_nodes: int) -> ModelConfig:
        return ModelConfig(num_nodes=num_nodes, sequence_length=self.sequence_length,
                           **dataclasses.asdict(self.model))

    def replace(self, **overrides) -> "ExperimentConfig":
        """Return a copy with dotted-key overrides applied, e.g. ``replace(**{"dp.noise_scale": 2})``."""
        return apply_overrides(self, {k: str(v) for k, v in overrides.items()})

    def to_ini(self) -> str:
        lines = []
        for section in SECTIONS:
            lines.append(f"[{section}]")
            obj = getattr(self, section)
            for f in fields(obj):
                lines.append(f"{f.name} = {_format(getattr(obj, f.name))}")
            lines.append("")
        return "\n".join(lines)

    def digest(self) -> str:
        """SHA-256 of the resolved config, ignoring where outputs are written."""
        text = self.replace(**{"experiment.output_dir": ""}).to_ini()
        return hashlib.sha256(text.encode()).hexdigest()


SECTIONS = ("experiment", "model", "gan", "dp")


def _format(value) -> str:
    if isinstance(value, float) and math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return str(value)


def _parse(text: str, kind, where: str):
    try:
        if kind is bool:
            lowered = text.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text.strip()
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {text!r} as {kind.__name__}") from None


_KINDS = {"int": int, "float": float, "bool": bool, "str": str}


def _field_kind(f) -> type:
    return _KINDS[str(f.type).split("|")[0].strip()]


def apply_overrides(cfg: ExperimentConfig, values: dict[str, str]) -> ExperimentConfig:
    grouped: dict[str, dict] = {s: {} for s in SECTIONS}
    for key, raw in values.items():
        section, _, name = key.partition(".")
        if section not in grouped or not name:
            raise ConfigError(f"unknown config key {key!r}")
        obj = getattr(cfg, section)
        known = {f.name: f for f in fields(obj)}
        if name not in known:
            raise ConfigError(f"unknown config key {key!r}")
        grouped[section][name] = _parse(raw, _field_kind(known[name]), key)
    try:
        parts = {s: dataclasses.replace(getattr(cfg, s), **grouped[s]) for s in SECTIONS}
        return ExperimentConfig(**parts)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    values = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        for name, raw in parser.items(section):
            values[f"{section}.{name}"] = raw
    return apply_overrides(base or ExperimentConfig(), values)


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text)


def parse_assignment(item: str) -> tuple[str, str]:
    key, sep, value = item.partition("=")
    if not sep:
        raise ConfigError(f"override {item!r} is not of the form section.key=value")
    return key.strip(), value.strip()
