"""Flat key=value experiment configuration with sections.

The format is INI-style: ``[section]`` headers and ``key = value`` lines,
no nesting. Unknown sections or keys are rejected with the section and key
named; parse errors carry line numbers. Command-line flags override file
values, which override defaults.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields

from ..energy_model import ModelConfig
from ..sampler import SamplerConfig
from ..trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class EvalConfig:
    episodes: int = 100
    steps_grid: tuple[int, ...] = (1, 2, 5, 10, 50, 100)
    perturb_levels: tuple[float, ...] = (0.0, 0.1, 0.2, 0.3)
    perturb_step: int = 10
    exec_horizon: int = 4
    max_steps: int = 64
    ddpm_train_steps: int = 100


@dataclass
class ExperimentConfig:
    env: str = "fork"
    seed: int = 0
    outdir: str = "runs/default"
    episodes: int = 200                  # demonstration episodes for gen-data
    dataset: str = ""                    # dataset file; defaults to <outdir>/dataset.bin
    model: ModelConfig = field(default_factory=ModelConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def dataset_path(self) -> str:
        return self.dataset or f"{self.outdir}/dataset.bin"


_SECTIONS = {
    "experiment": ("env", "seed", "outdir", "episodes", "dataset"),
    "model": tuple(f.name for f in fields(ModelConfig)),
    "sampler": tuple(f.name for f in fields(SamplerConfig)),
    "train": tuple(f.name for f in fields(TrainConfig)),
    "eval": tuple(f.name for f in fields(EvalConfig)),
}


def _coerce(raw: str, current):
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected boolean, got {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        kind = type(current[0]) if current else float
        return tuple(kind(p) for p in parts)
    return raw


def parse_config(text: str, path: str = "<config>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=path)
    except configparser.Error as e:
        raise ConfigError(str(e)) from e

    cfg = ExperimentConfig()
    targets = {
        "experiment": cfg, "model": cfg.model, "sampler": cfg.sampler,
        "train": cfg.train, "eval": cfg.eval,
    }
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        target = targets[section]
        for key, raw in parser.items(section):
            if key not in _SECTIONS[section]:
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
            current = getattr(target, key)
            try:
                setattr(target, key, _coerce(raw, current))
            except ValueError as e:
                raise ConfigError(f"{path}: [{section}] {key}: {e}") from e
    _validate(cfg, path)
    return cfg


def _validate(cfg: ExperimentConfig, path: str) -> None:
    if cfg.env not in ("fork", "hang"):
        raise ConfigError(f"{path}: [experiment] env must be fork or hang, got {cfg.env!r}")
    if cfg.episodes < 1:
        raise ConfigError(f"{path}: [experiment] episodes must be >= 1")
    try:
        # re-run dataclass validators against the parsed values
        SamplerConfig(**cfg.sampler.__dict__)
        TrainConfig(**cfg.train.__dict__)
    except ValueError as e:
        raise ConfigError(f"{path}: {e}") from e


def load_config(path: str) -> tuple[ExperimentConfig, str]:
    """Parse a config file; returns the config and its exact text (for hashing)."""
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config(text, path), text


def dump_config(cfg: ExperimentConfig) -> str:
    """Serialize a config back to the flat file format (canonical form)."""
    out = io.StringIO()
    sections = {
        "experiment": {k: getattr(cfg, k) for k in _SECTIONS["experiment"]},
        "model": cfg.model.__dict__,
        "sampler": cfg.sampler.__dict__,
        "train": cfg.train.__dict__,
        "eval": cfg.eval.__dict__,
    }
    for name, kv in sections.items():
        out.write(f"[{name}]\n")
        for k in _SECTIONS[name]:
            v = kv[k]
            if isinstance(v, tuple):
                v = ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
            out.write(f"{k} = {v}\n")
        out.write("\n")
    return out.getvalue()
