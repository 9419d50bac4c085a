"""Run configuration: INI-style sections, dotted command-line overrides, derived seeds."""

from __future__ import annotations

import configparser
import dataclasses
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .encoder import EncoderConfig
from .sae import SaeConfig
from .steer import SteeringConfig

# independent randomness streams derived from the global seed
STREAMS = {"encoder": 1, "sae": 2, "synth": 3, "baselines": 4, "subsample": 5}


class ConfigError(ValueError):
    pass


def derive_seed(global_seed: int, stream: str) -> int:
    return int(np.random.SeedSequence(global_seed, spawn_key=(STREAMS[stream],)).generate_state(1)[0])


@dataclass
class DataSection:
    path: str = ""
    format: str = "tsv"
    user_min: int = 5
    item_min: int = 5
    head_frac: float = 0.1
    tail_frac: float = 0.1
    user_fraction: float = 1.0


@dataclass
class SynthSection:
    n_prime: int = 409_600
    epoch_size: int = 2048
    seq_len: int = 0  # 0: use the encoder's max_seq_len


@dataclass
class GridSection:
    alpha_pop: list = field(default_factory=lambda: [1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5, 5.0])
    alpha_unpop: list = field(default_factory=lambda: [1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5, 5.0])
    beta: list = field(default_factory=lambda: [0.0, 0.5, 1.0, 1.5, 2.0])
    ablation_beta: list = field(default_factory=lambda: [0.5, 1.0, 1.5])
    # noise std as multiples of the median real-user activation std
    xi_scale: list = field(default_factory=lambda: [0.1, 0.25, 0.5, 1.0, 2.0, 4.0])
    random_t: list = field(default_factory=lambda: [15, 30, 50, 75, 100])
    ipr_alpha: list = field(default_factory=lambda: [0.01, 0.05, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0])
    ipr_t: int = 250
    k_prime: int = 20
    ndcg_budget: float = 0.10


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    sae: SaeConfig = field(default_factory=SaeConfig)
    synth: SynthSection = field(default_factory=SynthSection)
    steer: SteeringConfig = field(default_factory=SteeringConfig)
    grid: GridSection = field(default_factory=GridSection)
    k: int = 10
    seed: int = 0
    out: str = ""

    @property
    def out_dir(self) -> Path:
        return Path(self.out or os.environ.get("POPSTEER_OUT", "runs"))

    @property
    def synth_len(self) -> int:
        return self.synth.seq_len or self.encoder.max_seq_len

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = ("data", "encoder", "sae", "synth", "steer", "grid")


def _coerce(value: str, current):
    if isinstance(current, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(current, list):
        text = value.strip()
        if text.startswith("["):
            return json.loads(text)
        return [float(v) if "." in v or "e" in v.lower() else int(v) for v in text.replace(",", " ").split()]
    if isinstance(current, int) and not isinstance(current, bool):
        return int(float(value))
    if isinstance(current, float):
        return float(value)
    if current is None:
        return None if value.strip().lower() in ("", "none") else int(value)
    return value


def _apply(cfg: RunConfig, key: str, value: str, explicit: set) -> RunConfig:
    section, _, name = key.partition(".")
    if not name:
        if section not in {f.name for f in fields(RunConfig)} or section in _SECTIONS:
            raise ConfigError(f"unknown top-level key {key!r}")
        return dataclasses.replace(cfg, **{section: _coerce(value, getattr(cfg, section))})
    if section not in _SECTIONS:
        raise ConfigError(f"unknown section {section!r}")
    sub = getattr(cfg, section)
    if name not in {f.name for f in fields(sub)}:
        raise ConfigError(f"unknown key {name!r} in section [{section}]")
    try:
        new = dataclasses.replace(sub, **{name: _coerce(value, getattr(sub, name))})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from None
    explicit.add(key)
    return dataclasses.replace(cfg, **{section: new})


def load_config(path: str | None = None, overrides: list[str] = ()) -> RunConfig:
    """Defaults, then the config file, then ``section.key=value`` overrides (flags win)."""
    cfg = RunConfig()
    explicit: set = set()
    if path:
        if not Path(path).exists():
            raise FileNotFoundError(path)
        parser = configparser.ConfigParser()
        parser.optionxform = str
        parser.read(path)
        for key, value in parser.defaults().items():
            cfg = _apply(cfg, key, value, explicit)
        for section in parser.sections():
            for key, value in parser.items(section, raw=True):
                if key in parser.defaults():
                    continue
                cfg = _apply(cfg, f"{section}.{key}" if section != "run" else key, value, explicit)
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        cfg = _apply(cfg, key.strip(), value.strip(), explicit)
    # sub-seeds come from the global seed unless pinned explicitly
    if "encoder.seed" not in explicit:
        cfg = dataclasses.replace(cfg, encoder=dataclasses.replace(cfg.encoder, seed=derive_seed(cfg.seed, "encoder")))
    if "sae.seed" not in explicit:
        cfg = dataclasses.replace(cfg, sae=dataclasses.replace(cfg.sae, seed=derive_seed(cfg.seed, "sae")))
    if cfg.sae.input_dim != cfg.encoder.hidden_size:
        cfg = dataclasses.replace(cfg, sae=dataclasses.replace(cfg.sae, input_dim=cfg.encoder.hidden_size))
    try:
        cfg.encoder.validate()
        cfg.sae.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg
