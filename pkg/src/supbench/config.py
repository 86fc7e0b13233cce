"""INI-style experiment configuration.

```
[general]
seed = 0
runs = 3
backbone = reduced

[classifier]
epochs = 10
learning_rate = 0.0001
```

Method sections override the per-backbone training defaults. For the VAE,
``reconstruction_weight`` is ``w`` in ``w * MSE + (1 - w) * KL``.
"""
from __future__ import annotations

import configparser
import difflib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .experiments import ABLATION_FRACTIONS, METHODS
from .models.base import TrainConfig
from .pipeline import default_config


class ConfigError(ValueError):
    pass


@dataclass
class GeneralConfig:
    seed: int = 0
    runs: int = 3
    workers: int = 1
    backbone: str = "reduced"
    data: str = "synth"
    cam_method: str = "gradcam"
    save_masks: bool = False


@dataclass
class AblationConfig:
    fractions: tuple = ABLATION_FRACTIONS
    methods: tuple = METHODS


@dataclass
class SearchConfig:
    budget: int = 20


@dataclass
class SynthConfig:
    n_scenes: int = 40
    scene_size: int = 1000
    panel_density: float = 12.0
    distractor_density: float = 6.0


METHOD_KEYS = tuple(f.name for f in fields(TrainConfig) if f.name != "rng_seed")
SECTIONS = {"general": GeneralConfig, "ablation": AblationConfig, "search": SearchConfig, "synth": SynthConfig}


@dataclass
class ExperimentConfig:
    general: GeneralConfig = field(default_factory=GeneralConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    overrides: dict[str, dict] = field(default_factory=lambda: {m: {} for m in METHODS})

    def train_config(self, method: str, run_seed: int | None = None) -> TrainConfig:
        cfg = replace(default_config(method, self.general.backbone), **self.overrides.get(method, {}))
        if run_seed is not None:
            cfg = replace(cfg, rng_seed=run_seed)
        return cfg.validate()


def _suggest(key: str, options) -> str:
    close = difflib.get_close_matches(key, list(options), n=1)
    return f"; did you mean {close[0]!r}?" if close else ""


def _convert(section: str, key: str, raw: str, like):
    where = f"[{section}] {key}"
    text = raw.strip()
    try:
        if isinstance(like, bool):
            if text.lower() in ("true", "yes", "1", "on"):
                return True
            if text.lower() in ("false", "no", "0", "off"):
                return False
            raise ValueError
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
        if isinstance(like, tuple):
            items = [s.strip() for s in text.split(",") if s.strip()]
            if like and isinstance(like[0], float):
                return tuple(float(s) for s in items)
            return tuple(items)
        return text
    except ValueError:
        kind = "bool" if isinstance(like, bool) else ("list" if isinstance(like, tuple) else type(like).__name__)
        raise ConfigError(f"{where}: expected {kind}, got {raw!r}") from None


def parse_config_text(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="\0none")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.MissingSectionHeaderError:
        raise ConfigError("settings must sit under a [section] header") from None
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    cfg = ExperimentConfig()
    known = list(SECTIONS) + list(METHODS)
    for section in parser.sections():
        if section not in known:
            raise ConfigError(f"unknown section [{section}]{_suggest(section, known)}")
        for key, raw in parser.items(section):
            if section in METHODS:
                if key not in METHOD_KEYS:
                    raise ConfigError(f"unknown key {key!r} in [{section}]{_suggest(key, METHOD_KEYS)}")
                like = getattr(TrainConfig(), key)
                cfg.overrides[section][key] = _convert(section, key, raw, like)
            else:
                block = getattr(cfg, section)
                names = [f.name for f in fields(block)]
                if key not in names:
                    raise ConfigError(f"unknown key {key!r} in [{section}]{_suggest(key, names)}")
                setattr(block, key, _convert(section, key, raw, getattr(block, key)))
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    g = cfg.general
    if g.backbone not in ("reduced", "resnet50"):
        raise ConfigError(f"[general] backbone: expected 'reduced' or 'resnet50', got {g.backbone!r}")
    if g.data not in ("real", "synth"):
        raise ConfigError(f"[general] data: expected 'real' or 'synth', got {g.data!r}")
    if g.runs < 1 or g.workers < 1:
        raise ConfigError("[general] runs and workers must be >= 1")
    unknown = set(cfg.ablation.methods) - set(METHODS)
    if unknown:
        raise ConfigError(f"[ablation] methods: unknown {sorted(unknown)}")
    for m in METHODS:
        try:
            cfg.train_config(m)
        except ValueError as exc:
            raise ConfigError(f"[{m}] {exc}") from None


def parse_config(path: str | Path) -> ExperimentConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(repr(x) if isinstance(x, float) else str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def serialize_config(cfg: ExperimentConfig) -> str:
    lines = []
    for name in SECTIONS:
        block = getattr(cfg, name)
        lines.append(f"[{name}]")
        lines += [f"{f.name} = {_fmt(getattr(block, f.name))}" for f in fields(block)]
        lines.append("")
    for m in METHODS:
        lines.append(f"[{m}]")
        lines += [f"{k} = {_fmt(v)}" for k, v in cfg.overrides[m].items()]
        lines.append("")
    return "\n".join(lines)
