"""Run configuration: defaults, INI-style files and command-line overrides.

File format is flat ``key = value`` lines under the sections ``[data]``,
``[model]``, ``[train]`` and ``[distill]``.  Precedence is flags over file
over defaults.  Unknown keys and badly typed values are rejected by name.
"""
from __future__ import annotations

import configparser
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

from .distill import COMPONENTS, DistillConfig

MODES = ("train_teacher", "distill", "eval", "few_shot", "zero_shot")
PROFILES = ("full", "tiny")


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    # a CSV path, or "synth:<kind>" for generated data
    source: str = "synth:sine_mix"
    has_header: bool = True
    timestamp_column: int = -1  # -1: none
    synth_length: int = 4000
    synth_channels: int = 3
    synth_noise: float = 0.1
    synth_seed: int = 0
    periodicity: int = 24
    seq_len: int = 512
    pred_len: int = 96
    norm_const: float = 0.4
    train_frac: float = 0.7
    val_frac: float = 0.1
    test_frac: float = 0.2
    few_shot: float = 1.0
    # zero-shot target, same syntax as ``source``
    target: str = ""
    target_periodicity: int = 0
    target_synth_seed: int = 0


@dataclass
class ModelSection:
    profile: str = "tiny"
    dropout: float = 0.1


@dataclass
class TrainConfig:
    mode: str = "train_teacher"
    seed: int = 0
    batch_size: int = 32
    learning_rate: float = 1e-3
    train_epochs: int = 10
    patience: int = 5
    weight_decay: float = 1e-4
    # cap on optimizer steps per epoch; 0 means every full batch
    max_steps_per_epoch: int = 0
    out_dir: str = "runs/default"
    checkpoint: str = ""


@dataclass
class DistillSection:
    kd: bool = True
    n_scales: int = 3
    align_dropout: float = 0.1
    gamma: float = 0.001
    momentum: float = 0.9
    warmup: int = 10
    lambda_distill: float = 1.0
    lambda_mse: float = 1.0
    lambda_cos: float = 1.0
    lambda_kl: float = 1.0
    lr_ratio: float = 0.1
    tau_init: float = 4.0
    init_weights: str = "0.01,1.0,0.5,0.01"
    conv_window: int = 10
    conv_eps: float = 1e-4
    # e.g. "fd=0,cd=0"
    fixed_weights: str = ""

    def to_engine(self) -> DistillConfig:
        return DistillConfig(
            n_scales=self.n_scales, align_dropout=self.align_dropout, gamma=self.gamma,
            momentum=self.momentum, warmup=self.warmup, lambda_distill=self.lambda_distill,
            lambda_mse=self.lambda_mse, lambda_cos=self.lambda_cos, lambda_kl=self.lambda_kl,
            lr_ratio=self.lr_ratio, tau_init=self.tau_init,
            init_weights=tuple(float(v) for v in self.init_weights.split(",")),
            conv_window=self.conv_window, conv_eps=self.conv_eps,
            fixed_weights=parse_fixed(self.fixed_weights),
        )


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    distill: DistillSection = field(default_factory=DistillSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def validate(self) -> "RunConfig":
        validate(self)
        return self


SECTIONS = {"data": DataConfig, "model": ModelSection, "train": TrainConfig, "distill": DistillSection}

# fields allowed to be zero or negative
_NON_POSITIVE_OK = {
    "timestamp_column", "synth_noise", "synth_seed", "target_periodicity", "target_synth_seed", "seed",
    "dropout", "align_dropout", "gamma", "momentum", "warmup", "max_steps_per_epoch", "tau_init",
    "lambda_mse", "lambda_cos", "lambda_kl", "weight_decay",
}


def parse_fixed(text: str) -> Dict[str, float]:
    out = {}
    for item in filter(None, (t.strip() for t in text.split(","))):
        if "=" not in item:
            raise ConfigError(f"fixed_weights entry '{item}' must look like name=value")
        k, v = (s.strip() for s in item.split("=", 1))
        if k not in COMPONENTS:
            raise ConfigError(f"fixed_weights: unknown component '{k}' (choose from {', '.join(COMPONENTS)})")
        out[k] = _coerce(float, v, f"fixed_weights.{k}")
    return out


def _coerce(typ, raw, name: str):
    if isinstance(raw, typ) and not (typ is int and isinstance(raw, bool)):
        return raw
    text = str(raw).strip()
    try:
        if typ is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"'{name}': expected {typ.__name__}, got {text!r}") from None


def _field_types(cls) -> Dict[str, type]:
    return {f.name: {"int": int, "float": float, "bool": bool, "str": str}[f.type if isinstance(f.type, str)
                                                                         else f.type.__name__]
            for f in dataclasses.fields(cls)}


def _apply(cfg: RunConfig, section: str, key: str, raw) -> None:
    if section not in SECTIONS:
        raise ConfigError(f"unknown section '[{section}]'")
    types = _field_types(SECTIONS[section])
    if key not in types:
        raise ConfigError(f"unknown key '{key}' in section [{section}]")
    setattr(getattr(cfg, section), key, _coerce(types[key], raw, f"{section}.{key}"))


def flag_index() -> Dict[str, tuple]:
    """kebab-case flag name -> (section, field)."""
    out = {}
    for sec, cls in SECTIONS.items():
        for f in dataclasses.fields(cls):
            out[f.name.replace("_", "-")] = (sec, f.name)
    return out


def validate(cfg: RunConfig) -> None:
    for sec, cls in SECTIONS.items():
        obj = getattr(cfg, sec)
        for f in dataclasses.fields(cls):
            v = getattr(obj, f.name)
            if isinstance(v, (int, float)) and not isinstance(v, bool):
                if f.name in _NON_POSITIVE_OK:
                    continue
                if not v > 0:
                    raise ConfigError(f"'{sec}.{f.name}' must be positive, got {v}")
    t, d = cfg.train, cfg.data
    if t.mode not in MODES:
        raise ConfigError(f"'train.mode' must be one of {', '.join(MODES)}, got '{t.mode}'")
    if cfg.model.profile not in PROFILES:
        raise ConfigError(f"'model.profile' must be one of {', '.join(PROFILES)}")
    if not 0 < d.few_shot <= 1:
        raise ConfigError("'data.few_shot' must lie in (0, 1]")
    if t.mode == "zero_shot" and not d.target:
        raise ConfigError("mode zero_shot requires 'data.target'")
    if t.mode in ("eval", "zero_shot") and not t.checkpoint:
        raise ConfigError(f"mode {t.mode} requires 'train.checkpoint'")
    if len(cfg.distill.init_weights.split(",")) != len(COMPONENTS):
        raise ConfigError("'distill.init_weights' needs four comma-separated values")
    parse_fixed(cfg.distill.fixed_weights)


def load_config(path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None,
                check: bool = True) -> RunConfig:
    """Defaults, then the file at ``path``, then ``overrides``.

    ``overrides`` maps either "section.key" or a kebab-case flag name to a value.
    """
    cfg = RunConfig()
    if path:
        text = Path(path).read_text()
        parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
        parser.optionxform = str
        try:
            parser.read_string(text, source=str(path))
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for section in parser.sections():
            for key, raw in parser.items(section):
                _apply(cfg, section, key, raw)
    flags = flag_index()
    for name, raw in (overrides or {}).items():
        if "." in name:
            sec, key = name.split(".", 1)
        elif name in flags:
            sec, key = flags[name]
        else:
            raise ConfigError(f"unknown option '{name}'")
        _apply(cfg, sec, key, raw)
    if check:
        validate(cfg)
    return cfg
