"""Experiment configuration: nested dataclasses loaded from a YAML file.

Every section and key is optional; unknown keys are rejected so typos fail
loudly.  See ``DEFAULT_CONFIG_YAML`` for the full schema with defaults.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ParameterError

OUT_ENV = "SSLCIL_OUT"
METHODS = ("ssl_cil", "joint", "finetune")


@dataclass
class GeometryConfig:
    width_m: float = 0.058
    height_m: float = 0.069
    sample_rate: float = 48000.0
    sound_speed: float = 343.0


@dataclass
class SignalConfig:
    duration_s: float = 0.170
    source: str = "white"  # white | speech
    train_snr_db: object = 10.0  # float or "clean"
    test_snr_db: object = 10.0
    noise_train_in_sweep: bool = False


@dataclass
class FeatureConfig:
    tau_range: int = 51
    cache_dir: str = ""


@dataclass
class LabelConfig:
    sigma_deg: float = 8.0
    wrap: bool = True


@dataclass
class SplitConfig:
    num_phases: int = 10
    classes_per_phase: int = 36
    assignment: str = "contiguous"  # contiguous | random
    seed: int = 0  # permutation seed for random assignment, shared by all run seeds
    train_per_class: int = 10
    test_per_class: int = 3


@dataclass
class BackboneConfig:
    hidden: list = field(default_factory=lambda: [512, 512, 512])
    epochs: int = 30
    batch_size: int = 256
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4


@dataclass
class FinetuneConfig:
    epochs: int = 30
    batch_size: int = 256
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4


@dataclass
class AnalyticConfig:
    d_fe: int = 2048
    expansion_seed: int = 0
    eta: float = 0.1
    verify_spd: bool = True


@dataclass
class EvalConfig:
    methods: list = field(default_factory=lambda: list(METHODS))
    snr_list: list = field(default_factory=lambda: [-20.0, -10.0, 0.0, 10.0])
    tolerance_deg: float = 5.0
    n_seeds: int = 3


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = ""
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    signal: SignalConfig = field(default_factory=SignalConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    labels: LabelConfig = field(default_factory=LabelConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    analytic: AnalyticConfig = field(default_factory=AnalyticConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        validate(self)

    @property
    def seeds(self):
        return [self.seed + i for i in range(self.eval.n_seeds)]

    def output_dir(self) -> Path:
        return Path(self.out_dir or os.environ.get(OUT_ENV, "sslcil-out"))

    def to_dict(self):
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "ExperimentConfig":
        """Copy with dotted-path overrides, e.g. ``replace(**{"analytic.eta": 1.0})``."""
        data = self.to_dict()
        for path, value in changes.items():
            node = data
            *parents, leaf = path.split(".")
            for p in parents:
                node = node[p]
            if leaf not in node:
                raise ParameterError(f"unknown config key {path!r}")
            node[leaf] = value
        return from_dict(data)


def validate(cfg: ExperimentConfig):
    s = cfg.split
    if s.num_phases < 1 or s.classes_per_phase < 1 or s.num_phases * s.classes_per_phase > 360:
        raise ParameterError("split must satisfy 1 <= num_phases * classes_per_phase <= 360")
    if s.train_per_class < 1 or s.test_per_class < 0:
        raise ParameterError("train_per_class must be >= 1 and test_per_class >= 0")
    if cfg.features.tau_range < 1 or cfg.features.tau_range % 2 == 0:
        raise ParameterError("tau_range must be a positive odd integer")
    if len(cfg.backbone.hidden) != 3 or min(cfg.backbone.hidden) < 1:
        raise ParameterError("backbone.hidden must list three positive widths")
    if cfg.analytic.d_fe <= cfg.backbone.hidden[-1]:
        raise ParameterError("analytic.d_fe must exceed the backbone output width")
    if not cfg.analytic.eta > 0:
        raise ParameterError("analytic.eta must be positive")
    unknown = set(cfg.eval.methods) - set(METHODS)
    if unknown:
        raise ParameterError(f"unknown methods {sorted(unknown)}; choose from {METHODS}")
    if cfg.eval.n_seeds < 1 or not cfg.eval.tolerance_deg >= 0:
        raise ParameterError("eval.n_seeds must be >= 1 and tolerance_deg >= 0")


def _coerce(value, default, key):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ParameterError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        try:
            as_float = float(value)
        except (TypeError, ValueError):
            as_float = None
        if isinstance(value, bool) or as_float is None or as_float != int(as_float):
            raise ParameterError(f"{key}: expected an integer, got {value!r}")
        return int(as_float)
    if isinstance(default, float):
        if isinstance(value, str) and value.lower() == "clean":
            return "clean"
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ParameterError(f"{key}: expected a number, got {value!r}") from None
    if isinstance(default, list):
        if not isinstance(value, (list, tuple)):
            raise ParameterError(f"{key}: expected a list, got {value!r}")
        if default and isinstance(default[0], (int, float)) and not isinstance(default[0], bool):
            return [_coerce(v, default[0], key) for v in value]
        return list(value)
    if isinstance(default, str):
        return str(value)
    return value


def _build(cls, data, prefix):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ParameterError(f"{prefix or 'config'}: expected a mapping")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ParameterError(f"unknown config keys under {prefix or 'top level'}: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        key = f"{prefix}{name}"
        f = names[name]
        if f.default is not dataclasses.MISSING:
            default = f.default
        else:
            default = f.default_factory()
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, key + ".")
        else:
            kwargs[name] = _coerce(value, default, key)
    return cls(**kwargs)


def from_dict(data) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "")


def load_config(path=None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ParameterError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ParameterError(f"config {path} is not valid YAML: {exc}") from exc
    return from_dict(data or {})


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


DEFAULT_CONFIG_YAML = dump_config(ExperimentConfig())
