"""Layered run configuration: defaults < YAML file < command-line flags.

A config file is YAML with one section per component::

    data:
      synthetic: true
      synthetic_images: 64
    network:
      base_channels: 16
      weight_sharing: shared_D
    train:
      iterations: 1000
      seed: 7
    loss:
      lambda_g: 10.0
    eval:
      n_inputs: 100

Any leaf can be overridden from the command line with ``--set section.key=value``
(the value is parsed as YAML).
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields

import yaml

from .losses import LossWeights
from .networks import NetworkConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    manifest: str | None = None
    synthetic: bool = False
    domains: tuple[str, ...] | None = None
    synthetic_images: int = 64
    # None: follow train.seed
    seed: int | None = None
    split_ratio: float = 0.85
    split_seed: int = 0


@dataclass(frozen=True)
class EvalConfig:
    n_inputs: int = 100
    pairs_per_input: int = 19
    cis_samples: int = 19
    extractor_seed: int = 0
    seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def dump(self) -> str:
        return yaml.safe_dump(_plain(self.to_dict()), sort_keys=False)

    @property
    def data_seed(self) -> int:
        return self.train.seed if self.data.seed is None else self.data.seed


SECTIONS = {"data": DataConfig, "network": NetworkConfig, "train": TrainConfig, "loss": LossWeights,
            "eval": EvalConfig}


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _merge(base: dict, layer: dict, where: str = "") -> None:
    for k, v in layer.items():
        path = f"{where}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {path!r} must be a mapping")
            _merge(base[k], v, path + ".")
        else:
            base[k] = v


def parse_override(text: str) -> dict:
    """``a.b=value`` to ``{"a": {"b": value}}``."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    path, raw = text.split("=", 1)
    try:
        value = yaml.safe_load(raw) if raw != "" else None
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse value of {path!r}: {e}") from None
    return _nested(path.strip(), value)


def _build(section_cls, values: dict, name: str):
    kwargs = {}
    for f in fields(section_cls):
        v = values[f.name]
        kwargs[f.name] = tuple(v) if isinstance(v, list) else v
    try:
        return section_cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {name} config: {e}") from None


def resolve_config(path=None, overrides=(), flags: dict | None = None) -> RunConfig:
    """Merge defaults, an optional YAML file, ``--set`` overrides and explicit flags."""
    merged = copy.deepcopy(RunConfig().to_dict())
    if path is not None:
        try:
            with open(path) as fh:
                doc = yaml.safe_load(fh) or {}
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse config {path}: {e}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"config {path} must be a mapping of sections")
        _merge(merged, doc)
    for text in overrides:
        _merge(merged, parse_override(text))
    for dotted, value in (flags or {}).items():
        if value is not None:
            _merge(merged, _nested(dotted, value))
    return RunConfig(**{name: _build(cls, merged[name], name) for name, cls in SECTIONS.items()})


def _nested(dotted: str, value) -> dict:
    out: dict = {}
    node = out
    parts = dotted.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return out


def config_from_dict(d: dict) -> RunConfig:
    merged = copy.deepcopy(RunConfig().to_dict())
    _merge(merged, d)
    return RunConfig(**{name: _build(cls, merged[name], name) for name, cls in SECTIONS.items()})
