"""JSON run configuration with defaults, strict keys and validation."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .nets import NetConfig
from .pipeline import PipelineConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


class ParseError(ConfigError):
    pass


class UnknownKey(ConfigError):
    pass


class InvariantViolation(ConfigError):
    pass


@dataclass
class Paths:
    data_dir: str = ""
    coarse_ckpt: str = ""
    fine_ckpt: str = ""


@dataclass
class PhantomSet:
    n_train: int = 24
    n_test: int = 8
    base_seed: int = 1000
    dims: tuple[int, int, int] = (96, 96, 64)
    regimes: tuple[str, ...] = ("TypeA", "TypeB", "TypeC")

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.regimes = tuple(self.regimes)
        if self.n_train < 1 or self.n_test < 0:
            raise ValueError("n_train must be >= 1 and n_test >= 0")


def _fine_default():
    return NetConfig(input_dims=(48, 48, 48))


@dataclass
class RunConfig:
    paths: Paths = field(default_factory=Paths)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    coarse_net: NetConfig = field(default_factory=NetConfig)
    fine_net: NetConfig = field(default_factory=_fine_default)
    training: TrainConfig = field(default_factory=TrainConfig)
    phantoms: PhantomSet = field(default_factory=PhantomSet)

    def validate(self) -> "RunConfig":
        if self.coarse_net.input_dims != self.pipeline.coarse_input_dims:
            raise InvariantViolation("coarse_net.input_dims must equal pipeline.coarse_input_dims")
        if self.fine_net.input_dims != self.pipeline.base_dims:
            raise InvariantViolation("fine_net.input_dims must equal pipeline.fine_dims[0]")
        return self


SECTIONS = {f.name: f for f in fields(RunConfig)}
SECTION_TYPES = {
    "paths": Paths,
    "pipeline": PipelineConfig,
    "coarse_net": NetConfig,
    "fine_net": NetConfig,
    "training": TrainConfig,
    "phantoms": PhantomSet,
}


def _section_to_dict(obj) -> dict:
    if hasattr(obj, "to_dict"):
        return obj.to_dict()
    out = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def dump_config(cfg: RunConfig) -> dict:
    return {name: _section_to_dict(getattr(cfg, name)) for name in SECTIONS}


def dumps_config(cfg: RunConfig) -> str:
    return json.dumps(dump_config(cfg), indent=2, sort_keys=True)


def _build_section(name, values, base):
    cls = SECTION_TYPES[name]
    if not isinstance(values, dict):
        raise ParseError(f"section {name!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise UnknownKey(f"unknown key(s) in {name!r}: {', '.join(unknown)}")
    merged = _section_to_dict(base)
    merged.update(values)
    if name == "pipeline":
        merged["fine_dims"] = [tuple(d) for d in merged["fine_dims"]]
    if cls is NetConfig and "levels" in values and "supervision_weights" not in values:
        merged["supervision_weights"] = None  # re-derive for the new depth
    try:
        return cls(**merged)
    except (TypeError, ValueError) as e:
        raise InvariantViolation(f"{name}: {e}") from e


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ParseError("configuration must be a JSON object")
    unknown = sorted(set(data) - set(SECTIONS))
    if unknown:
        raise UnknownKey(f"unknown section(s): {', '.join(unknown)}")
    defaults = RunConfig()
    kwargs = {
        name: _build_section(name, data[name], getattr(defaults, name)) if name in data else getattr(defaults, name)
        for name in SECTIONS
    }
    return RunConfig(**kwargs).validate()


def parse_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ParseError(f"cannot read config {path}: {e}") from e
    if not text.strip():
        return RunConfig()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: {e}") from e
    return config_from_dict(data)
