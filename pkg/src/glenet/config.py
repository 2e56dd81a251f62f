"""One structured configuration document for the whole pipeline.

A run is described by a single YAML file with one block per component
(synthesis, training, voting, the loss-mode regressor) plus the global
seed.  Loading is strict: unknown keys anywhere are rejected, and every
value is type-checked against the corresponding dataclass field.  Dumping
always writes every field explicitly, so a dumped default document is the
complete, authoritative list of knobs.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field

import yaml

from .errors import ConfigError
from .model import TrainConfig
from .postproc import VotingConfig
from .synth import SynthConfig

__all__ = ["ToyBlock", "RunConfig", "load_config", "dump_config", "config_from_text"]


@dataclass(frozen=True)
class ToyBlock:
    """File-configurable settings of the loss-mode regressor (mode is a flag)."""

    epochs: int = 25
    batch_size: int = 32
    peak_lr: float = 3e-3
    dir_weight: float = 0.2
    eval_folds: int = 5


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    synth: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    voting: VotingConfig = field(default_factory=VotingConfig)
    toy: ToyBlock = field(default_factory=ToyBlock)

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, seed=int(seed),
                                   train=dataclasses.replace(self.train, seed=int(seed)))


_SECTIONS = {"synth": SynthConfig, "train": TrainConfig, "voting": VotingConfig, "toy": ToyBlock}


def _coerce(value, hint, path: str):
    origin = typing.get_origin(hint)
    if origin is tuple:
        args = typing.get_args(hint)
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a {len(args)}-element sequence, got {value!r}")
        if len(value) != len(args):
            raise ConfigError(f"{path}: expected {len(args)} elements, got {len(value)}")
        return tuple(_coerce(v, a, f"{path}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported config field type {hint!r}")


def _build_section(cls, data, path: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = [f.name for f in dataclasses.fields(cls)]
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {unknown}; valid keys are {sorted(names)}")
    kwargs = {k: _coerce(v, hints[k], f"{path}.{k}") for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (ConfigError, ValueError) as exc:  # sections validate their own domains
        raise ConfigError(f"{path}: {exc}") from exc


def config_from_text(text: str) -> RunConfig:
    """Parse a YAML document into a RunConfig, strictly."""
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"config root must be a mapping, got {type(data).__name__}")
    unknown = sorted(set(data) - ({"seed"} | set(_SECTIONS)))
    if unknown:
        raise ConfigError(
            f"unknown top-level key(s) {unknown}; valid keys are "
            f"{sorted(['seed', *_SECTIONS])}")
    seed = _coerce(data.get("seed", 0), int, "seed")
    sections = {name: _build_section(cls, data.get(name), name)
                for name, cls in _SECTIONS.items()}
    # The top-level seed governs the whole run; the train section keeps its
    # own only when set explicitly.
    train_block = data.get("train") or {}
    if "seed" not in train_block:
        sections["train"] = dataclasses.replace(sections["train"], seed=seed)
    return RunConfig(seed=seed, **sections)


def load_config(path: str) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_text(text)


def dump_config(config: RunConfig) -> str:
    """The full document, every field explicit, deterministically ordered."""
    doc = {"seed": config.seed}
    for name in _SECTIONS:
        block = dataclasses.asdict(getattr(config, name))
        doc[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in block.items()}
    return yaml.safe_dump(doc, sort_keys=True, default_flow_style=False)
