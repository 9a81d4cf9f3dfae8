"""Flat key = value run configuration: compiled defaults, then a config file, then flag overrides."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

from .data import read_kv
from .policy import ModelConfig
from .sim import TaskGeometry
from .train import TrainConfig

SECTIONS = ("geometry", "model", "train")


class ConfigError(ValueError):
    """Unknown key or unparsable value; the CLI reports it as a usage error."""


@dataclass(frozen=True)
class RunConfig:
    geometry: TaskGeometry = field(default_factory=TaskGeometry)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_kv(self) -> dict:
        kv = {}
        for name in SECTIONS:
            for k, v in getattr(self, name).to_kv().items():
                kv[f"{name}.{k}"] = v
        return kv

    def dump(self) -> str:
        return "\n".join(f"{k} = {v}" for k, v in self.to_kv().items())

    @classmethod
    def from_kv(cls, kv: dict) -> "RunConfig":
        parts: dict = {name: {} for name in SECTIONS}
        for key, value in kv.items():
            section, _, name = key.partition(".")
            if section not in parts or not name:
                raise ConfigError(f"unknown config key {key!r}")
            parts[section][name] = value
        try:
            geometry = _strict(TaskGeometry, parts["geometry"])
            train = _strict(TrainConfig, parts["train"])
            model_kv = {"variant": train.variant, "chunk": geometry.chunk, **parts["model"]}
            model = _strict(ModelConfig, model_kv)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if model.variant != train.variant:
            raise ConfigError(f"model.variant {model.variant} disagrees with train.variant {train.variant}")
        return cls(geometry, model, train)


def _strict(cls, kv: dict):
    known = cls.__dataclass_fields__
    for key in kv:
        if key not in known:
            raise ConfigError(f"unknown config key {cls.__name__}.{key}")
    return cls.from_kv({k: str(v) for k, v in kv.items()})


def resolve(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then ``path`` (if any), then ``overrides``; None-valued overrides are ignored."""
    kv: dict = {}
    if path:
        kv.update(read_kv(path))
    kv.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return RunConfig.from_kv(kv)


def with_variant(cfg: RunConfig, variant: str) -> RunConfig:
    return replace(cfg, model=replace(cfg.model, variant=variant), train=replace(cfg.train, variant=variant))
