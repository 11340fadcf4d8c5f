"""INI-style experiment configuration with ``section.key=value`` overrides.

Sections: ``[synth]``, ``[model]``, ``[train]``, ``[cbce]``, ``[rmi]``.
Unknown sections or keys are rejected.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .losses import CBCEConfig, RMIConfig
from .model import ModelConfig
from .synth import SynthParams
from .textconf import dump_sections, from_mapping, parse_sections, to_mapping
from .trainer import TrainConfig


SECTIONS = {
    "synth": SynthParams,
    "model": ModelConfig,
    "train": TrainConfig,
    "cbce": CBCEConfig,
    "rmi": RMIConfig,
}


@dataclass
class ExperimentConfig:
    synth: SynthParams = field(default_factory=SynthParams)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    cbce: CBCEConfig = field(default_factory=CBCEConfig)
    rmi: RMIConfig = field(default_factory=RMIConfig)

    def to_text(self) -> str:
        return dump_sections({name: to_mapping(getattr(self, name)) for name in SECTIONS})

    def apply(self, sections: dict[str, dict[str, str]]) -> "ExperimentConfig":
        updated = ExperimentConfig(**{n: getattr(self, n) for n in SECTIONS})
        for name, mapping in sections.items():
            if name not in SECTIONS:
                raise KeyError(f"unknown config section [{name}]")
            setattr(updated, name, from_mapping(SECTIONS[name], mapping, getattr(updated, name)))
        return updated


def parse_overrides(items) -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {}
    for item in items:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form section.key=value")
        key, value = item.split("=", 1)
        if "." not in key:
            raise ValueError(f"override key {key!r} must be section.key")
        section, name = key.strip().split(".", 1)
        out.setdefault(section, {})[name] = value
    return out


def load_config(path=None, overrides=()) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is not None:
        with open(path) as fh:
            cfg = cfg.apply(parse_sections(fh.read()))
    return cfg.apply(parse_overrides(overrides))
