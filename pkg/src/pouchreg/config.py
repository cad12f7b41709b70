"""JSON run configuration with one section per stage."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .boundary import RefineConfig
from .nonrigid import EnergyConfig
from .rigid import RigidConfig
from .synth import SynthSpec


@dataclass(frozen=True)
class PipelineOptions:
    refine_masks: bool = False
    # non-rigid levels restart from zero every frame unless this is set
    warm_start_nonrigid: bool = False
    write_overlays: bool = True


@dataclass(frozen=True)
class Config:
    rigid: RigidConfig = field(default_factory=RigidConfig)
    nonrigid: EnergyConfig = field(default_factory=EnergyConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)
    pipeline: PipelineOptions = field(default_factory=PipelineOptions)

    def to_dict(self) -> dict:
        return {
            "rigid": self.rigid.to_dict(),
            "nonrigid": self.nonrigid.to_dict(),
            "refine": self.refine.to_dict(),
            "synth": self.synth.to_dict(),
            "pipeline": asdict(self.pipeline),
        }


_SECTIONS = {
    "rigid": RigidConfig,
    "nonrigid": EnergyConfig,
    "refine": RefineConfig,
    "synth": SynthSpec,
    "pipeline": PipelineOptions,
}


def config_from_dict(d: dict) -> Config:
    unknown = set(d) - set(_SECTIONS)
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    try:
        return Config(**{name: cls(**d[name]) for name, cls in _SECTIONS.items() if name in d})
    except TypeError as exc:
        raise ValueError(f"bad config field: {exc}") from exc


def load_config(path=None) -> Config:
    if path is None:
        return Config()
    return config_from_dict(json.loads(Path(path).read_text()))
