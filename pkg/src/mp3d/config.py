"""Strict JSON experiment configuration.

Every run is described by one JSON file with sections data / backbone /
detector / train / eval / profile. Unknown sections or keys are an error
(silent typos in experiment configs are how results stop being
reproducible). Outputs echo the fully resolved config plus its hash.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

from .data import SyntheticConfig
from .pretrain import PretrainConfig
from .train import ModelSettings, TrainSettings


class ConfigError(Exception):
    pass


_LIST_FIELDS = {"stage_blocks", "stage_channels", "decay_fractions", "augment_scales",
                "lesions_per_volume", "lesion_radius_xy", "lesion_radius_z",
                "confusers_per_volume", "lesion_contrast", "objects_per_image",
                "radius_xy", "contrast", "fp_rates", "slice_counts", "variants"}


def _build(cls, section: dict, name: str):
    known = {f for f in cls.__dataclass_fields__}
    unknown = sorted(set(section) - known)
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {unknown} "
                          f"(known: {sorted(known)})")
    kwargs = {}
    for k, v in section.items():
        if k in _LIST_FIELDS and isinstance(v, list):
            v = tuple(v)
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid [{name}] section: {e}") from e


@dataclass
class EvalSettings:
    iou_thresh: float = 0.5
    score_thresh: float = 0.05
    fp_rates: tuple = (0.5, 1.0, 2.0, 4.0)


@dataclass
class ProfileSettings:
    variants: tuple = ("MP3D63", "MR3D50")
    slice_counts: tuple = (1, 3, 5, 7, 9, 11)
    image_size: int = 512
    flops_per_mac: int = 1


@dataclass
class ExperimentConfig:
    data: SyntheticConfig = field(default_factory=SyntheticConfig)
    backbone: ModelSettings = field(default_factory=ModelSettings)
    train: TrainSettings = field(default_factory=TrainSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)
    profile: ProfileSettings = field(default_factory=ProfileSettings)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)

    _SECTIONS = {"data": SyntheticConfig, "backbone": ModelSettings,
                 "train": TrainSettings, "eval": EvalSettings,
                 "profile": ProfileSettings, "pretrain": PretrainConfig}

    @classmethod
    def from_dict(cls, raw: dict):
        unknown = sorted(set(raw) - set(cls._SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config sections: {unknown} "
                              f"(known: {sorted(cls._SECTIONS)})")
        kwargs = {name: _build(section_cls, raw.get(name, {}), name)
                  for name, section_cls in cls._SECTIONS.items()}
        return cls(**kwargs)

    @classmethod
    def from_json(cls, path):
        with open(path) as f:
            try:
                raw = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"malformed JSON in {path}: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError(f"config root must be a JSON object, got {type(raw).__name__}")
        return cls.from_dict(raw)

    def to_dict(self):
        return {name: asdict(getattr(self, name)) for name in self._SECTIONS}

    def echo_json(self):
        """Fully resolved config (defaults included), canonically ordered."""
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, default=list)

    def digest(self):
        """Short stable hash of the resolved config."""
        canon = json.dumps(self.to_dict(), sort_keys=True, default=list)
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:12]
