"""Hierarchical run configuration (YAML); unknown keys are rejected."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

import yaml

from ..distill import DistillConfig
from ..postprocess import CrfParams, PostprocessConfig, TtaConfig
from ..refine import LossWeights, ThresholdConfig


class ConfigError(ValueError):
    pass


@dataclass
class TrainSection:
    epochs: int = 2
    learning_rate: float = 2e-5
    weight_decay: float = 1e-3
    batch_size: int = 10
    seed: int = 0
    backend: str = "toy"
    grad_clip: float = 5.0
    image_size: int = 224

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("train.epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("train.learning_rate must be > 0")
        if self.weight_decay < 0 or self.grad_clip <= 0:
            raise ConfigError("train.weight_decay must be >= 0 and train.grad_clip > 0")


@dataclass
class DistillSection:
    layers: list = field(default_factory=lambda: [2])
    weight: float = 1.5


@dataclass
class ProtoSection:
    n_ratio: int = 4
    logit_scale_init: float = 1 / 0.07
    prompts: Optional[str] = None

    def __post_init__(self):
        if self.n_ratio < 1:
            raise ConfigError("proto.n_ratio must be >= 1")
        if not 1.0 <= self.logit_scale_init <= 100.0:
            raise ConfigError("proto.logit_scale_init must lie in [1, 100]")


@dataclass
class RefineSection:
    alpha: float = 0.5
    temperature: float = 0.07
    bank_capacity: int = 2048

    def __post_init__(self):
        if self.temperature <= 0 or self.bank_capacity < 1:
            raise ConfigError("refine.temperature must be > 0 and refine.bank_capacity >= 1")


@dataclass
class LossSection:
    cls: float = 1.0
    struct: float = 1.5
    sim: float = 0.2


@dataclass
class CrfSection:
    w1: float = 30.0
    w2: float = 50.0
    sa: float = 15.0
    sb: float = 10.0
    sg: float = 20.0
    iters: int = 5
    enabled: bool = True


@dataclass
class TtaSection:
    enabled: bool = True


@dataclass
class PostSection:
    bg_exponent: float = 10.0


SECTIONS = {"train": TrainSection, "distill": DistillSection, "proto": ProtoSection,
            "refine": RefineSection, "loss": LossSection, "crf": CrfSection, "tta": TtaSection,
            "post": PostSection}


@dataclass
class Config:
    train: TrainSection = field(default_factory=TrainSection)
    distill: DistillSection = field(default_factory=DistillSection)
    proto: ProtoSection = field(default_factory=ProtoSection)
    refine: RefineSection = field(default_factory=RefineSection)
    loss: LossSection = field(default_factory=LossSection)
    crf: CrfSection = field(default_factory=CrfSection)
    tta: TtaSection = field(default_factory=TtaSection)
    post: PostSection = field(default_factory=PostSection)

    # typed views used by the library modules
    def distill_config(self) -> DistillConfig:
        return DistillConfig(layers=tuple(self.distill.layers), weight=self.distill.weight)

    def threshold_config(self) -> ThresholdConfig:
        return ThresholdConfig(alpha=self.refine.alpha)

    def loss_weights(self) -> LossWeights:
        # distill.weight is the struct coefficient; loss.struct mirrors it (see from_dict)
        return LossWeights(cls=self.loss.cls, struct=self.distill.weight, sim=self.loss.sim)

    def crf_params(self) -> CrfParams:
        c = self.crf
        return CrfParams(w1=c.w1, sigma_alpha=c.sa, w2=c.w2, sigma_beta=c.sb, sigma_gamma=c.sg, iterations=c.iters)

    def tta_config(self) -> TtaConfig:
        return TtaConfig(enabled=self.tta.enabled)

    def post_config(self) -> PostprocessConfig:
        return PostprocessConfig(bg_exponent=self.post.bg_exponent, crf_enabled=self.crf.enabled)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        """Hash of the training-relevant sections."""
        keep = {k: v for k, v in self.to_dict().items() if k not in ("crf", "tta", "post")}
        return hashlib.sha256(json.dumps(keep, sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, data: Optional[dict]) -> "Config":
        data = data or {}
        if not isinstance(data, dict):
            raise ConfigError("config root must be a mapping")
        unknown = set(data) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        built = {}
        for name, section in SECTIONS.items():
            values = data.get(name) or {}
            if not isinstance(values, dict):
                raise ConfigError(f"section {name!r} must be a mapping")
            allowed = {f.name for f in fields(section)}
            bad = set(values) - allowed
            if bad:
                raise ConfigError(f"unknown keys in {name!r}: {sorted(f'{name}.{k}' for k in bad)}")
            try:
                built[name] = section(**values)
            except TypeError as e:
                raise ConfigError(f"bad value in section {name!r}: {e}") from e
        loss_given = "struct" in (data.get("loss") or {})
        distill_given = "weight" in (data.get("distill") or {})
        if loss_given and distill_given and built["loss"].struct != built["distill"].weight:
            raise ConfigError("loss.struct and distill.weight name the same coefficient and disagree")
        if loss_given and not distill_given:
            built["distill"].weight = built["loss"].struct
        built["loss"].struct = built["distill"].weight
        cfg = cls(**built)
        try:
            cfg.distill_config(), cfg.threshold_config(), cfg.loss_weights(), cfg.crf_params(), cfg.post_config()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        return cfg

    def with_overrides(self, **dotted: Any) -> "Config":
        """Copy with ``section__key=value`` overrides applied."""
        data = self.to_dict()
        for key, value in dotted.items():
            section, name = key.split("__", 1)
            data.setdefault(section, {})[name] = value
        if "distill__weight" in dotted and "loss__struct" not in dotted:
            data["loss"]["struct"] = dotted["distill__weight"]
        if "loss__struct" in dotted and "distill__weight" not in dotted:
            data["distill"]["weight"] = dotted["loss__struct"]
        return Config.from_dict(data)


def load_config(path: Path | str | None) -> Config:
    if path is None:
        return Config()
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e
    return Config.from_dict(data)


def dump_config(cfg: Config) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
