"""Experiment configuration (JSON)."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .detector import DetectorConfig, LossWeights
from .disparity_head import EncoderConfig, LossParams
from .scene import SceneParams
from .sgm import SgmParams


class ConfigError(ValueError):
    pass


ADVERSARIAL_MODES = ("grl", "negloss", "both")
PSEUDO_GT_SOURCES = ("sgm", "analytic")


@dataclass
class ExperimentConfig:
    rig: str | None = None
    scene: SceneParams = field(default_factory=SceneParams)
    sgm: SgmParams = field(default_factory=SgmParams)
    sgm_num_disp: int = 32
    sgm_mode: str = "census"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    loss: LossParams = field(default_factory=LossParams)
    lr: float = 0.05
    steps: int = 500
    seed: int = 0
    pseudo_gt: str = "sgm"
    crop: tuple[int, int] = (64, 80)
    depth_range: tuple[float, float] = (1.0, 60.0)
    samples_per_ray: int = 16
    train_seed_base: int = 100_000
    train_pool: int = 24
    eval_seeds: tuple[int, ...] = tuple(range(16))
    ref_radius: tuple[float, float] = (5.0, 20.0)
    ref_height: tuple[float, float] = (0.3, 1.5)
    disable_disparity: bool = False
    disable_adversarial: bool = False
    adversarial_mode: str = "grl"
    log_every: int = 1

    def validate(self) -> "ExperimentConfig":
        if self.rig is not None and not Path(self.rig).is_file():
            raise ConfigError(f"rig file {self.rig!r} does not exist")
        if self.pseudo_gt not in PSEUDO_GT_SOURCES:
            raise ConfigError(f"pseudo_gt must be one of {PSEUDO_GT_SOURCES}")
        if self.adversarial_mode not in ADVERSARIAL_MODES:
            raise ConfigError(f"adversarial_mode must be one of {ADVERSARIAL_MODES}")
        if self.steps < 0 or self.lr < 0 or self.train_pool < 1 or not self.eval_seeds:
            raise ConfigError("need steps >= 0, lr >= 0, a non-empty train pool and eval seeds")
        lo = self.train_seed_base
        if any(lo <= s < lo + self.train_pool for s in self.eval_seeds):
            raise ConfigError("eval seeds overlap the training seed range")
        try:
            self.sgm.validate()
            self.scene.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    @property
    def effective_weights(self) -> LossWeights:
        w = self.weights
        return LossWeights(
            w.cls, w.box, 0.0 if self.disable_disparity else w.disparity, 0.0 if self.disable_adversarial else w.region
        )

    @property
    def adversarial(self) -> bool:
        return self.effective_weights.region > 0

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        nested = {
            "scene": SceneParams,
            "sgm": SgmParams,
            "encoder": EncoderConfig,
            "detector": DetectorConfig,
            "weights": LossWeights,
            "loss": LossParams,
        }
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        try:
            for key, value in data.items():
                if key in nested:
                    sub = nested[key]
                    sub_known = {f.name for f in fields(sub)}
                    bad = set(value) - sub_known
                    if bad:
                        raise ConfigError(f"unknown keys in {key}: {sorted(bad)}")
                    value = sub(**{k: tuple(v) if isinstance(v, list) else v for k, v in value.items()})
                elif isinstance(value, list):
                    value = tuple(value)
                kwargs[key] = value
            return cls(**kwargs).validate()
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data)

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
