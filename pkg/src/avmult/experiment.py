"""One JSON document describing a whole experiment.

A ``"preset"`` name expands to its model values first; the ``"model"``
section then overrides individual fields.  Every section rejects keys it does
not know.  Example::

    {"preset": "tiny", "model": {"dropout": 0.0},
     "pretrain": {"epochs": 10}, "finetune": {"patience": 3}, "seed": 7}
"""
from __future__ import annotations

import dataclasses
import json
import os

from .baselines import BaselineConfig
from .data.sequences import PipelineConfig
from .errors import ConfigError
from .mult import ModelConfig, preset
from .training import FINETUNE_SCHEDULE, PRETRAIN_SCHEDULE, MaskConfig, TrainSchedule

SEED_ENV = "AVMULT_SEED"
SECTIONS = ("preset", "model", "pretrain", "finetune", "mask", "pipeline", "baseline", "split_seed", "seed",
            "regression_loss", "freeze_backbone")
# baseline sizes are set here; input/output widths and seq_len come from the data and model
BASELINE_KEYS = ("hidden", "layers", "dropout")


def _section(cls, data, defaults, name):
    if not isinstance(data, dict):
        raise ConfigError(f"{name}: expected an object, got {type(data).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{name}: unknown keys {unknown}")
    try:
        return dataclasses.replace(defaults, **data)
    except TypeError as exc:
        raise ConfigError(f"{name}: {exc}") from None


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    preset: str = "tiny"
    model: ModelConfig = dataclasses.field(default_factory=lambda: preset("tiny"))
    pretrain: TrainSchedule = PRETRAIN_SCHEDULE
    finetune: TrainSchedule = FINETUNE_SCHEDULE
    mask: MaskConfig = MaskConfig()
    pipeline: PipelineConfig = PipelineConfig()
    baseline: dict = dataclasses.field(default_factory=lambda: {"hidden": 64, "layers": 1, "dropout": 0.1})
    split_seed: int = 0
    seed: int | None = None
    regression_loss: str = "ccc"
    freeze_backbone: bool = False

    @classmethod
    def from_dict(cls, data, preset_override=None):
        if not isinstance(data, dict):
            raise ConfigError("experiment config must be a JSON object")
        unknown = sorted(set(data) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}; allowed: {list(SECTIONS)}")
        name = preset_override or data.get("preset", "tiny")
        overrides = data.get("model", {})
        if not isinstance(overrides, dict):
            raise ConfigError("model: expected an object")
        try:
            model = preset(name, **overrides)
        except TypeError as exc:
            raise ConfigError(f"model: {exc}") from None
        baseline = dict(cls().baseline)
        extra = sorted(set(data.get("baseline", {})) - set(BASELINE_KEYS))
        if extra:
            raise ConfigError(f"baseline: unknown keys {extra}; allowed: {list(BASELINE_KEYS)}")
        baseline.update(data.get("baseline", {}))
        out = cls(
            preset=name,
            model=model,
            pretrain=_section(TrainSchedule, data.get("pretrain", {}), PRETRAIN_SCHEDULE, "pretrain"),
            finetune=_section(TrainSchedule, data.get("finetune", {}), FINETUNE_SCHEDULE, "finetune"),
            mask=_section(MaskConfig, data.get("mask", {}), MaskConfig(), "mask"),
            pipeline=_section(PipelineConfig, data.get("pipeline", {}), PipelineConfig(), "pipeline"),
            baseline=baseline,
            split_seed=data.get("split_seed", 0),
            seed=data.get("seed"),
            regression_loss=data.get("regression_loss", "ccc"),
            freeze_backbone=data.get("freeze_backbone", False),
        )
        try:
            return out.validate()
        except TypeError as exc:
            raise ConfigError(f"wrong value type in config: {exc}") from None

    def validate(self):
        self.model.validate()
        self.pretrain.validate()
        self.finetune.validate()
        if self.mask.chunk < 1 or not 0 < self.mask.ratio <= 1:
            raise ConfigError("mask: chunk must be >= 1 and ratio in (0, 1]")
        if self.regression_loss not in ("ccc", "mse"):
            raise ConfigError(f"regression_loss: expected 'ccc' or 'mse', got {self.regression_loss!r}")
        for key, value in (("split_seed", self.split_seed), ("seed", self.seed)):
            if value is not None and (not isinstance(value, int) or isinstance(value, bool) or value < 0):
                raise ConfigError(f"{key}: expected a non-negative integer, got {value!r}")
        BaselineConfig(**self.baseline).validate()
        return self

    def resolved_seed(self, flag=None):
        """``--seed`` flag, then the config's ``seed``, then ``$AVMULT_SEED``, then 0."""
        if flag is not None:
            return int(flag)
        if self.seed is not None:
            return self.seed
        env = os.environ.get(SEED_ENV)
        if env:
            try:
                return int(env)
            except ValueError:
                raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from None
        return 0

    def to_dict(self):
        """The fully resolved document; ``from_dict`` of it gives back an equal config."""
        return {
            "preset": self.preset,
            "model": self.model.to_dict(),
            "pretrain": self.pretrain.to_dict(),
            "finetune": self.finetune.to_dict(),
            "mask": self.mask.to_dict(),
            "pipeline": dataclasses.asdict(self.pipeline),
            "baseline": dict(self.baseline),
            "split_seed": self.split_seed,
            "seed": self.seed,
            "regression_loss": self.regression_loss,
            "freeze_backbone": self.freeze_backbone,
        }

    def baseline_config(self, kind, audio_dim, visual_dim, n_out):
        return BaselineConfig(kind=kind, audio_dim=audio_dim, visual_dim=visual_dim, n_out=n_out,
                              seq_len=self.model.seq_len, **self.baseline).validate()


def load_config(path=None, preset_override=None):
    if path is None:
        return ExperimentConfig.from_dict({}, preset_override)
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    return ExperimentConfig.from_dict(data, preset_override)
