"""Run configuration: one JSON document drives every pipeline command."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

from .multiscale import ScaleSet, desk_scale_set
from .network import ArchSpec, desk_spec, load_arch_spec
from .preprocess import WindowSpec
from .training import TrainConfig

__all__ = ["ConfigError", "RunConfig", "load_config", "default_config"]


class ConfigError(ValueError):
    """Configuration file missing, malformed, or out of range."""


@dataclass(frozen=True)
class RunConfig:
    """Paths, architecture, schedule, scales, and thresholds for one run.

    ``arch_file`` of None selects the packaged desk architecture;
    ``width_multiplier`` of None keeps whatever the architecture declares.
    """

    data_dir: str = "data"
    checkpoint_dir: str = "checkpoints"
    output_dir: str = "out"
    arch_file: str | None = None
    width_multiplier: float | None = None
    window: WindowSpec = WindowSpec()
    train_volumes: int = 20
    val_volumes: int = 5
    volume_shape: tuple[int, int, int] = (16, 64, 64)
    epochs: int = 12
    stage2_epochs: int = 5
    batch_size: int = 8
    crop_size: int = 48
    slice_budget: int = 64
    seed: int = 0
    scales: ScaleSet = desk_scale_set()
    liver_threshold: float = 0.5
    lesion_threshold: float = 0.5

    def __post_init__(self):
        if self.arch_file is not None and not os.path.exists(self.arch_file):
            raise ConfigError(f"arch file does not exist: {self.arch_file}")
        if self.width_multiplier is not None and not (0 < self.width_multiplier <= 1):
            raise ConfigError(
                f"width_multiplier must lie in (0, 1], got {self.width_multiplier}")
        for name in ("train_volumes", "val_volumes", "epochs", "stage2_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("batch_size", "slice_budget"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.slice_budget % 2:
            raise ConfigError("slice_budget must be even (balanced sampling)")
        if len(self.volume_shape) != 3 or any(s < 1 for s in self.volume_shape):
            raise ConfigError(f"bad volume_shape {self.volume_shape}")
        for name in ("liver_threshold", "lesion_threshold"):
            v = getattr(self, name)
            if not (0 <= v <= 1):
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")

    def arch(self) -> ArchSpec:
        spec = (load_arch_spec(self.arch_file) if self.arch_file
                else desk_spec())
        if self.width_multiplier is not None:
            spec = spec.with_width_multiplier(self.width_multiplier)
        return spec.with_input_channels(1)

    def stage_config(self, stage: int) -> TrainConfig:
        if stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {stage}")
        return TrainConfig(
            epochs=self.epochs if stage == 1 else self.stage2_epochs,
            batch_size=self.batch_size, crop_size=self.crop_size,
            seed=self.seed)


def default_config() -> RunConfig:
    return RunConfig()


_GROUPS = {
    "window": ("lo", "hi"),
    "phantom": ("train_volumes", "val_volumes", "volume_shape"),
    "train": ("epochs", "stage2_epochs", "batch_size", "crop_size",
              "slice_budget", "seed"),
    "scales": ("base", "scales"),
    "thresholds": ("liver", "lesion"),
}
_TOP = ("data_dir", "checkpoint_dir", "output_dir", "arch_file",
        "width_multiplier")


def load_config(path=None, **overrides) -> RunConfig:
    """Build a RunConfig from a JSON file plus keyword overrides.

    Overrides use RunConfig field names and win over file values; a None
    override means "not supplied" and is ignored.
    """
    fields: dict = {}
    if path is not None:
        try:
            with open(path) as f:
                doc = json.load(f)
        except OSError as e:
            raise ConfigError(f"cannot read config: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e
        if not isinstance(doc, dict):
            raise ConfigError("config root must be a JSON object")
        known = set(_TOP) | set(_GROUPS)
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            for key in _TOP:
                if key in doc:
                    fields[key] = doc[key]
            if "window" in doc:
                fields["window"] = WindowSpec(**doc["window"])
            if "phantom" in doc:
                p = dict(doc["phantom"])
                if "shape" in p:
                    p["volume_shape"] = tuple(p.pop("shape"))
                fields.update(p)
            if "train" in doc:
                fields.update(doc["train"])
            if "scales" in doc:
                fields["scales"] = ScaleSet(doc["scales"]["base"],
                                            tuple(doc["scales"]["scales"]))
            if "thresholds" in doc:
                t = doc["thresholds"]
                if "liver" in t:
                    fields["liver_threshold"] = t["liver"]
                if "lesion" in t:
                    fields["lesion_threshold"] = t["lesion"]
        except (TypeError, KeyError) as e:
            raise ConfigError(f"malformed config group: {e}") from e
    for key, value in overrides.items():
        if value is not None:
            fields[key] = value
    if "volume_shape" in fields:
        fields["volume_shape"] = tuple(fields["volume_shape"])
    try:
        return RunConfig(**fields)
    except TypeError as e:
        raise ConfigError(f"bad config field: {e}") from e
