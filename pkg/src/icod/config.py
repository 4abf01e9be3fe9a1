"""Experiment configuration: JSON in, task/bias/hyper/strategy objects out."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .datagen import BiasConfig, TaskDef, build_dataset, default_signatures
from .errors import ConfigError
from .incremental import StrategySpec
from .trainer import HyperParams

SCENARIOS = ("single", "category_incremental", "domain_shift")


@dataclass
class ExperimentConfig:
    scenario: str = "single"
    classes: list = field(default_factory=lambda: list(range(8)))
    old_classes: list = field(default_factory=list)
    new_classes: list = field(default_factory=list)
    image_size: int = 64
    objects_per_image: list = field(default_factory=lambda: [1, 3])
    rho: float = 0.95
    bias_kind: str = "background_color"
    fog_intensity: float = 0.5
    n_train: int = 2000
    n_test: int = 300
    base_seed: int = 1
    mode: str = "icod"  # icod | baseline
    hyper: dict = field(default_factory=dict)
    strategy: dict = field(default_factory=lambda: {"kind": "freeze_backbone"})
    seeds: list = field(default_factory=lambda: [0])
    score_thresh: float = 0.3
    nms_iou: float = 0.5
    backbone_channels: list = field(default_factory=lambda: [16, 32, 32])

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}")
        if self.mode not in ("icod", "baseline"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.scenario == "category_incremental":
            if not self.old_classes or not self.new_classes:
                raise ConfigError("category_incremental needs old_classes and new_classes")
            if set(self.old_classes) & set(self.new_classes):
                raise ConfigError("old_classes and new_classes must be disjoint")
        else:
            if not self.classes:
                raise ConfigError("classes must be non-empty")

    @property
    def all_classes(self):
        if self.scenario == "category_incremental":
            return sorted(self.old_classes) + sorted(self.new_classes)
        return sorted(self.classes)

    def to_dict(self):
        return asdict(self)

    def make_hyper(self, seed=None):
        kwargs = dict(self.hyper)
        if seed is not None:
            kwargs["seed"] = seed
        return HyperParams(**kwargs)

    def make_strategy(self, seed=None):
        kwargs = dict(self.strategy)
        hyper = dict(kwargs.pop("hyper", {}))
        if seed is not None:
            hyper["seed"] = seed
        kwargs["hyper"] = HyperParams(**hyper)
        return StrategySpec(**kwargs)

    def make_task(self, classes, task_id):
        return TaskDef(
            task_id=task_id,
            class_ids=tuple(classes),
            image_size=self.image_size,
            objects_per_image=tuple(self.objects_per_image),
        )

    def make_bias(self):
        # signatures cover the union of all tasks so flips stay well-defined
        return BiasConfig(
            rho=self.rho, bias_kind=self.bias_kind, signatures=default_signatures(self.all_classes)
        )

    def old_task(self):
        if self.scenario == "category_incremental":
            return self.make_task(self.old_classes, "old")
        return self.make_task(self.classes, "old")

    def new_task(self):
        if self.scenario == "category_incremental":
            return self.make_task(self.new_classes, "new")
        if self.scenario == "domain_shift":
            return self.make_task(self.classes, "new")
        raise ConfigError("scenario 'single' has no new task")

    def datasets(self, seed_offset=0):
        """Train/test datasets for the scenario, keyed by split name."""
        bias = self.make_bias()
        base = self.base_seed + 1000 * seed_offset
        out = {
            "old_train": build_dataset(self.old_task(), bias, self.n_train, base),
            "old_test": build_dataset(self.old_task(), bias, self.n_test, base + 1),
        }
        if self.scenario == "category_incremental":
            out["new_train"] = build_dataset(self.new_task(), bias, self.n_train, base + 2)
            out["new_test"] = build_dataset(self.new_task(), bias, self.n_test, base + 3)
        elif self.scenario == "domain_shift":
            fog = self.fog_intensity
            out["new_train"] = build_dataset(self.new_task(), bias, self.n_train, base + 2, fog_intensity=fog)
            out["new_test"] = build_dataset(self.new_task(), bias, self.n_test, base + 3, fog_intensity=fog)
        return out

    def head_class_remap(self):
        """Global class id -> head output index (old classes first)."""
        return {c: i for i, c in enumerate(self.all_classes)}


def load_config(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from e
    known = set(ExperimentConfig.__dataclass_fields__)
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")
    return ExperimentConfig(**data)
