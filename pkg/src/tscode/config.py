"""Experiment configuration: a single YAML file of nested key/value blocks.

Every ablation knob is a config key so sweeps can drive them: head kind,
tower depth/width, the SCE downsampling operator, the DPE level set and
the localization loss weight. CLI flags mirror keys as dotted paths
(e.g. `--optimizer.lr 0.02`).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .backbone import BackboneConfig
from .heads import HeadVariant


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


DEFAULTS = {
    "seed": 0,
    "image_size": 128,
    "num_classes": 4,
    "dataset": {
        "train_images": 500,
        "val_images": 100,
        "context_fraction": 0.3,
        "min_objects": 1,
        "max_objects": 3,
    },
    "backbone": {
        "stage_widths": [32, 64, 128, 256],
        "w_fpn": 64,
        "blocks_per_stage": 2,
    },
    "head": {
        "kind": "tscode",
        "cls_tower": None,  # defaults by kind: [2, 128] tscode, [4, 64] otherwise
        "loc_tower": [4, 64],
        "sce_downsample": "conv3x3",
        "dpe_levels": [-1, 0, 1],
    },
    "lambda": 1.0,
    "optimizer": {
        "lr": 0.01,
        "momentum": 0.9,
        "weight_decay": 0.0001,
        "steps": 2000,
        "batch_size": 4,
        "milestones": None,  # defaults to [2/3, 8/9] of steps
        "warmup_steps": 100,
    },
    "eval": {
        "score_threshold": 0.05,
        "nms_threshold": 0.6,
        "pre_nms_top_k": 1000,
    },
}


def _merge(base: dict, override: dict, path="") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where} must be a block, got {value!r}")
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = value
    return out


@dataclass
class ExperimentConfig:
    raw: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        cfg = cls(raw=_merge(DEFAULTS, d or {}))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse config {path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"config root must be a mapping, got {type(data).__name__}")
        return cls.from_dict(data)

    def with_overrides(self, pairs) -> "ExperimentConfig":
        """Apply dotted-path overrides like ('optimizer.lr', '0.02')."""
        raw = copy.deepcopy(self.raw)
        for key, value in pairs:
            node = raw
            parts = key.split(".")
            for part in parts[:-1]:
                if not isinstance(node.get(part), dict):
                    raise ConfigError(f"unknown config block: {key}")
                node = node[part]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config key: {key}")
            node[parts[-1]] = yaml.safe_load(value) if isinstance(value, str) else value
        return ExperimentConfig.from_dict(raw)

    # -- typed accessors -----------------------------------------------------

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def image_size(self) -> int:
        return int(self.raw["image_size"])

    @property
    def num_classes(self) -> int:
        return int(self.raw["num_classes"])

    @property
    def dataset(self) -> dict:
        return self.raw["dataset"]

    @property
    def optimizer(self) -> dict:
        return self.raw["optimizer"]

    @property
    def eval(self) -> dict:
        return self.raw["eval"]

    @property
    def loss_lambda(self) -> float:
        return float(self.raw["lambda"])

    def head_variant(self) -> HeadVariant:
        h = self.raw["head"]
        cls_tower = h["cls_tower"]
        if cls_tower is None:
            cls_tower = [2, 2 * self.raw["backbone"]["w_fpn"]] if h["kind"] == "tscode" \
                else [4, self.raw["backbone"]["w_fpn"]]
        try:
            return HeadVariant(kind=h["kind"], num_classes=self.num_classes,
                               cls_tower=tuple(cls_tower), loc_tower=tuple(h["loc_tower"]),
                               sce_downsample=h["sce_downsample"],
                               dpe_levels=tuple(h["dpe_levels"]))
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def backbone_config(self) -> BackboneConfig:
        b = self.raw["backbone"]
        try:
            return BackboneConfig(stage_widths=tuple(b["stage_widths"]),
                                  w_fpn=int(b["w_fpn"]),
                                  blocks_per_stage=int(b["blocks_per_stage"]))
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def milestones(self):
        steps = int(self.optimizer["steps"])
        ms = self.optimizer["milestones"]
        if ms is None:
            return [int(steps * 2 / 3), int(steps * 8 / 9)]
        return [int(m) for m in ms]

    def validate(self):
        if self.image_size % 128 != 0 or self.image_size <= 0:
            raise ConfigError(f"image_size must be a positive multiple of 128, got {self.image_size}")
        for key in ("num_classes",):
            if int(self.raw[key]) < 1:
                raise ConfigError(f"{key} must be positive")
        ds = self.dataset
        for key in ("train_images", "val_images", "min_objects", "max_objects"):
            if int(ds[key]) < 1:
                raise ConfigError(f"dataset.{key} must be positive")
        if ds["min_objects"] > ds["max_objects"]:
            raise ConfigError("dataset.min_objects must be <= dataset.max_objects")
        if not (0.0 <= float(ds["context_fraction"]) <= 1.0):
            raise ConfigError("dataset.context_fraction must be in [0, 1]")
        opt = self.optimizer
        for key in ("lr", "steps", "batch_size"):
            if float(opt[key]) <= 0:
                raise ConfigError(f"optimizer.{key} must be positive")
        if self.loss_lambda < 0:
            raise ConfigError("lambda must be >= 0")
        steps = int(opt["steps"])
        for m in self.milestones():
            if not (0 < m <= steps):
                raise ConfigError(f"milestone {m} outside step budget {steps}")
        if int(opt["warmup_steps"]) < 0 or int(opt["warmup_steps"]) > steps:
            raise ConfigError("optimizer.warmup_steps must be in [0, steps]")
        ev = self.eval
        if not (0.0 <= float(ev["score_threshold"]) < 1.0):
            raise ConfigError("eval.score_threshold must be in [0, 1)")
        if not (0.0 < float(ev["nms_threshold"]) <= 1.0):
            raise ConfigError("eval.nms_threshold must be in (0, 1]")
        # instantiating checks the head/backbone blocks
        self.head_variant()
        self.backbone_config()

    def dump(self, path):
        Path(path).write_text(yaml.safe_dump(self.raw, sort_keys=True))

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.raw, sort_keys=True)
