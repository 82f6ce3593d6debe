"""Small convolutional backbone and feature pyramid.

The backbone is a stand-in for a classification trunk: a stride-2 stem
plus four stages, each opened by a stride-2 conv and followed by
residual blocks. The pyramid applies 1x1 laterals and a top-down
pathway to produce P3..P7 at strides 8..128, and projects the stride-4
stage-2 feature to the shared width for the localization encoder's
finest-level input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    ConvParams,
    Tensor4,
    add,
    conv2d,
    group_norm,
    relu,
    upsample2x,
)


@dataclass
class BackboneConfig:
    stage_widths: tuple = (32, 64, 128, 256)  # widths of C2..C5
    w_fpn: int = 64
    blocks_per_stage: int = 2

    def __post_init__(self):
        if len(self.stage_widths) != 4 or min(self.stage_widths) < 1:
            raise ValueError(f"stage_widths must be four positive ints, got {self.stage_widths}")
        if self.w_fpn < 1 or self.blocks_per_stage < 1:
            raise ValueError("w_fpn and blocks_per_stage must be >= 1")


@dataclass
class FeaturePyramid:
    """Per-image multi-level features: P3..P7 at stride 2^l plus projected C2 at stride 4."""

    levels: dict  # level -> Tensor4, all with w_fpn channels
    c2: Tensor4
    w_fpn: int
    strides: dict = field(init=False)

    def __post_init__(self):
        self.strides = {l: 2 ** l for l in self.levels}


def gn_groups(channels: int) -> int:
    g = min(32, channels)
    if channels % g != 0:
        raise ValueError(f"channels {channels} not divisible by group count {g}")
    return g


class ParamBuilder:
    """Creates named leaf tensors; every model layer registers here."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.params = {}

    def _add(self, name: str, tensor: Tensor4) -> Tensor4:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name}")
        self.params[name] = tensor
        return tensor

    def conv(self, name, c_in, c_out, kernel, stride=1, padding=0,
             init="he", std=0.01, bias_fill=0.0) -> ConvParams:
        if init == "he":
            sd = math.sqrt(2.0 / (c_in * kernel * kernel))
        elif init == "normal":
            sd = std
        else:
            raise ValueError(f"unknown init {init}")
        w = self._add(name + ".weight",
                      Tensor4(self.rng.normal(0.0, sd, (c_out, c_in, kernel, kernel)),
                              requires_grad=True))
        b = self._add(name + ".bias",
                      Tensor4(np.full((1, c_out, 1, 1), bias_fill), requires_grad=True))
        return ConvParams(w, b, stride, padding)

    def norm(self, name, channels):
        gamma = self._add(name + ".gamma", Tensor4(np.ones((1, channels, 1, 1)), requires_grad=True))
        beta = self._add(name + ".beta", Tensor4(np.zeros((1, channels, 1, 1)), requires_grad=True))
        return gamma, beta, gn_groups(channels)

    def scalar(self, name, value=1.0) -> Tensor4:
        return self._add(name, Tensor4(np.full((1, 1, 1, 1), value), requires_grad=True))


def conv_gn_relu(x, cp, norm_spec):
    gamma, beta, groups = norm_spec
    return relu(group_norm(conv2d(x, cp), groups, gamma, beta))


class Backbone:
    """Stem + stages C2..C5 with strides 4, 8, 16, 32."""

    def __init__(self, cfg: BackboneConfig, builder: ParamBuilder):
        self.cfg = cfg
        self.stem = (builder.conv("backbone.stem.conv", 3, cfg.stage_widths[0], 3, 2, 1),
                     builder.norm("backbone.stem.gn", cfg.stage_widths[0]))
        self.stages = []
        c_prev = cfg.stage_widths[0]
        for k, width in enumerate(cfg.stage_widths, start=2):
            prefix = f"backbone.stage{k}"
            down = (builder.conv(f"{prefix}.down.conv", c_prev, width, 3, 2, 1),
                    builder.norm(f"{prefix}.down.gn", width))
            blocks = []
            for j in range(1, cfg.blocks_per_stage):
                blocks.append((builder.conv(f"{prefix}.block{j}.conv", width, width, 3, 1, 1),
                               builder.norm(f"{prefix}.block{j}.gn", width)))
            self.stages.append((down, blocks))
            c_prev = width

    def forward(self, image: Tensor4) -> dict:
        n, c, h, w = image.shape
        if c != 3:
            raise ValueError(f"backbone expects 3 input channels, got {c}")
        if h % 128 or w % 128:
            raise ValueError(f"input spatial dims must be multiples of 128, got {h}x{w}")
        x = conv_gn_relu(image, *self.stem)
        features = {}
        for k, (down, blocks) in enumerate(self.stages, start=2):
            x = conv_gn_relu(x, *down)
            for cp, norm_spec in blocks:
                gamma, beta, groups = norm_spec
                x = relu(add(x, group_norm(conv2d(x, cp), groups, gamma, beta)))
            features[k] = x
        return features


class FPN:
    """Lateral 1x1 + top-down pathway; P6/P7 from stride-2 convs on P5."""

    def __init__(self, cfg: BackboneConfig, builder: ParamBuilder):
        w = cfg.w_fpn
        self.w_fpn = w
        self.laterals = {
            k: builder.conv(f"fpn.lateral{k}.conv", cfg.stage_widths[k - 2], w, 1)
            for k in (3, 4, 5)
        }
        self.outputs = {k: builder.conv(f"fpn.output{k}.conv", w, w, 3, 1, 1) for k in (3, 4, 5)}
        self.p6 = builder.conv("fpn.p6.conv", w, w, 3, 2, 1)
        self.p7 = builder.conv("fpn.p7.conv", w, w, 3, 2, 1)
        self.c2_lateral = builder.conv("fpn.c2_lateral.conv", cfg.stage_widths[0], w, 1)

    def forward(self, features: dict) -> FeaturePyramid:
        missing = {2, 3, 4, 5} - set(features)
        if missing:
            raise ValueError(f"fpn requires backbone stages C2..C5, missing {sorted(missing)}")
        merged = {5: conv2d(features[5], self.laterals[5])}
        for k in (4, 3):
            merged[k] = add(conv2d(features[k], self.laterals[k]), upsample2x(merged[k + 1]))
        levels = {k: conv2d(merged[k], self.outputs[k]) for k in (3, 4, 5)}
        levels[6] = conv2d(levels[5], self.p6)
        levels[7] = conv2d(relu(levels[6]), self.p7)
        c2 = conv2d(features[2], self.c2_lateral)
        return FeaturePyramid(levels=levels, c2=c2, w_fpn=self.w_fpn)
