"""Full detector: backbone + feature pyramid + one head variant."""

from __future__ import annotations

import numpy as np

from .backbone import FPN, Backbone, BackboneConfig, FeaturePyramid, ParamBuilder
from .heads import Head, HeadOutputs, HeadVariant
from .tensor import Tensor4


class DetectionModel:
    """Owns the named parameter registry and runs image -> head outputs."""

    def __init__(self, backbone_cfg: BackboneConfig, variant: HeadVariant,
                 seed: int = 0, levels=(3, 4, 5, 6, 7)):
        builder = ParamBuilder(np.random.default_rng(seed))
        self.backbone_cfg = backbone_cfg
        self.variant = variant
        self.levels = tuple(sorted(levels))
        self.backbone = Backbone(backbone_cfg, builder)
        self.fpn = FPN(backbone_cfg, builder)
        self.head = Head(variant, backbone_cfg.w_fpn, builder, self.levels)
        self.params = builder.params

    def forward_pyramid(self, images: Tensor4) -> FeaturePyramid:
        return self.fpn.forward(self.backbone.forward(images))

    def forward(self, images: Tensor4) -> HeadOutputs:
        return self.head.forward(self.forward_pyramid(images))

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None
