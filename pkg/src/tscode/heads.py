"""Detection heads: coupled / decoupled baselines and the context-decoupled head.

The context-decoupled head feeds each task its own encoding:

* classification gets a semantic context encoding (SCE): P_l downsampled
  by a shared conv (or pooling) and concatenated with P_{l+1}, processed
  at half resolution by a shallow-but-wide tower that predicts 4N
  channels, which a quadrant rearrange relocates back to full
  resolution;
* localization gets a detail-preserving encoding (DPE): a mini
  encoder-decoder fusing P_{l-1}, P_l and P_{l+1}, where a second shared
  stride-2 conv folds the fine level back in.

Both shared downsampling convs have exactly one parameter set no matter
how many pyramid levels they serve. Tower weights are shared across
levels; only the regression scale is per-level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .backbone import FeaturePyramid, ParamBuilder, conv_gn_relu
from .tensor import (
    ConvParams,
    Tensor4,
    add,
    avg_pool2d,
    concat_channels,
    conv2d,
    exp,
    max_pool2d,
    rearrange_quadrants,
    scale_by,
    slice_spatial,
    upsample2x,
)

HEAD_KINDS = ("coupled", "decoupled", "tscode")
SCE_DOWNSAMPLE_OPS = ("conv3x3", "conv5x5", "conv7x7", "avgpool3x3", "maxpool3x3")
DPE_OFFSETS = (-1, 0, 1, 2)

# classification prior: initial sigmoid output ~= 0.01 everywhere
CLS_PRIOR_BIAS = -math.log((1.0 - 0.01) / 0.01)


@dataclass
class HeadVariant:
    """Configuration selecting the head kind and its capacity knobs."""

    kind: str = "tscode"
    num_classes: int = 80
    cls_tower: tuple = None  # (depth, width); kind-dependent default
    loc_tower: tuple = (4, 256)
    sce_downsample: str = "conv3x3"
    dpe_levels: tuple = (-1, 0, 1)  # offsets relative to l

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {self.kind!r}; expected one of {HEAD_KINDS}")
        if self.cls_tower is None:
            self.cls_tower = (2, 512) if self.kind == "tscode" else (4, 256)
        self.cls_tower = tuple(self.cls_tower)
        self.loc_tower = tuple(self.loc_tower)
        for name, (depth, width) in (("cls_tower", self.cls_tower), ("loc_tower", self.loc_tower)):
            if depth < 1 or width < 1:
                raise ValueError(f"{name} depth/width must be >= 1, got {(depth, width)}")
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.sce_downsample not in SCE_DOWNSAMPLE_OPS:
            raise ValueError(
                f"unknown sce_downsample {self.sce_downsample!r}; expected one of {SCE_DOWNSAMPLE_OPS}")
        self.dpe_levels = tuple(sorted(set(int(o) for o in self.dpe_levels)))
        if not self.dpe_levels:
            raise ValueError("dpe_levels must not be empty")
        bad = set(self.dpe_levels) - set(DPE_OFFSETS)
        if bad:
            raise ValueError(f"dpe_levels offsets {sorted(bad)} not in {DPE_OFFSETS}")

    @property
    def sce_kernel(self):
        """Kernel size of the SCE conv downsample, or None for pooling."""
        return {"conv3x3": 3, "conv5x5": 5, "conv7x7": 7}.get(self.sce_downsample)


@dataclass
class HeadOutputs:
    """Per-level logits and decoded distances; spatial dims always match P_l."""

    cls_logits: dict  # level -> (n, N, H, W)
    box_reg: dict  # level -> (n, 4, H, W), positive (l, t, r, b) in stride units
    centerness: dict  # level -> (n, 1, H, W)
    num_classes: int


def _ceil_half(v: int) -> int:
    return (v + 1) // 2


def sce_downsample(p_l: Tensor4, shared_dconv, variant: HeadVariant) -> Tensor4:
    if variant.sce_kernel is not None:
        return conv2d(p_l, shared_dconv)
    if variant.sce_downsample == "avgpool3x3":
        return avg_pool2d(p_l, 3, 2, 1)
    return max_pool2d(p_l, 3, 2, 1)


def sce_forward(p_l: Tensor4, p_next: Tensor4, shared_dconv, variant: HeadVariant) -> Tensor4:
    """Semantic context encoding: concat(downsample(P_l), P_{l+1}) at half resolution."""
    _, _, h, w = p_l.shape
    hn, wn = p_next.shape[2], p_next.shape[3]
    if (hn, wn) != (_ceil_half(h), _ceil_half(w)):
        raise ValueError(
            f"sce_forward: P_next dims {hn}x{wn} are not half of P_l dims {h}x{w}")
    return concat_channels(sce_downsample(p_l, shared_dconv, variant), p_next)


def dpe_forward(p_prev, p_l, p_next, shared_dconv2, variant: HeadVariant,
                p_next2=None) -> Tensor4:
    """Detail-preserving encoding: P_l + up(P_{l+1}) + DConv(up(P_l) + P_{l-1}).

    Terms are toggled by variant.dpe_levels (offsets relative to l) and
    silently dropped when the corresponding pyramid level does not exist
    (top/bottom of the pyramid). The optional +2 term upsamples P_{l+2}
    twice before adding.
    """
    _, _, h, w = p_l.shape
    if p_prev is not None and (p_prev.shape[2], p_prev.shape[3]) != (2 * h, 2 * w):
        raise ValueError(
            f"dpe_forward: P_prev dims {p_prev.shape[2:]} are not double of P_l dims {h}x{w}")
    if p_next is not None and (2 * p_next.shape[2], 2 * p_next.shape[3]) != (h, w):
        raise ValueError(
            f"dpe_forward: P_next dims {p_next.shape[2:]} are not half of P_l dims {h}x{w}")
    offsets = set(variant.dpe_levels)
    terms = []
    if 0 in offsets:
        terms.append(p_l)
    if 1 in offsets and p_next is not None:
        terms.append(upsample2x(p_next))
    if -1 in offsets and p_prev is not None:
        terms.append(conv2d(add(upsample2x(p_l), p_prev), shared_dconv2))
    if 2 in offsets and p_next2 is not None:
        terms.append(upsample2x(upsample2x(p_next2)))
    if not terms:
        raise ValueError(f"dpe_forward: no applicable terms for offsets {sorted(offsets)}")
    out = terms[0]
    for t in terms[1:]:
        out = add(out, t)
    return out


class _Tower:
    """depth x [3x3 conv -> group_norm -> relu], weights shared across levels."""

    def __init__(self, builder: ParamBuilder, name: str, c_in: int, depth: int, width: int):
        self.layers = []
        for i in range(depth):
            cp = builder.conv(f"{name}.conv{i}", c_in if i == 0 else width, width, 3, 1, 1,
                              init="normal", std=0.01)
            self.layers.append((cp, builder.norm(f"{name}.gn{i}", width)))

    def forward(self, x: Tensor4) -> Tensor4:
        for cp, norm_spec in self.layers:
            x = conv_gn_relu(x, cp, norm_spec)
        return x


def cls_tower_forward(g_cls: Tensor4, tower: _Tower, out_conv: ConvParams) -> Tensor4:
    """Run the classification tower and the final 4N-channel prediction conv."""
    return conv2d(tower.forward(g_cls), out_conv)


class Head:
    """Builds head weights for one variant and runs it over a pyramid."""

    def __init__(self, variant: HeadVariant, w_fpn: int, builder: ParamBuilder,
                 levels=(3, 4, 5, 6, 7)):
        self.variant = variant
        self.w_fpn = w_fpn
        self.levels = tuple(sorted(levels))
        n_cls = variant.num_classes
        cls_depth, cls_width = variant.cls_tower
        loc_depth, loc_width = variant.loc_tower

        if variant.kind == "coupled":
            self.tower = _Tower(builder, "head.tower", w_fpn, loc_depth, loc_width)
            feat_w = loc_width
            self.cls_out = builder.conv("head.cls_out", feat_w, n_cls, 3, 1, 1,
                                        init="normal", bias_fill=CLS_PRIOR_BIAS)
        elif variant.kind == "decoupled":
            self.cls_tower = _Tower(builder, "head.cls_tower", w_fpn, cls_depth, cls_width)
            self.loc_tower = _Tower(builder, "head.loc_tower", w_fpn, loc_depth, loc_width)
            feat_w = loc_width
            self.cls_out = builder.conv("head.cls_out", cls_width, n_cls, 3, 1, 1,
                                        init="normal", bias_fill=CLS_PRIOR_BIAS)
        else:  # tscode
            if variant.sce_kernel is not None:
                k = variant.sce_kernel
                self.sce_dconv = builder.conv("head.sce.dconv", w_fpn, w_fpn, k, 2, k // 2,
                                              init="normal", std=0.01)
            else:
                self.sce_dconv = None
            self.dpe_dconv = builder.conv("head.dpe.dconv", w_fpn, w_fpn, 3, 2, 1,
                                          init="normal", std=0.01)
            self.cls_tower = _Tower(builder, "head.cls_tower", 2 * w_fpn, cls_depth, cls_width)
            self.loc_tower = _Tower(builder, "head.loc_tower", w_fpn, loc_depth, loc_width)
            feat_w = loc_width
            self.cls_out = builder.conv("head.cls_out", cls_width, 4 * n_cls, 3, 1, 1,
                                        init="normal", bias_fill=CLS_PRIOR_BIAS)

        self.reg_out = builder.conv("head.reg_out", feat_w, 4, 3, 1, 1, init="normal")
        self.ctr_out = builder.conv("head.ctr_out", feat_w, 1, 3, 1, 1, init="normal")
        self.scales = {l: builder.scalar(f"head.scale.p{l}", 1.0) for l in self.levels}

    # -- per-level branches ------------------------------------------------

    def _cls_partner(self, pyramid: FeaturePyramid, level: int) -> Tensor4:
        if level == max(self.levels):
            # no coarser level exists: stand in with a parameter-free pooled P_l
            return max_pool2d(pyramid.levels[level], 3, 2, 1)
        return pyramid.levels[level + 1]

    def _tscode_cls(self, pyramid: FeaturePyramid, level: int) -> Tensor4:
        p_l = pyramid.levels[level]
        g_cls = sce_forward(p_l, self._cls_partner(pyramid, level), self.sce_dconv, self.variant)
        c_tilde = cls_tower_forward(g_cls, self.cls_tower, self.cls_out)
        c_hat = rearrange_quadrants(c_tilde, self.variant.num_classes)
        _, _, h, w = p_l.shape
        if c_hat.shape[2:] != (h, w):
            c_hat = slice_spatial(c_hat, h, w)  # odd-sized level: drop the padded row/col
        return c_hat

    def _tscode_loc_input(self, pyramid: FeaturePyramid, level: int) -> Tensor4:
        p_prev = pyramid.c2 if level == 3 else pyramid.levels.get(level - 1)
        p_next = pyramid.levels.get(level + 1)
        p_next2 = pyramid.levels.get(level + 2)
        return dpe_forward(p_prev, pyramid.levels[level], p_next, self.dpe_dconv,
                           self.variant, p_next2=p_next2)

    def _reg_branch(self, feat: Tensor4, level: int):
        box = exp(scale_by(conv2d(feat, self.reg_out), self.scales[level]))
        return box, conv2d(feat, self.ctr_out)

    def forward(self, pyramid: FeaturePyramid) -> HeadOutputs:
        missing = set(self.levels) - set(pyramid.levels)
        if missing:
            raise ValueError(f"pyramid is missing levels {sorted(missing)}")
        cls_logits, box_reg, centerness = {}, {}, {}
        for level in self.levels:
            p_l = pyramid.levels[level]
            if self.variant.kind == "coupled":
                feat = self.tower.forward(p_l)
                cls_logits[level] = conv2d(feat, self.cls_out)
                box_reg[level], centerness[level] = self._reg_branch(feat, level)
            elif self.variant.kind == "decoupled":
                cls_logits[level] = conv2d(self.cls_tower.forward(p_l), self.cls_out)
                feat = self.loc_tower.forward(p_l)
                box_reg[level], centerness[level] = self._reg_branch(feat, level)
            else:
                cls_logits[level] = self._tscode_cls(pyramid, level)
                feat = self.loc_tower.forward(self._tscode_loc_input(pyramid, level))
                box_reg[level], centerness[level] = self._reg_branch(feat, level)
        return HeadOutputs(cls_logits=cls_logits, box_reg=box_reg, centerness=centerness,
                           num_classes=self.variant.num_classes)


def param_count(params: dict) -> int:
    return sum(int(np.prod(t.shape)) for t in params.values())


def conv_param_count(params: dict, prefix: str = "") -> int:
    """Count conv weight/bias entries under a name prefix (norm affines excluded)."""
    total = 0
    for name, t in params.items():
        if name.startswith(prefix) and (name.endswith(".weight") or name.endswith(".bias")):
            total += int(np.prod(t.shape))
    return total
