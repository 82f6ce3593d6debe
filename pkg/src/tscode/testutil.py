"""Small builders shared by the grad-check command and the test suite."""

from __future__ import annotations

import numpy as np

from .backbone import FeaturePyramid, ParamBuilder
from .heads import Head, HeadVariant
from .tensor import Tensor4, add, reduce_mean


def synthetic_pyramid(rng, w_fpn: int = 8, levels=(3, 4, 5, 6), base: int = 16,
                      batch: int = 1, scale: float = 1.0):
    """Random feature pyramid with exact 2x halving; returns (pyramid, leaf dict)."""
    levels = tuple(sorted(levels))
    leaves = {}
    maps = {}
    size = base
    for level in levels:
        t = Tensor4(rng.normal(0.0, scale, (batch, w_fpn, size, size)), requires_grad=True)
        maps[level] = t
        leaves[f"P{level}"] = t
        size //= 2
        if size < 1:
            raise ValueError(f"base {base} too small for levels {levels}")
    c2 = Tensor4(rng.normal(0.0, scale, (batch, w_fpn, 2 * base, 2 * base)), requires_grad=True)
    leaves["C2"] = c2
    return FeaturePyramid(levels=maps, c2=c2, w_fpn=w_fpn), leaves


def head_loss_fn(head: Head, pyramid: FeaturePyramid):
    """Scalar objective touching every head output at every level."""

    def f():
        out = head.forward(pyramid)
        total = None
        for level in sorted(out.cls_logits):
            for t in (out.cls_logits[level], out.box_reg[level], out.centerness[level]):
                term = reduce_mean(t)
                total = term if total is None else add(total, term)
        return total

    return f


def make_gradcheck_head(seed: int, num_classes: int = 2, w_fpn: int = 8,
                        levels=(3, 4, 5, 6), base: int = 32, kind: str = "tscode"):
    """Head + pyramid fixture whose finite differences stay in one smooth region.

    Central differences are only valid where the loss is smooth, so the
    fixture must keep pre-activation values away from the relu kinks:
    He-scale weights stop group norm from amplifying the probe step, and
    a positive norm-shift offset moves activations off zero. Dims stay
    >= 2x2 so no normalization group ever collapses to a single value.
    """
    rng = np.random.default_rng(seed)
    builder = ParamBuilder(rng)
    variant = HeadVariant(kind=kind, num_classes=num_classes,
                          cls_tower=(2, 16), loc_tower=(2, 8))
    head = Head(variant, w_fpn, builder, levels=levels)
    for name, t in builder.params.items():
        if name.endswith(".weight"):
            fan_in = t.data.shape[1] * t.data.shape[2] * t.data.shape[3]
            t.data = rng.normal(0.0, np.sqrt(2.0 / fan_in), t.data.shape)
        elif name.endswith(".beta"):
            t.data = t.data + 1.0
    pyramid, leaves = synthetic_pyramid(rng, w_fpn=w_fpn, levels=levels, base=base)
    leaves.update(builder.params)
    return head, pyramid, leaves
