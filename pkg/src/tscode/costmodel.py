"""Analytic multiply-accumulate and parameter accounting over layer lists.

Convention: 1 MAC = 1 FLOP; normalization, activations, pooling,
upsampling, additions, concatenation and rearrangement are free. Shared
layers (same param_key) count their parameters once but their MACs per
application. Nothing here executes; the tensor engine's instrumented
counter provides the cross-check.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .backbone import BackboneConfig
from .heads import HeadVariant

LAYER_KINDS = ("Conv", "Pool", "Upsample", "Add", "Concat", "Rearrange")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    in_h: int
    in_w: int
    c_in: int = 0
    c_out: int = 0
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    param_key: str = None  # layers sharing a key count params once

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.in_h < 1 or self.in_w < 1:
            raise ValueError(f"{self.name}: input dims must be >= 1, got {self.in_h}x{self.in_w}")

    @property
    def out_dims(self):
        if self.kind in ("Conv", "Pool"):
            oh = (self.in_h + 2 * self.padding - self.kernel) // self.stride + 1
            ow = (self.in_w + 2 * self.padding - self.kernel) // self.stride + 1
            return oh, ow
        if self.kind == "Upsample":
            return 2 * self.in_h, 2 * self.in_w
        return self.in_h, self.in_w


def conv_cost(spec: LayerSpec):
    """(macs, params) of one layer application; only Conv layers cost anything."""
    if spec.kind != "Conv":
        return 0, 0
    oh, ow = spec.out_dims
    if oh < 1 or ow < 1:
        raise ValueError(f"{spec.name}: empty output {oh}x{ow}")
    k2 = spec.kernel * spec.kernel
    macs = spec.c_out * spec.c_in * k2 * oh * ow
    params = spec.c_out * spec.c_in * k2 + spec.c_out
    return macs, params


@dataclass
class CostReport:
    """Per-module MAC and parameter totals for one named topology."""

    name: str
    convention: str
    entries: list = field(default_factory=list)  # (module, layer name, macs, params)

    @classmethod
    def from_layers(cls, name, convention, layers):
        """layers: iterable of (module, LayerSpec); dedups shared param_keys."""
        report = cls(name=name, convention=convention)
        seen_keys = set()
        for module, spec in layers:
            macs, params = conv_cost(spec)
            key = spec.param_key or f"__unique__{module}.{spec.name}"
            if key in seen_keys:
                params = 0
            else:
                seen_keys.add(key)
            report.entries.append((module, spec.name, macs, params))
        return report

    def by_module(self) -> dict:
        out = {}
        for module, _, macs, params in self.entries:
            m, p = out.get(module, (0, 0))
            out[module] = (m + macs, p + params)
        return out

    @property
    def total_macs(self) -> int:
        return sum(e[2] for e in self.entries)

    @property
    def total_params(self) -> int:
        return sum(e[3] for e in self.entries)

    @property
    def gflops(self) -> float:
        return self.total_macs / 1e9

    def module_macs(self, prefix: str) -> int:
        return sum(e[2] for e in self.entries if e[0].startswith(prefix))

    def module_params(self, prefix: str) -> int:
        return sum(e[3] for e in self.entries if e[0].startswith(prefix))


@dataclass
class CostDelta:
    """MAC difference between two reports sharing one convention."""

    base_name: str
    other_name: str
    macs_delta: int
    relative: float
    by_module: dict


def compare_heads(base: CostReport, other: CostReport) -> CostDelta:
    if base.convention != other.convention:
        raise ValueError(
            f"cannot compare reports under different conventions: "
            f"{base.convention!r} vs {other.convention!r}")
    base_mod, other_mod = base.by_module(), other.by_module()
    per_module = {}
    for module in sorted(set(base_mod) | set(other_mod)):
        bm = base_mod.get(module, (0, 0))[0]
        om = other_mod.get(module, (0, 0))[0]
        per_module[module] = om - bm
    delta = other.total_macs - base.total_macs
    return CostDelta(base_name=base.name, other_name=other.name, macs_delta=delta,
                     relative=delta / base.total_macs if base.total_macs else 0.0,
                     by_module=per_module)


# ---------------------------------------------------------------------------
# topology emitters (must mirror the executable model layer for layer)
# ---------------------------------------------------------------------------


def _ceil_half(v: int) -> int:
    return (v + 1) // 2


def pyramid_level_dims(image_h: int, image_w: int, levels=(3, 4, 5, 6, 7)) -> dict:
    """Spatial dims of C2 and each P level from iterated stride-2 halving."""
    dims, h, w = {}, image_h, image_w
    for level in range(1, max(levels) + 1):
        h, w = _ceil_half(h), _ceil_half(w)
        dims[level] = (h, w)
    return {"c2": dims[2], **{l: dims[l] for l in levels}}


def convention_string(image_h: int, image_w: int) -> str:
    return f"macs=flops, free norm/act/pool/resize, input {image_h}x{image_w}"


def head_topology(variant: HeadVariant, w_fpn: int = 256, num_classes: int = None,
                  image_h: int = 1280, image_w: int = 800, levels=(3, 4, 5, 6, 7),
                  use_sce: bool = None, use_dpe: bool = None):
    """Emit the per-level layer list of a head as (module, LayerSpec) pairs.

    `use_sce` / `use_dpe` default to the head kind (both on for the
    context-decoupled head); forcing one off swaps in the plain
    decoupled branch, which is how the single-component ablation rows
    are modeled.
    """
    n_cls = num_classes if num_classes is not None else variant.num_classes
    if use_sce is None:
        use_sce = variant.kind == "tscode"
    if use_dpe is None:
        use_dpe = variant.kind == "tscode"
    dims = pyramid_level_dims(image_h, image_w, levels)
    levels = tuple(sorted(levels))
    top = max(levels)
    cls_depth, cls_width = variant.cls_tower
    loc_depth, loc_width = variant.loc_tower
    layers = []

    def tower(module, key_prefix, level, c_in, depth, width, h, w):
        for i in range(depth):
            layers.append((module, LayerSpec(
                "Conv", f"{key_prefix}.conv{i}.P{level}", h, w,
                c_in=c_in if i == 0 else width, c_out=width, kernel=3, stride=1, padding=1,
                param_key=f"{key_prefix}.conv{i}")))

    for level in levels:
        h, w = dims[level]
        # -- classification branch
        if variant.kind == "coupled":
            tower("head.shared", "head.tower", level, w_fpn, loc_depth, loc_width, h, w)
            layers.append(("head.cls", LayerSpec(
                "Conv", f"head.cls_out.P{level}", h, w, c_in=loc_width, c_out=n_cls,
                kernel=3, stride=1, padding=1, param_key="head.cls_out")))
            reg_h, reg_w, feat_w = h, w, loc_width
        elif use_sce:
            if variant.sce_kernel is not None:
                k = variant.sce_kernel
                layers.append(("head.cls", LayerSpec(
                    "Conv", f"head.sce.dconv.P{level}", h, w, c_in=w_fpn, c_out=w_fpn,
                    kernel=k, stride=2, padding=k // 2, param_key="head.sce.dconv")))
            else:
                layers.append(("head.cls", LayerSpec(
                    "Pool", f"head.sce.pool.P{level}", h, w, c_in=w_fpn, c_out=w_fpn,
                    kernel=3, stride=2, padding=1)))
            if level == top:
                layers.append(("head.cls", LayerSpec(
                    "Pool", f"head.sce.partner_pool.P{level}", h, w, c_in=w_fpn, c_out=w_fpn,
                    kernel=3, stride=2, padding=1)))
            h2, w2 = _ceil_half(h), _ceil_half(w)
            layers.append(("head.cls", LayerSpec(
                "Concat", f"head.sce.concat.P{level}", h2, w2, c_in=2 * w_fpn, c_out=2 * w_fpn)))
            tower("head.cls", "head.cls_tower", level, 2 * w_fpn, cls_depth, cls_width, h2, w2)
            layers.append(("head.cls", LayerSpec(
                "Conv", f"head.cls_out.P{level}", h2, w2, c_in=cls_width, c_out=4 * n_cls,
                kernel=3, stride=1, padding=1, param_key="head.cls_out")))
            layers.append(("head.cls", LayerSpec(
                "Rearrange", f"head.rearrange.P{level}", h2, w2, c_in=4 * n_cls, c_out=n_cls)))
        else:
            tower("head.cls", "head.cls_tower", level, w_fpn, cls_depth, cls_width, h, w)
            layers.append(("head.cls", LayerSpec(
                "Conv", f"head.cls_out.P{level}", h, w, c_in=cls_width, c_out=n_cls,
                kernel=3, stride=1, padding=1, param_key="head.cls_out")))

        # -- localization branch
        if variant.kind != "coupled":
            if use_dpe:
                offsets = set(variant.dpe_levels)
                if 1 in offsets and level != top:
                    ph, pw = dims[level + 1]
                    layers.append(("head.loc", LayerSpec(
                        "Upsample", f"head.dpe.up_next.P{level}", ph, pw, c_in=w_fpn, c_out=w_fpn)))
                if -1 in offsets:
                    prev_h, prev_w = dims["c2"] if level == 3 else dims[level - 1]
                    layers.append(("head.loc", LayerSpec(
                        "Upsample", f"head.dpe.up_self.P{level}", h, w, c_in=w_fpn, c_out=w_fpn)))
                    layers.append(("head.loc", LayerSpec(
                        "Add", f"head.dpe.add_prev.P{level}", prev_h, prev_w,
                        c_in=w_fpn, c_out=w_fpn)))
                    layers.append(("head.loc", LayerSpec(
                        "Conv", f"head.dpe.dconv.P{level}", prev_h, prev_w, c_in=w_fpn,
                        c_out=w_fpn, kernel=3, stride=2, padding=1, param_key="head.dpe.dconv")))
                if 2 in offsets and level + 2 <= top:
                    layers.append(("head.loc", LayerSpec(
                        "Upsample", f"head.dpe.up_next2.P{level}", *dims[level + 2],
                        c_in=w_fpn, c_out=w_fpn)))
                layers.append(("head.loc", LayerSpec(
                    "Add", f"head.dpe.merge.P{level}", h, w, c_in=w_fpn, c_out=w_fpn)))
            tower("head.loc", "head.loc_tower", level, w_fpn, loc_depth, loc_width, h, w)
            reg_h, reg_w, feat_w = h, w, loc_width

        layers.append(("head.loc", LayerSpec(
            "Conv", f"head.reg_out.P{level}", reg_h, reg_w, c_in=feat_w, c_out=4,
            kernel=3, stride=1, padding=1, param_key="head.reg_out")))
        layers.append(("head.loc", LayerSpec(
            "Conv", f"head.ctr_out.P{level}", reg_h, reg_w, c_in=feat_w, c_out=1,
            kernel=3, stride=1, padding=1, param_key="head.ctr_out")))
    return layers


def backbone_fpn_topology(cfg: BackboneConfig, image_h: int, image_w: int):
    """Stem + stages + pyramid layers as (module, LayerSpec) pairs."""
    layers = []
    widths = cfg.stage_widths
    h, w = _ceil_half(image_h), _ceil_half(image_w)  # after stem
    layers.append(("backbone", LayerSpec(
        "Conv", "backbone.stem.conv", image_h, image_w, c_in=3, c_out=widths[0],
        kernel=3, stride=2, padding=1)))
    c_prev = widths[0]
    stage_dims = {}
    for k, width in enumerate(widths, start=2):
        layers.append(("backbone", LayerSpec(
            "Conv", f"backbone.stage{k}.down.conv", h, w, c_in=c_prev, c_out=width,
            kernel=3, stride=2, padding=1)))
        h, w = _ceil_half(h), _ceil_half(w)
        for j in range(1, cfg.blocks_per_stage):
            layers.append(("backbone", LayerSpec(
                "Conv", f"backbone.stage{k}.block{j}.conv", h, w, c_in=width, c_out=width,
                kernel=3, stride=1, padding=1)))
        stage_dims[k] = (h, w)
        c_prev = width
    wf = cfg.w_fpn
    for k in (3, 4, 5):
        layers.append(("fpn", LayerSpec(
            "Conv", f"fpn.lateral{k}.conv", *stage_dims[k], c_in=widths[k - 2], c_out=wf,
            kernel=1)))
    for k in (4, 3):
        layers.append(("fpn", LayerSpec(
            "Upsample", f"fpn.topdown{k}", *stage_dims[k + 1], c_in=wf, c_out=wf)))
        layers.append(("fpn", LayerSpec(
            "Add", f"fpn.merge{k}", *stage_dims[k], c_in=wf, c_out=wf)))
    for k in (3, 4, 5):
        layers.append(("fpn", LayerSpec(
            "Conv", f"fpn.output{k}.conv", *stage_dims[k], c_in=wf, c_out=wf,
            kernel=3, stride=1, padding=1)))
    p5_h, p5_w = stage_dims[5]
    layers.append(("fpn", LayerSpec(
        "Conv", "fpn.p6.conv", p5_h, p5_w, c_in=wf, c_out=wf, kernel=3, stride=2, padding=1)))
    layers.append(("fpn", LayerSpec(
        "Conv", "fpn.p7.conv", _ceil_half(p5_h), _ceil_half(p5_w), c_in=wf, c_out=wf,
        kernel=3, stride=2, padding=1)))
    layers.append(("fpn", LayerSpec(
        "Conv", "fpn.c2_lateral.conv", *stage_dims[2], c_in=widths[0], c_out=wf, kernel=1)))
    return layers


def model_report(name: str, cfg: BackboneConfig, variant: HeadVariant,
                 image_h: int, image_w: int, levels=(3, 4, 5, 6, 7),
                 use_sce=None, use_dpe=None) -> CostReport:
    layers = backbone_fpn_topology(cfg, image_h, image_w)
    layers += head_topology(variant, cfg.w_fpn, variant.num_classes, image_h, image_w,
                            levels, use_sce=use_sce, use_dpe=use_dpe)
    return CostReport.from_layers(name, convention_string(image_h, image_w), layers)


def full_scale_head_reports(image_h: int = 1280, image_w: int = 800, w_fpn: int = 256,
                            num_classes: int = 80) -> dict:
    """Head-only reports for the baseline and the three encoding combinations."""
    convention = convention_string(image_h, image_w)
    baseline_variant = HeadVariant(kind="decoupled", num_classes=num_classes,
                                   cls_tower=(4, 256), loc_tower=(4, 256))
    full_variant = HeadVariant(kind="tscode", num_classes=num_classes)

    def report(name, variant, use_sce=None, use_dpe=None):
        layers = head_topology(variant, w_fpn, num_classes, image_h, image_w,
                               use_sce=use_sce, use_dpe=use_dpe)
        return CostReport.from_layers(name, convention, layers)

    return {
        "baseline": report("baseline", baseline_variant),
        "sce_only": report("sce_only", full_variant, use_sce=True, use_dpe=False),
        "dpe_only": report("dpe_only",
                           HeadVariant(kind="tscode", num_classes=num_classes,
                                       cls_tower=(4, 256)),
                           use_sce=False, use_dpe=True),
        "tscode": report("tscode", full_variant),
    }
