"""Synthetic detection scenes: shaped objects on a textured background.

Each class has a distinctive foreground (shape + color). A configurable
fraction of objects is "context-dependent": the foreground degenerates
to a neutral gray disk for every class and the class is encoded only by
a colored ring drawn outside the ground-truth box, so classifying those
objects requires looking beyond the box itself. Object sizes are drawn
from three scale bins so that several pyramid levels receive positives.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np

from .detection import GroundTruthBox
from .storage import load_tensor, save_tensor
from .tensor import Tensor4

log = logging.getLogger(__name__)

PALETTE = np.array([
    (0.90, 0.20, 0.20),
    (0.15, 0.80, 0.25),
    (0.25, 0.40, 0.95),
    (0.95, 0.85, 0.20),
    (0.85, 0.25, 0.85),
    (0.20, 0.85, 0.85),
    (0.95, 0.55, 0.15),
    (0.60, 0.30, 0.80),
])
NEUTRAL = np.array((0.78, 0.78, 0.78))
SHAPES = ("rectangle", "ellipse", "triangle", "diamond", "plus")
# object max-dimension bins, as fractions of a 128px canvas
SIZE_BINS = ((10, 16), (20, 32), (40, 72))


def class_color(c: int) -> np.ndarray:
    return PALETTE[c % len(PALETTE)]


def class_shape(c: int) -> str:
    return SHAPES[c % len(SHAPES)]


def _background(rng, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.empty((3, size, size))
    for ch in range(3):
        fx, fy = rng.uniform(0.5, 2.5, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        base = rng.uniform(0.30, 0.45)
        img[ch] = base + 0.08 * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
    img += rng.normal(0.0, 0.02, size=(3, size, size))
    return img.clip(0.0, 1.0)


def _shape_mask(shape: str, size: int, x1, y1, x2, y2) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    cx, cy = (x1 + x2) / 2.0, (y1 + y2) / 2.0
    a, b = (x2 - x1) / 2.0, (y2 - y1) / 2.0
    if shape == "rectangle":
        return (xx >= x1) & (xx <= x2) & (yy >= y1) & (yy <= y2)
    if shape == "ellipse":
        return ((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2 <= 1.0
    if shape == "diamond":
        return np.abs(xx - cx) / a + np.abs(yy - cy) / b <= 1.0
    if shape == "plus":
        horiz = (np.abs(yy - cy) <= b / 3) & (xx >= x1) & (xx <= x2)
        vert = (np.abs(xx - cx) <= a / 3) & (yy >= y1) & (yy <= y2)
        return horiz | vert
    if shape == "triangle":
        # apex at top-center, base at the bottom edge
        verts = [(cx, y1), (x1, y2), (x2, y2)]
        mask = np.ones((size, size), dtype=bool)
        for (px, py), (qx, qy) in zip(verts, verts[1:] + verts[:1]):
            mask &= (qx - px) * (yy - py) - (qy - py) * (xx - px) >= 0
        return mask
    raise ValueError(f"unknown shape {shape!r}")


def _ring_mask(size: int, cx, cy, r_inner, r_outer) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    d2 = (xx - cx) ** 2 + (yy - cy) ** 2
    return (d2 >= r_inner ** 2) & (d2 <= r_outer ** 2)


def _box_iou(a, b) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    area = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / area


def generate_scene(rng, size: int, num_classes: int, context_fraction: float,
                   class_counts: np.ndarray, min_objects: int = 1, max_objects: int = 3):
    """One image (3, S, S) plus its ground-truth boxes; updates class_counts."""
    img = _background(rng, size)
    scale = size / 128.0
    boxes = []
    n_objects = int(rng.integers(min_objects, max_objects + 1))
    placed = 0
    for _ in range(n_objects):
        # keep the running class histogram flat
        candidates = np.flatnonzero(class_counts == class_counts.min())
        cls = int(rng.choice(candidates))
        contextual = rng.random() < context_fraction
        lo, hi = SIZE_BINS[int(rng.integers(len(SIZE_BINS)))]
        ow = rng.uniform(lo, hi) * scale
        oh = ow * rng.uniform(0.7, 1.3)
        ring_r = 0.60 * float(np.hypot(ow, oh)) + 3.0
        margin = ring_r + 3.0 if contextual else max(ow, oh) / 2.0 + 2.0
        if 2 * margin >= size:
            continue
        for _attempt in range(20):
            cx = rng.uniform(margin, size - margin)
            cy = rng.uniform(margin, size - margin)
            box = (int(round(cx - ow / 2)), int(round(cy - oh / 2)),
                   int(round(cx + ow / 2)), int(round(cy + oh / 2)))
            if box[2] - box[0] < 4 or box[3] - box[1] < 4:
                continue
            if all(_box_iou(box, b[:4]) < 0.25 for b in boxes):
                break
        else:
            log.info("skipped an object after 20 placement attempts")
            continue
        x1, y1, x2, y2 = box
        ccx, ccy = (x1 + x2) / 2.0, (y1 + y2) / 2.0
        if contextual:
            ring = _ring_mask(size, ccx, ccy, ring_r, ring_r + 2.5 * scale)
            img[:, ring] = class_color(cls)[:, None]
            disk = _shape_mask("ellipse", size, x1, y1, x2, y2)
            img[:, disk] = NEUTRAL[:, None]
        else:
            mask = _shape_mask(class_shape(cls), size, x1, y1, x2, y2)
            img[:, mask] = class_color(cls)[:, None]
        boxes.append((x1, y1, x2, y2, cls))
        class_counts[cls] += 1
        placed += 1
    if placed == 0:
        # guarantee at least one object: a centered medium box
        cls = int(np.argmin(class_counts))
        side = int(24 * scale)
        x1 = y1 = size // 2 - side // 2
        box = (x1, y1, x1 + side, y1 + side)
        mask = _shape_mask(class_shape(cls), size, *box)
        img[:, mask] = class_color(cls)[:, None]
        boxes.append((*box, cls))
        class_counts[cls] += 1
    return img, boxes


def generate_split(out_dir, num_images: int, image_size: int, num_classes: int,
                   context_fraction: float, seed: int, min_objects: int = 1,
                   max_objects: int = 3):
    """Write images (binary tensor containers) and an annotations.jsonl file."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    class_counts = np.zeros(num_classes, dtype=np.int64)
    lines = []
    for i in range(num_images):
        img, boxes = generate_scene(rng, image_size, num_classes, context_fraction,
                                    class_counts, min_objects, max_objects)
        name = f"img_{i:05d}.t4dp"
        save_tensor(out_dir / name, Tensor4(img[None]))
        lines.append(json.dumps({"image": name, "boxes": [list(b) for b in boxes]},
                                separators=(",", ":")))
    (out_dir / "annotations.jsonl").write_text("".join(line + "\n" for line in lines))
    return class_counts


def load_split(split_dir):
    """Read a split back: (names, images as (3,S,S) arrays, ground-truth lists)."""
    split_dir = Path(split_dir)
    ann = split_dir / "annotations.jsonl"
    if not ann.exists():
        raise FileNotFoundError(f"no annotations.jsonl under {split_dir}")
    names, images, gts = [], [], []
    for line in ann.read_text().splitlines():
        rec = json.loads(line)
        names.append(rec["image"])
        images.append(load_tensor(split_dir / rec["image"]).data[0])
        gts.append([GroundTruthBox(tuple(b[:4]), int(b[4])) for b in rec["boxes"]])
    return names, images, gts


def generate_dataset(out_dir, cfg):
    """Create train/ and val/ splits from an ExperimentConfig."""
    ds = cfg.dataset
    out_dir = Path(out_dir)
    counts = {}
    for split, count, seed in (("train", int(ds["train_images"]), cfg.seed),
                               ("val", int(ds["val_images"]), cfg.seed + 1)):
        counts[split] = generate_split(
            out_dir / split, count, cfg.image_size, cfg.num_classes,
            float(ds["context_fraction"]), seed,
            int(ds["min_objects"]), int(ds["max_objects"]))
    return counts
