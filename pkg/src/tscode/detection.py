"""Target assignment, losses, box decoding, NMS and AP evaluation.

Assignment follows the anchor-free per-location convention: a location
is positive for a box when it lies strictly inside it and the largest
of its four boundary distances falls into the level's scale range.
Losses are focal (classification), centerness-weighted -log(IoU)
(regression) and binary cross-entropy (centerness), combined as
L = L_cls + lambda * (L_iou + L_ctr).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .heads import HeadOutputs
from .tensor import (
    Tensor4,
    add,
    add_array,
    affine,
    div,
    log,
    minimum_with,
    mul,
    mul_array,
    pow_const,
    reduce_sum,
    sigmoid,
    sub,
    slice_channels,
    softplus,
)

# scale ranges (max boundary distance) per level, stated for a 1024-px image
# and rescaled linearly to the actual image size
BASE_IMAGE_DIM = 1024
BASE_RANGES = {3: (0.0, 64.0), 4: (64.0, 128.0), 5: (128.0, 256.0),
               6: (256.0, 512.0), 7: (512.0, float("inf"))}


@dataclass
class GroundTruthBox:
    box: tuple  # (x1, y1, x2, y2) in image pixels
    cls: int

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x2 > x1 and y2 > y1):
            raise ValueError(f"degenerate box {self.box}")
        if self.cls < 0:
            raise ValueError(f"negative class index {self.cls}")

    @property
    def area(self) -> float:
        x1, y1, x2, y2 = self.box
        return (x2 - x1) * (y2 - y1)


@dataclass
class Detection:
    box: tuple
    score: float
    cls: int


@dataclass
class AssignmentTargets:
    """Per-level maps for one image: class index (-1 negative), distances, centerness."""

    cls: dict  # level -> (H, W) int, -1 where negative
    dist: dict  # level -> (4, H, W) stride-normalized (l, t, r, b), zeros at negatives
    ctr: dict  # level -> (H, W) centerness in [0, 1], zeros at negatives
    num_pos: int


def level_ranges(image_dim: int) -> dict:
    s = image_dim / BASE_IMAGE_DIM
    return {l: (lo * s, hi * s) for l, (lo, hi) in BASE_RANGES.items()}


def location_coords(image_dim: int, level: int):
    """Pixel coordinates of each feature location: stride/2 + index*stride."""
    stride = 2 ** level
    n = image_dim // stride
    c = stride / 2.0 + stride * np.arange(n, dtype=np.float64)
    return c  # same for x and y on square images


def assign_targets(gts, image_dim: int, levels=(3, 4, 5, 6, 7)) -> AssignmentTargets:
    """Map ground-truth boxes to per-level location targets for one image."""
    ranges = level_ranges(image_dim)
    cls_t, dist_t, ctr_t = {}, {}, {}
    num_pos = 0
    for level in levels:
        stride = 2 ** level
        coords = location_coords(image_dim, level)
        h = w = coords.size
        cx = coords[None, :]  # (1, W)
        cy = coords[:, None]  # (H, 1)
        best_area = np.full((h, w), np.inf)
        best_cls = np.full((h, w), -1, dtype=np.int64)
        best_dist = np.zeros((4, h, w))
        lo, hi = ranges[level]
        for gt in gts:
            x1, y1, x2, y2 = gt.box
            dl = cx - x1 + np.zeros((h, w))
            dt = cy - y1 + np.zeros((h, w))
            dr = x2 - cx + np.zeros((h, w))
            db = y2 - cy + np.zeros((h, w))
            stacked = np.stack([dl, dt, dr, db])
            inside = stacked.min(axis=0) > 0.0
            max_dist = stacked.max(axis=0)
            candidate = inside & (max_dist > lo) & (max_dist <= hi) & (gt.area < best_area)
            if candidate.any():
                best_area[candidate] = gt.area
                best_cls[candidate] = gt.cls
                best_dist[:, candidate] = stacked[:, candidate]
        pos = best_cls >= 0
        ctr = np.zeros((h, w))
        if pos.any():
            dl, dt, dr, db = best_dist
            lr_ratio = np.minimum(dl, dr)[pos] / np.maximum(dl, dr)[pos]
            tb_ratio = np.minimum(dt, db)[pos] / np.maximum(dt, db)[pos]
            ctr[pos] = np.sqrt(lr_ratio * tb_ratio)
        cls_t[level] = best_cls
        dist_t[level] = best_dist / stride
        ctr_t[level] = ctr
        num_pos += int(pos.sum())
    return AssignmentTargets(cls=cls_t, dist=dist_t, ctr=ctr_t, num_pos=num_pos)


@dataclass
class BatchTargets:
    """Stacked per-level targets for a batch of images."""

    cls: dict  # level -> (n, H, W)
    dist: dict  # level -> (n, 4, H, W)
    ctr: dict  # level -> (n, H, W)
    num_pos: int
    levels: tuple = field(default_factory=tuple)


def stack_targets(per_image) -> BatchTargets:
    levels = tuple(sorted(per_image[0].cls))
    return BatchTargets(
        cls={l: np.stack([t.cls[l] for t in per_image]) for l in levels},
        dist={l: np.stack([t.dist[l] for t in per_image]) for l in levels},
        ctr={l: np.stack([t.ctr[l] for t in per_image]) for l in levels},
        num_pos=sum(t.num_pos for t in per_image),
        levels=levels,
    )


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _zero_scalar() -> Tensor4:
    return Tensor4(np.zeros((1, 1, 1, 1)))


def _onehot(cls_map: np.ndarray, num_classes: int) -> np.ndarray:
    # cls_map (n, H, W) with -1 negatives -> (n, N, H, W) one-hot
    n, h, w = cls_map.shape
    onehot = np.zeros((n, num_classes, h, w))
    pos = cls_map >= 0
    ni, yi, xi = np.nonzero(pos)
    onehot[ni, cls_map[pos], yi, xi] = 1.0
    return onehot


def focal_loss(cls_logits: dict, targets: BatchTargets, alpha: float = 0.25,
               gamma: float = 2.0, normalizer: float = None) -> Tensor4:
    """Focal loss over all locations and classes, normalized by positive count (min 1)."""
    if normalizer is None:
        normalizer = max(1.0, float(targets.num_pos))
    total = _zero_scalar()
    for level, logits in sorted(cls_logits.items()):
        num_classes = logits.shape[1]
        onehot = _onehot(targets.cls[level], num_classes)
        p = sigmoid(logits)
        one_minus_p = affine(p, scale=-1.0, shift=1.0)
        pos_term = mul(pow_const(one_minus_p, gamma), softplus(affine(logits, scale=-1.0)))
        neg_term = mul(pow_const(p, gamma), softplus(logits))
        level_sum = add(reduce_sum(mul_array(pos_term, alpha * onehot)),
                        reduce_sum(mul_array(neg_term, (1.0 - alpha) * (1.0 - onehot))))
        total = add(total, level_sum)
    return affine(total, scale=1.0 / normalizer)


def iou_loss(box_reg: dict, targets: BatchTargets) -> Tensor4:
    """-log(IoU) over positive locations, weighted by the centerness target.

    Predicted and target boxes share the location as an interior point,
    so the IoU reduces to a function of the four boundary distances.
    Normalized by the sum of centerness weights; zero when no positives.
    """
    weight_total = sum(float(targets.ctr[l].sum()) for l in targets.levels)
    if weight_total <= 0.0:
        return _zero_scalar()
    total = _zero_scalar()
    for level, reg in sorted(box_reg.items()):
        cls_map = targets.cls[level]
        pos = (cls_map >= 0)
        if not pos.any():
            continue
        # dummy unit distances at negatives keep log() finite; masked out below
        tgt = np.where(pos[:, None], targets.dist[level], 1.0)
        weights = (targets.ctr[level] * pos)[:, None]  # (n, 1, H, W)
        pl, pt = slice_channels(reg, 0, 1), slice_channels(reg, 1, 2)
        pr, pb = slice_channels(reg, 2, 3), slice_channels(reg, 3, 4)
        tl, tt, tr, tb = (tgt[:, i : i + 1] for i in range(4))
        iw = add(minimum_with(pl, tl), minimum_with(pr, tr))
        ih = add(minimum_with(pt, tt), minimum_with(pb, tb))
        inter = mul(iw, ih)
        pred_area = mul(add(pl, pr), add(pt, pb))
        tgt_area = (tl + tr) * (tt + tb)
        union = add_array(sub(pred_area, inter), tgt_area)
        neg_log_iou = affine(log(div(inter, union)), scale=-1.0)
        total = add(total, reduce_sum(mul_array(neg_log_iou, weights)))
    return affine(total, scale=1.0 / weight_total)


def centerness_loss(centerness: dict, targets: BatchTargets) -> Tensor4:
    """Binary cross-entropy on positives, normalized by positive count (min 1)."""
    if targets.num_pos == 0:
        return _zero_scalar()
    total = _zero_scalar()
    for level, logits in sorted(centerness.items()):
        pos = (targets.cls[level] >= 0)[:, None]
        if not pos.any():
            continue
        tgt = targets.ctr[level][:, None]
        bce = sub(softplus(logits), mul_array(logits, tgt))
        total = add(total, reduce_sum(mul_array(bce, pos.astype(np.float64))))
    return affine(total, scale=1.0 / max(1.0, float(targets.num_pos)))


def total_loss(outputs: HeadOutputs, targets: BatchTargets, lam: float = 1.0,
               alpha: float = 0.25, gamma: float = 2.0):
    """L = L_cls + lambda * (L_iou + L_ctr); returns (scalar, parts dict)."""
    l_cls = focal_loss(outputs.cls_logits, targets, alpha, gamma)
    l_iou = iou_loss(outputs.box_reg, targets)
    l_ctr = centerness_loss(outputs.centerness, targets)
    total = add(l_cls, affine(add(l_iou, l_ctr), scale=lam))
    parts = {"loss_cls": l_cls.item(), "loss_loc": l_iou.item(),
             "loss_ctr": l_ctr.item(), "total": total.item()}
    return total, parts


# ---------------------------------------------------------------------------
# decoding, NMS, AP
# ---------------------------------------------------------------------------


def distances_to_box(cx: float, cy: float, distances) -> tuple:
    dl, dt, dr, db = distances
    return (cx - dl, cy - dt, cx + dr, cy + db)


def decode_boxes(outputs: HeadOutputs, image_dim: int, score_threshold: float = 0.05,
                 pre_nms_top_k: int = 1000):
    """Head outputs -> per-image detection lists (before NMS).

    score = sqrt(sigmoid(cls) * sigmoid(centerness)); boxes are rebuilt
    from stride-scaled distances at each location and clipped to the image.
    """
    batch = next(iter(outputs.cls_logits.values())).shape[0]
    per_image = [[] for _ in range(batch)]
    for level in sorted(outputs.cls_logits):
        stride = 2 ** level
        cls = outputs.cls_logits[level].data
        ctr = outputs.centerness[level].data
        reg = outputs.box_reg[level].data * stride
        n, num_classes, h, w = cls.shape
        coords = location_coords(image_dim, level)
        if coords.size != h:
            raise ValueError(f"level {level} spatial dims {h} do not match image {image_dim}")
        scores = np.sqrt(_np_sigmoid(cls) * _np_sigmoid(ctr))  # (n, N, H, W)
        for b in range(batch):
            flat = scores[b].reshape(num_classes, -1)
            keep_cls, keep_loc = np.nonzero(flat > score_threshold)
            if keep_loc.size == 0:
                continue
            vals = flat[keep_cls, keep_loc]
            if vals.size > pre_nms_top_k:
                order = np.argsort(-vals, kind="stable")[:pre_nms_top_k]
                keep_cls, keep_loc, vals = keep_cls[order], keep_loc[order], vals[order]
            ys, xs = keep_loc // w, keep_loc % w
            for c, y, x, v in zip(keep_cls, ys, xs, vals):
                dl, dt, dr, db = reg[b, :, y, x]
                x1, y1, x2, y2 = distances_to_box(coords[x], coords[y], (dl, dt, dr, db))
                per_image[b].append(Detection(
                    box=(max(0.0, x1), max(0.0, y1),
                         min(float(image_dim), x2), min(float(image_dim), y2)),
                    score=float(v), cls=int(c)))
    return per_image


def _np_sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def compute_iou(a, b) -> float:
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


def nms(dets, iou_threshold: float = 0.6):
    """Greedy class-wise suppression; ties broken by score then input order."""
    if not dets:
        return []
    boxes = np.array([d.box for d in dets])
    scores = np.array([d.score for d in dets])
    classes = np.array([d.cls for d in dets])
    keep_flags = np.zeros(len(dets), dtype=bool)
    areas = (boxes[:, 2] - boxes[:, 0]).clip(min=0) * (boxes[:, 3] - boxes[:, 1]).clip(min=0)
    for c in np.unique(classes):
        idx = np.nonzero(classes == c)[0]
        order = idx[np.argsort(-scores[idx], kind="stable")]
        while order.size:
            i = order[0]
            keep_flags[i] = True
            rest = order[1:]
            if rest.size == 0:
                break
            xx1 = np.maximum(boxes[i, 0], boxes[rest, 0])
            yy1 = np.maximum(boxes[i, 1], boxes[rest, 1])
            xx2 = np.minimum(boxes[i, 2], boxes[rest, 2])
            yy2 = np.minimum(boxes[i, 3], boxes[rest, 3])
            inter = (xx2 - xx1).clip(min=0) * (yy2 - yy1).clip(min=0)
            iou = inter / (areas[i] + areas[rest] - inter)
            order = rest[iou <= iou_threshold]
    # preserve score-sorted output, stable in the original index order
    kept = [i for i in np.argsort(-scores, kind="stable") if keep_flags[i]]
    return [dets[i] for i in kept]


def evaluate_ap(dets_per_image, gts_per_image,
                iou_thresholds=None) -> dict:
    """COCO-style AP: 101-point interpolated PR, averaged over classes then IoU thresholds.

    Classes with no ground truth are excluded from the mean.
    """
    if iou_thresholds is None:
        iou_thresholds = [0.5 + 0.05 * i for i in range(10)]
    classes = sorted({gt.cls for gts in gts_per_image for gt in gts})
    if not classes:
        return {"AP": 0.0, "AP50": 0.0, "AP75": 0.0}
    ap_table = np.zeros((len(classes), len(iou_thresholds)))
    for ci, c in enumerate(classes):
        records = []  # (score, image index, box)
        for img, dets in enumerate(dets_per_image):
            for d in dets:
                if d.cls == c:
                    records.append((d.score, img, d.box))
        records.sort(key=lambda r: -r[0])
        gt_boxes = {img: [g.box for g in gts if g.cls == c]
                    for img, gts in enumerate(gts_per_image)}
        total_gt = sum(len(v) for v in gt_boxes.values())
        for ti, thr in enumerate(iou_thresholds):
            matched = {img: np.zeros(len(v), dtype=bool) for img, v in gt_boxes.items()}
            tp = np.zeros(len(records))
            for ri, (_, img, box) in enumerate(records):
                cands = gt_boxes.get(img, [])
                best_iou, best_j = thr, -1
                for j, gbox in enumerate(cands):
                    if matched[img][j]:
                        continue
                    iou = compute_iou(box, gbox)
                    if iou >= best_iou:
                        best_iou, best_j = iou, j
                if best_j >= 0:
                    matched[img][best_j] = True
                    tp[ri] = 1.0
            ap_table[ci, ti] = _interpolated_ap(tp, total_gt)
    ap50 = float(ap_table[:, iou_thresholds.index(0.5)].mean())
    ap75 = float(ap_table[:, iou_thresholds.index(0.75)].mean())
    return {"AP": float(ap_table.mean()), "AP50": ap50, "AP75": ap75}


def _interpolated_ap(tp: np.ndarray, total_gt: int) -> float:
    if total_gt == 0:
        return 0.0
    if tp.size == 0:
        return 0.0
    cum_tp = np.cumsum(tp)
    recall = cum_tp / total_gt
    precision = cum_tp / np.arange(1, tp.size + 1)
    # precision envelope, then 101-point sampling
    for i in range(precision.size - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    out = 0.0
    for r in np.linspace(0.0, 1.0, 101):
        idx = np.searchsorted(recall, r, side="left")
        out += precision[idx] if idx < precision.size else 0.0
    return out / 101.0
