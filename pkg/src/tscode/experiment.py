"""Experiment orchestration: train/eval runs, sweeps, reports and SVG plots."""

from __future__ import annotations

import csv
import json
import logging
import multiprocessing
import os
import time
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .costmodel import CostReport, head_topology
from .data import load_split
from .detection import decode_boxes, evaluate_ap, nms
from .model import DetectionModel
from .storage import load_checkpoint_into, save_checkpoint
from .tensor import Tensor4, no_grad, tape_scope
from .train import train_loop

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "lr", "loss_cls", "loss_loc", "loss_ctr", "total")


def build_model(cfg: ExperimentConfig) -> DetectionModel:
    return DetectionModel(cfg.backbone_config(), cfg.head_variant(), seed=cfg.seed)


def head_cost(cfg: ExperimentConfig) -> CostReport:
    layers = head_topology(cfg.head_variant(), cfg.backbone_config().w_fpn,
                           cfg.num_classes, cfg.image_size, cfg.image_size)
    return CostReport.from_layers("head", f"toy {cfg.image_size}x{cfg.image_size}", layers)


def evaluate_model(model: DetectionModel, images, gts, cfg: ExperimentConfig,
                   chunk: int = 8) -> dict:
    ev = cfg.eval
    dets_per_image = []
    with tape_scope(), no_grad():
        for start in range(0, len(images), chunk):
            batch = Tensor4(np.stack(images[start : start + chunk]))
            outputs = model.forward(batch)
            decoded = decode_boxes(outputs, cfg.image_size,
                                   score_threshold=float(ev["score_threshold"]),
                                   pre_nms_top_k=int(ev["pre_nms_top_k"]))
            for dets in decoded:
                dets_per_image.append(nms(dets, float(ev["nms_threshold"])))
    return evaluate_ap(dets_per_image, gts)


def smoothed_tail(values, window: int = 100) -> float:
    tail = values[-window:] if len(values) > window else values
    return float(np.mean(tail)) if tail else float("nan")


def run_experiment(cfg: ExperimentConfig, data_dir, out_dir, eval_only: bool = False,
                   checkpoint=None) -> dict:
    """Train (or just evaluate) one configuration; writes all artifacts to out_dir.

    Artifacts: config.resolved.yaml, train_log.csv, metrics.json,
    loss_curve.svg, checkpoint.t4dp (+ .manifest). On divergence the
    partial train_log.csv remains on disk and the error propagates.
    """
    data_dir, out_dir = Path(data_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.dump(out_dir / "config.resolved.yaml")
    model = build_model(cfg)
    started = time.time()

    if eval_only:
        load_checkpoint_into(checkpoint or out_dir / "checkpoint.t4dp", model.params)
        rows = []
    else:
        _, train_images, train_gts = load_split(data_dir / "train")
        log_path = out_dir / "train_log.csv"
        rows = []
        with open(log_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(LOG_COLUMNS)

            def on_step(row):
                rows.append(row)
                writer.writerow([row[c] for c in LOG_COLUMNS])

            try:
                train_loop(model, train_images, train_gts, cfg.optimizer,
                           lam=cfg.loss_lambda, seed=cfg.seed, on_step=on_step)
            except Exception:
                fh.flush()
                raise
        save_checkpoint(out_dir / "checkpoint.t4dp", model.params)
        write_loss_curve_svg(out_dir / "loss_curve.svg", rows)

    _, val_images, val_gts = load_split(data_dir / "val")
    metrics = evaluate_model(model, val_images, val_gts, cfg)
    cost = head_cost(cfg)
    metrics.update({
        "head_macs": cost.total_macs,
        "head_params": cost.total_params,
        "wall_time_s": round(time.time() - started, 3),
        "variant": cfg.raw["head"]["kind"],
        "seed": cfg.seed,
    })
    if rows:
        metrics["loss_cls_smoothed"] = smoothed_tail([r["loss_cls"] for r in rows])
        metrics["total_loss_smoothed"] = smoothed_tail([r["total"] for r in rows])
    (out_dir / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    return metrics


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------


def _sweep_worker(args):
    cfg_dict, key, value, data_dir, run_dir = args
    os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
    cfg = ExperimentConfig.from_dict(cfg_dict).with_overrides([(key, value)])
    try:
        metrics = run_experiment(cfg, data_dir, run_dir)
        return run_dir, metrics
    except Exception as e:  # report failures per-run, keep the sweep going
        log.error("run %s failed: %s", run_dir, e)
        return run_dir, None


def sweep(cfg: ExperimentConfig, key: str, values, data_dir, out_root, processes: int = 2):
    """Run one experiment per override value; returns [(run_dir, metrics|None)]."""
    out_root = Path(out_root)
    jobs = []
    for i, value in enumerate(values):
        tag = str(value).strip().replace(" ", "").replace(",", "_").replace("[", "").replace("]", "")
        run_dir = out_root / f"{key.replace('.', '_')}={tag or i}"
        jobs.append((cfg.raw, key, value, str(data_dir), str(run_dir)))
    if processes > 1 and len(jobs) > 1:
        ctx = multiprocessing.get_context("spawn")
        with ctx.Pool(min(processes, len(jobs))) as pool:
            results = pool.map(_sweep_worker, jobs)
    else:
        results = [_sweep_worker(j) for j in jobs]
    return results


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

REPORT_COLUMNS = ("run", "variant", "AP", "AP50", "AP75", "head_gmacs",
                  "head_params", "wall_time_s")


def emit_report(run_dirs, out_dir):
    """Merge runs into comparison.csv and overlay their loss curves as SVG."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows, curves = [], []
    for run_dir in run_dirs:
        run_dir = Path(run_dir)
        metrics_file = run_dir / "metrics.json"
        if not metrics_file.exists():
            rows.append({"run": run_dir.name, "variant": "absent", "AP": "", "AP50": "",
                         "AP75": "", "head_gmacs": "", "head_params": "", "wall_time_s": ""})
            continue
        m = json.loads(metrics_file.read_text())
        rows.append({
            "run": run_dir.name, "variant": m.get("variant", ""),
            "AP": m.get("AP", ""), "AP50": m.get("AP50", ""), "AP75": m.get("AP75", ""),
            "head_gmacs": m.get("head_macs", 0) / 1e9,
            "head_params": m.get("head_params", ""),
            "wall_time_s": m.get("wall_time_s", ""),
        })
        log_file = run_dir / "train_log.csv"
        if log_file.exists():
            with open(log_file) as fh:
                series = [float(r["loss_cls"]) for r in csv.DictReader(fh)]
            curves.append((run_dir.name, series))
    with open(out_dir / "comparison.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    if curves:
        write_overlay_svg(out_dir / "loss_overlay.svg", curves,
                          title="classification loss (smoothed)")
    return rows


# ---------------------------------------------------------------------------
# plots (self-contained SVG, no plotting dependency)
# ---------------------------------------------------------------------------

_SVG_COLORS = ("#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")


def _smooth(series, window: int = 25):
    if len(series) <= window:
        return list(series)
    kernel = np.ones(window) / window
    return np.convolve(series, kernel, mode="valid").tolist()


def _polyline(xs, ys, x0, y0, width, height, x_max, y_max, color):
    pts = " ".join(
        f"{x0 + width * x / max(x_max, 1):.1f},{y0 + height * (1 - y / y_max):.1f}"
        for x, y in zip(xs, ys))
    return f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>'


def _svg_frame(title, curves, width=640, height=400):
    x0, y0, pw, ph = 60, 30, width - 90, height - 80
    y_max = max(max(ys) for _, ys in curves) * 1.05 or 1.0
    x_max = max(len(ys) for _, ys in curves) - 1
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.0f}" y="18" text-anchor="middle" font-size="13" '
        f'font-family="sans-serif">{title}</text>',
        f'<rect x="{x0}" y="{y0}" width="{pw}" height="{ph}" fill="none" stroke="#888"/>',
    ]
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        yv = y_max * frac
        ypix = y0 + ph * (1 - frac)
        parts.append(f'<line x1="{x0 - 4}" y1="{ypix:.1f}" x2="{x0}" y2="{ypix:.1f}" stroke="#888"/>')
        parts.append(f'<text x="{x0 - 8}" y="{ypix + 4:.1f}" text-anchor="end" font-size="10" '
                     f'font-family="sans-serif">{yv:.3g}</text>')
        xv = int(x_max * frac)
        xpix = x0 + pw * frac
        parts.append(f'<line x1="{xpix:.1f}" y1="{y0 + ph}" x2="{xpix:.1f}" y2="{y0 + ph + 4}" stroke="#888"/>')
        parts.append(f'<text x="{xpix:.1f}" y="{y0 + ph + 16}" text-anchor="middle" font-size="10" '
                     f'font-family="sans-serif">{xv}</text>')
    parts.append(f'<text x="{x0 + pw / 2:.0f}" y="{height - 8}" text-anchor="middle" '
                 f'font-size="11" font-family="sans-serif">step</text>')
    for i, (name, ys) in enumerate(curves):
        color = _SVG_COLORS[i % len(_SVG_COLORS)]
        xs = list(range(len(ys)))
        parts.append(_polyline(xs, ys, x0, y0, pw, ph, x_max, y_max, color))
        parts.append(f'<rect x="{x0 + pw - 150}" y="{y0 + 8 + 16 * i}" width="10" height="10" fill="{color}"/>')
        parts.append(f'<text x="{x0 + pw - 135}" y="{y0 + 17 + 16 * i}" font-size="10" '
                     f'font-family="sans-serif">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def write_loss_curve_svg(path, rows):
    if not rows:
        return
    curves = [(col, _smooth([r[col] for r in rows]))
              for col in ("loss_cls", "loss_loc", "loss_ctr", "total")]
    Path(path).write_text(_svg_frame("training losses (moving average)", curves))


def write_overlay_svg(path, named_series, title):
    curves = [(name, _smooth(series)) for name, series in named_series if series]
    if curves:
        Path(path).write_text(_svg_frame(title, curves))
