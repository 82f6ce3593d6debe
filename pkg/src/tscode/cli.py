"""Command-line interface.

Subcommands: gen-data, train, eval, flops, sweep, report, grad-check.
Any trailing `--dotted.key value` pair overrides the matching config
key. TSCODE_ARTIFACTS sets the default artifacts root (default
./artifacts). Exit codes: 0 success, 2 config error, 3 numerical
divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig
from .costmodel import compare_heads, full_scale_head_reports, model_report
from .data import generate_dataset
from .experiment import build_model, emit_report, evaluate_model, run_experiment, sweep
from .data import load_split
from .storage import load_checkpoint_into
from .train import DivergenceError

log = logging.getLogger("tscode")

PAPER_DELTAS_GFLOPS = {"sce_only": -17.97, "dpe_only": +12.60, "tscode": -5.37}


def artifacts_root() -> Path:
    return Path(os.environ.get("TSCODE_ARTIFACTS", "artifacts"))


def _split_overrides(rest):
    """Turn trailing ['--a.b', '1', '--c', 'x'] into [('a.b', '1'), ('c', 'x')]."""
    pairs = []
    i = 0
    while i < len(rest):
        token = rest[i]
        if not token.startswith("--") or i + 1 >= len(rest):
            raise ConfigError(f"expected --key value override pairs, got {rest[i:]}")
        pairs.append((token[2:], rest[i + 1]))
        i += 2
    return pairs


def _load_config(args, rest) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig.from_dict({})
    overrides = _split_overrides(rest)
    return cfg.with_overrides(overrides) if overrides else cfg


def cmd_gen_data(args, rest) -> int:
    cfg = _load_config(args, rest)
    out = Path(args.out or artifacts_root() / "dataset")
    counts = generate_dataset(out, cfg)
    for split, c in counts.items():
        print(f"{split}: {int(c.sum())} objects, per-class {c.tolist()}  -> {out / split}")
    return 0


def cmd_train(args, rest) -> int:
    cfg = _load_config(args, rest)
    out = Path(args.out or artifacts_root() / "run")
    metrics = run_experiment(cfg, args.data, out)
    print(json.dumps(metrics, indent=2, sort_keys=True))
    print(f"artifacts in {out}")
    return 0


def cmd_eval(args, rest) -> int:
    cfg = _load_config(args, rest)
    model = build_model(cfg)
    load_checkpoint_into(args.checkpoint, model.params)
    _, images, gts = load_split(Path(args.data) / args.split)
    metrics = evaluate_model(model, images, gts, cfg)
    print(json.dumps(metrics, indent=2, sort_keys=True))
    return 0


def cmd_flops(args, rest) -> int:
    cfg = _load_config(args, rest)
    report = model_report("model", cfg.backbone_config(), cfg.head_variant(),
                          cfg.image_size, cfg.image_size)
    print(f"topology at {cfg.image_size}x{cfg.image_size} "
          f"(N={cfg.num_classes}, w_fpn={cfg.backbone_config().w_fpn}):")
    print(f"{'module':<14}{'MACs':>16}{'params':>12}")
    for module, (macs, params) in sorted(report.by_module().items()):
        print(f"{module:<14}{macs:>16,}{params:>12,}")
    print(f"{'total':<14}{report.total_macs:>16,}{report.total_params:>12,}")

    reports = full_scale_head_reports()
    base = reports["baseline"]
    print("\nfull-scale head comparison (1280x800, N=80, width 256):")
    print(f"{'head':<10}{'GFLOPs':>10}{'delta':>10}{'reference':>11}")
    print(f"{'baseline':<10}{base.gflops:>10.2f}{'':>10}{'':>11}")
    for name in ("sce_only", "dpe_only", "tscode"):
        delta = compare_heads(base, reports[name])
        print(f"{name:<10}{reports[name].gflops:>10.2f}{delta.macs_delta / 1e9:>+10.2f}"
              f"{PAPER_DELTAS_GFLOPS[name]:>+11.2f}")
    if args.out:
        import csv as _csv
        with open(args.out, "w", newline="") as fh:
            writer = _csv.writer(fh)
            writer.writerow(["module", "layer", "macs", "params"])
            writer.writerows(report.entries)
        print(f"\nper-layer CSV written to {args.out}")
    return 0


def cmd_sweep(args, rest) -> int:
    cfg = _load_config(args, rest)
    out = Path(args.out or artifacts_root() / "sweep")
    values = [v for v in args.values.split("|") if v]
    import yaml
    parsed = [yaml.safe_load(v) for v in values]
    results = sweep(cfg, args.param, parsed, args.data, out, processes=args.processes)
    emit_report([r[0] for r in results], out)
    for run_dir, metrics in results:
        status = f"AP50={metrics['AP50']:.3f}" if metrics else "FAILED"
        print(f"{run_dir}: {status}")
    print(f"report in {out}/comparison.csv")
    return 0


def cmd_report(args, rest) -> int:
    if rest:
        raise ConfigError(f"unexpected arguments: {rest}")
    out = Path(args.out or artifacts_root() / "report")
    rows = emit_report(args.runs, out)
    for row in rows:
        print(row)
    print(f"report in {out}")
    return 0


def cmd_grad_check(args, rest) -> int:
    if rest:
        raise ConfigError(f"unexpected arguments: {rest}")
    from .gradcheck import grad_check
    from .testutil import head_loss_fn, make_gradcheck_head

    head, pyramid, leaves = make_gradcheck_head(args.seed)
    report = grad_check(head_loss_fn(head, pyramid), leaves,
                        max_entries_per_leaf=4, rng=np.random.default_rng(args.seed))
    print(report)
    return 0 if report.passed else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="tscode",
                                     description="desk-scale detector lab")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one experiment and evaluate it")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("flops", help="analytic MAC/parameter accounting")
    p.add_argument("--config")
    p.add_argument("--out", help="write per-layer CSV here")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("sweep", help="run one experiment per override value")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--param", required=True, help="dotted config key, e.g. head.dpe_levels")
    p.add_argument("--values", required=True, help="|-separated YAML values")
    p.add_argument("--out")
    p.add_argument("--processes", type=int, default=2)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="merge finished runs into a comparison")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("grad-check", help="verify head gradients against finite differences")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grad_check)

    args, rest = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, rest)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DivergenceError as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
