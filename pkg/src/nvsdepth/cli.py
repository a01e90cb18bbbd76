"""Command-line entry point: ``nvsdepth <command> [flags]``.

Exit codes: 0 success, 2 numerical failure, 64 usage error, 66 input-file error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .data import io
from .data.dataset import generate_dataset, load_dataset, load_sample, write_dataset
from .data.synthetic import SceneConfig
from .errors import ConfigurationError, DegenerateInputError, IngestionError, NumericalError
from .geometry import relative_pose
from .metrics import compute_metrics, error_map, false_color, mean_metrics, parse_range
from .trainer import (
    ABLATION_COLUMNS,
    MODES,
    TrainConfig,
    gt_oracle,
    load_predictor,
    predict_depth,
    read_config_file,
    run_ablation,
    train,
)
from .warp import forward_warp

EXIT_OK = 0
EXIT_NUMERICAL = 2
EXIT_USAGE = 64
EXIT_INPUT = 66

log = logging.getLogger("nvsdepth")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v <= 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nvsdepth", description="Depth estimation trained through a differentiable novel-view "
                "synthesis pipeline (DepNet -> forward warp -> SynNet -> DepNet).")
    p.add_argument("--log-level", default="WARNING", help="python logging level (default WARNING)")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen-data", help="write a synthetic two-view dataset with a manifest",
                       description="Render procedural two-view scenes with exact depth and write one "
                       "directory per sample plus manifest.txt. Deterministic in --seed.")
    g.add_argument("--config", type=Path, help="scene config file (key=value lines, # comments)")
    g.add_argument("--out", type=Path, required=True, help="output dataset directory")
    g.add_argument("--count", type=_positive_int, default=200, help="number of samples (default 200)")
    g.add_argument("--seed", type=int, default=0, help="generator seed (default 0)")

    t = sub.add_parser("train", help="train DepNet (and SynNet) on a dataset",
                       description="Joint Adam training. Writes checkpoint.nvsd every epoch, "
                       "loss_log.csv (step,l1,l2,l3,total) and val_log.csv.")
    t.add_argument("--config", type=Path, help="training config file (key=value lines, # comments)")
    t.add_argument("--data", type=Path, required=True, help="dataset directory holding manifest.txt")
    t.add_argument("--mode", choices=MODES, help="pipeline variant (overrides the config file)")
    t.add_argument("--out", type=Path, required=True, help="run directory for checkpoint and logs")
    t.add_argument("--epochs", type=int, help="override the number of epochs")
    t.add_argument("--seed", type=int, help="override the training seed")
    t.add_argument("--max-steps", type=_positive_int, help="stop after this many optimizer steps")
    t.add_argument("--all-train", action="store_true",
                   help="train on every sample in the manifest instead of the train split")

    e = sub.add_parser("eval", help="evaluate DepNet on a dataset split",
                       description="Runs DepNet alone and prints the seven metrics as JSON "
                       "(mean of per-image metrics).")
    e.add_argument("--checkpoint", type=Path, required=True, help="training checkpoint (or gt_oracle stub)")
    e.add_argument("--data", type=Path, required=True, help="dataset directory holding manifest.txt")
    e.add_argument("--split", choices=("train", "val", "test", "all"), default="test",
                   help="which split to evaluate (default test)")
    e.add_argument("--range", default="nyu", help="'kitti', 'nyu' or 'min,max' meters (default nyu)")
    e.add_argument("--out", type=Path, help="also write metrics.csv, metrics.json and per-image error maps here")

    w = sub.add_parser("warp", help="forward-warp a sample's first view into the second",
                       description="Splat rgb1 with its ground-truth depth into view 2 and write "
                       "warped.ppm, warped_depth.pfm and mask.pgm.")
    w.add_argument("--sample", type=Path, required=True, help="sample directory")
    w.add_argument("--out", type=Path, required=True, help="output directory")
    w.add_argument("--splat", choices=("bilinear", "nearest"), default="bilinear", help="splat kernel")

    c = sub.add_parser("gradcheck", help="64-bit finite-difference check of the whole pipeline",
                       description="Compares analytic and central-difference gradients of the total "
                       "loss for 10 DepNet weights, 10 SynNet weights and 20 injected depth pixels. "
                       "Exit 0 iff the max relative deviation is below 1e-3.")
    c.add_argument("--seed", type=int, default=0, help="probe and scene seed (default 0)")
    c.add_argument("--verbose", action="store_true", help="print every probe")

    a = sub.add_parser("ablate", help="train all three variants and compare them on the test split",
                       description="Trains depnet_only, depnet_synnet and full with identical seeds and "
                       "sample order, then writes ablation.csv (mode + seven metrics).")
    a.add_argument("--config", type=Path, help="training config file (key=value lines, # comments)")
    a.add_argument("--data", type=Path, required=True, help="dataset directory holding manifest.txt")
    a.add_argument("--out", type=Path, required=True, help="output directory")
    a.add_argument("--epochs", type=int, help="override the number of epochs")
    a.add_argument("--seed", type=int, help="override the training seed")
    return p


def _train_config(args) -> TrainConfig:
    cfg = TrainConfig.from_dict(read_config_file(args.config)) if args.config else TrainConfig()
    over = {}
    for key in ("mode", "epochs", "seed"):
        if getattr(args, key, None) is not None:
            over[key] = getattr(args, key)
    return replace(cfg, **over)


def cmd_gen_data(args) -> int:
    cfg = SceneConfig.from_dict(read_config_file(args.config)) if args.config else SceneConfig()
    splits = generate_dataset(cfg, args.count, args.seed)
    samples = splits.train + splits.val + splits.test
    write_dataset(args.out, samples)
    print(f"wrote {len(samples)} samples to {args.out} "
          f"(train {len(splits.train)}, val {len(splits.val)}, test {len(splits.test)})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _train_config(args)
    splits = load_dataset(args.data)
    data = splits.train + splits.val + splits.test if args.all_train else splits
    result = train(cfg, data, args.out, max_steps=args.max_steps)
    last_step, last = result.record.steps[-1] if result.record.steps else (0, None)
    if last is not None:
        print(f"step {last_step}: l1={last.l1:.6f} total={last.total:.6f}")
    print(f"checkpoint: {result.checkpoint}")
    return EXIT_OK


def cmd_eval(args) -> int:
    rng = parse_range(args.range)
    splits = load_dataset(args.data)
    samples = splits.train + splits.val + splits.test if args.split == "all" else splits[args.split]
    if not samples:
        raise DegenerateInputError(f"split {args.split!r} is empty")
    model = load_predictor(args.checkpoint)
    preds = gt_oracle(samples) if model is gt_oracle else predict_depth(model, samples)
    per_image = [compute_metrics(p, s.depth1, rng) for p, s in zip(preds, samples)]
    report = mean_metrics(per_image)
    print(report.to_json())
    if args.out is not None:
        out = args.out
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(report.to_json() + "\n")
        (out / "metrics.csv").write_text(report.csv_header() + "\n" + report.csv_row() + "\n")
        for p, s in zip(preds, samples):
            err, _ = error_map(p, s.depth1, rng)
            io.write_pfm(out / f"error_{s.id}.pfm", err.astype(np.float32))
            io.write_ppm(out / f"error_{s.id}.ppm", false_color(err, rng.max_depth))
    return EXIT_OK


def cmd_warp(args) -> int:
    s = load_sample(args.sample)
    res = forward_warp(s.rgb1, s.depth1, s.intrinsics, relative_pose(s.pose1, s.pose2),
                       mode=args.splat, record=False)
    args.out.mkdir(parents=True, exist_ok=True)
    io.write_ppm(args.out / "warped.ppm", res.image)
    io.write_pfm(args.out / "warped_depth.pfm", res.depth)
    io.write_pgm(args.out / "mask.pgm", res.hit_mask)
    print(f"warped {s.id}: {int(res.hit_mask.sum())} of {res.hit_mask.size} target pixels hit")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    report = run_gradcheck(seed=args.seed)
    if args.verbose:
        for p in report.probes:
            tag = "excluded" if p.excluded else f"dev {p.deviation:.2e}"
            print(f"{p.group:7s} {p.name:22s} {str(p.index):18s} analytic {p.analytic:+.6e} "
                  f"numeric {p.numeric:+.6e} {tag}")
    print(report.summary())
    print(f"max_relative_deviation={report.max_deviation:.6e}")
    return EXIT_OK if report.passed else EXIT_NUMERICAL


def cmd_ablate(args) -> int:
    cfg = _train_config(args)
    splits = load_dataset(args.data)
    res = run_ablation(cfg, splits, args.out)
    print(",".join(ABLATION_COLUMNS))
    for row in res.table():
        print(row[0] + "," + ",".join(f"{v:.6f}" for v in row[1:]))
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "warp": cmd_warp,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except NumericalError as exc:
        print(f"nvsdepth: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except IngestionError as exc:
        print(f"nvsdepth: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except DegenerateInputError as exc:
        print(f"nvsdepth: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ConfigurationError as exc:
        print(f"nvsdepth: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"nvsdepth: I/O error: {exc.filename or ''}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
