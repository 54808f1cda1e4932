"""Command-line entry points: train-source, gen-stream, adapt, eval."""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .harness import load_config, run_experiment
from .source import train_source
from .streams import stream_manifest, write_manifest


def _add_common(sub, needs_checkpoint: bool):
    sub.add_argument("--config", type=Path, required=True, metavar="PATH",
                     help="flat key=value run configuration")
    sub.add_argument("--out", type=Path, default=None, metavar="DIR",
                     help="output directory (default: out_dir from the config)")
    sub.add_argument("--seed", type=int, default=None, metavar="N",
                     help="override the config seed")
    if needs_checkpoint:
        sub.add_argument("--checkpoint", type=Path, required=True, metavar="PATH",
                         help="source-stage checkpoint file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ttaswitch",
        description="Masked multi-task training plus continual test-time "
                    "adaptation with per-instance full/efficient tuning.")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_common(sub.add_parser("train-source",
                               help="train on the synthetic source domain"), False)
    _add_common(sub.add_parser("gen-stream",
                               help="write the target-stream manifest CSV"), False)
    _add_common(sub.add_parser("adapt",
                               help="adapt over the corrupted stream"), True)
    _add_common(sub.add_parser("eval",
                               help="evaluate the frozen checkpoint (no adaptation)"),
                True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    out = args.out if args.out is not None else Path(cfg.out_dir)

    if args.command == "train-source":
        path = train_source(cfg.model_config(), cfg.source_scenes, cfg.source_epochs,
                            cfg.batch_size, cfg.lr_source, cfg.seed, out,
                            optimizer_kind=cfg.optimizer, log_every=5)
        print(f"checkpoint written: {path}")
        return 0

    if args.command == "gen-stream":
        rows = stream_manifest(cfg.domains, cfg.per_domain, cfg.rounds, cfg.seed)
        out.mkdir(parents=True, exist_ok=True)
        path = write_manifest(rows, out / "stream_manifest.csv")
        print(f"manifest written: {path} ({len(rows)} instances)")
        return 0

    if args.command == "eval":
        cfg = replace(cfg, mode="no-adapt")
    result = run_experiment(cfg, args.checkpoint, out)
    print((result.out_dir / "summary.txt").read_text(), end="")
    return 0


if __name__ == "__main__":
    sys.exit(main())
