"""Command-line entry point.

Exit status: 0 on success, 1 when a stage fails, 2 for usage or config errors.
"""
from __future__ import annotations

import argparse
import configparser
import logging
import sys
from pathlib import Path

from . import config as cfgmod
from .checkpoint import CheckpointError
from .pipeline import GKA_CLI, RATE_CLI, Pipeline, StageError


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gscsim", description="Edge/cloud generative semantic link simulator")
    parser.add_argument("--config", type=Path, help="INI config file (default: built-in desk defaults)")
    parser.add_argument("--seed", type=_u64, help="root seed; overrides [run] seed")
    parser.add_argument("--out", type=Path, help="output directory (default: runs/<run_id>)")
    parser.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.add_parser("synth-data", help="render the procedural cloud and edge datasets")
    sub.add_parser("pretrain-latent-codec", help="train the image <-> latent codec")
    sub.add_parser("train-cloud", help="train the large noise predictor on cloud-style latents")
    sub.add_parser("train-edge", help="train the small noise predictor on edge-style latents")
    sub.add_parser("pretrain-jscc", help="train the base JSCC codec at the reference channel condition")
    p = sub.add_parser("gka", help="align the edge generator to cloud samples, then generate edge latents")
    p.add_argument("--mode", choices=sorted(GKA_CLI), default="makd")
    p = sub.add_parser("tka-rate", help="variable-rate adapter fine-tuning")
    p.add_argument("--mode", choices=sorted(RATE_CLI), default="vr-alter")
    sub.add_parser("tka-snr", help="per-SNR-group LoRA adaptation")
    p = sub.add_parser("eval", help="PSNR over the rate and SNR grid")
    p.add_argument("--grid", action="store_true", help="also sweep every delay spread")
    p = sub.add_parser("transmit-demo", help="generate, transmit and decode a few images into a PNG")
    p.add_argument("--subject", type=int, default=0)
    p.add_argument("--rate-index", type=int, default=0)
    p.add_argument("--snr", type=float, default=None)
    p.add_argument("--delay-ns", type=float, default=None)
    p.add_argument("--count", type=int, default=6)
    sub.add_parser("plot", help="render SVG charts from the eval metrics")
    return parser


def load_config(args: argparse.Namespace) -> cfgmod.ExperimentConfig:
    cfg = cfgmod.load(args.config) if args.config else cfgmod.ExperimentConfig()
    if args.seed is not None:
        cfg.run.seed = args.seed
    return cfg


def run(args: argparse.Namespace, cfg: cfgmod.ExperimentConfig) -> None:
    pipe = Pipeline(cfg, args.out or Path("runs") / cfg.run.run_id)
    cmd = args.command
    if cmd == "synth-data":
        pipe.synth_data()
    elif cmd == "pretrain-latent-codec":
        pipe.pretrain_latent_codec()
    elif cmd == "train-cloud":
        pipe.train_cloud()
    elif cmd == "train-edge":
        pipe.train_edge()
    elif cmd == "pretrain-jscc":
        pipe.pretrain_jscc()
    elif cmd == "gka":
        pipe.gka(GKA_CLI[args.mode])
    elif cmd == "tka-rate":
        pipe.tka_rate(RATE_CLI[args.mode])
    elif cmd == "tka-snr":
        pipe.tka_snr()
    elif cmd == "eval":
        pipe.evaluate(args.grid)
    elif cmd == "transmit-demo":
        print(pipe.transmit_demo(args.subject, args.rate_index, args.snr, args.delay_ns, args.count))
    elif cmd == "plot":
        for path in pipe.plot():
            print(path)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args)
    except (ValueError, OSError, configparser.Error) as exc:
        print(f"gscsim: config error: {exc}", file=sys.stderr)
        return 2
    try:
        run(args, cfg)
    except (StageError, CheckpointError, ValueError, RuntimeError, KeyError, OSError) as exc:
        print(f"gscsim {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
