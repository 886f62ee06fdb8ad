"""Command-line entry point.

Subcommands: gen-data, train-texture, train, eval, render, check. Every run
is reproducible from its config file plus the seed; flag overrides go
through `--set path.to.field=value`. Exit codes: 0 success, 1 failed
check/run, 2 configuration error.
"""

from __future__ import annotations

import argparse
import os
import sys

from .config import ConfigError, load_run_config

__all__ = ["main", "build_parser"]


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", default=None, help="JSON config file")
    sub.add_argument("--set", dest="overrides", action="append", default=[],
                     metavar="PATH=VALUE", help="override one config field")
    sub.add_argument("--seed", type=int, default=None, help="root seed override")
    sub.add_argument("--out", default="run", help="artifact directory")
    sub.add_argument("--threads", type=int, default=None,
                     help="worker cap (default: VAN_THREADS or 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vanreid",
        description="Viewpoint-aligned person retrieval: synthetic corpus, "
                    "dual-stream training, and evaluation.")
    subs = parser.add_subparsers(dest="command", required=True)

    for name, text in (
        ("gen-data", "render the synthetic corpus and camera split"),
        ("train-texture", "fit the texture predictor on restyled triplets"),
        ("train", "train the dual-stream model on the train split"),
        ("eval", "score the query/gallery split and write metrics"),
        ("render", "write the four canonical views for one sample"),
        ("check", "run the verification suite"),
    ):
        sub = subs.add_parser(name, help=text)
        _add_common(sub)
        if name == "train":
            sub.add_argument("--epochs", type=int, default=None,
                             help="override the configured epoch count")
        if name == "render":
            sub.add_argument("--sample", type=int, required=True,
                             help="sample index from the manifest")
        if name == "check":
            sub.add_argument("--fast", action="store_true",
                             help="gradient/invariant subset only")
    return parser


def _threads(args) -> int:
    if args.threads is not None:
        value = args.threads
    else:
        raw = os.environ.get("VAN_THREADS", "1")
        try:
            value = int(raw)
        except ValueError as err:
            raise ConfigError(f"VAN_THREADS: expected an integer, got {raw!r}") from err
    if value < 1:
        raise ConfigError(f"threads must be positive, got {value}")
    return value


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args.config, args.overrides, args.seed)
        threads = _threads(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2

    from . import pipeline
    from .check import run_checks

    try:
        if args.command == "gen-data":
            manifest = pipeline.run_gen_data(cfg, args.out, threads)
            split = manifest.split
            print(f"wrote {len(manifest.samples)} images under {args.out} "
                  f"({len(split['train'])} train / {len(split['query'])} query / "
                  f"{len(split['gallery'])} gallery)")
        elif args.command == "train-texture":
            path = pipeline.run_train_texture(cfg, args.out)
            print(f"wrote {path}")
        elif args.command == "train":
            path = pipeline.run_train(cfg, args.out, threads, epochs=args.epochs)
            print(f"wrote {path}")
        elif args.command == "eval":
            pipeline.run_eval(cfg, args.out, threads)
        elif args.command == "render":
            for path in pipeline.run_render(cfg, args.out, args.sample, threads):
                print(path)
        elif args.command == "check":
            return run_checks(fast=args.fast)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
