"""Command-line entry point: ``poseface <subcommand> [--config PATH] [--seed N] [--out DIR]``.

Exit codes: 0 success, 2 configuration error, 3 missing artifact, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline as P
from .config import RunConfig, load_config, with_values
from .errors import ConfigError, MissingArtifactError, NumericError

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("-v", "--verbose", action="store_true", help="log per-epoch losses")

    parser = _Parser(prog="poseface", description="Pose-disentangled recognition on a synthetic benchmark.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen-data", parents=[common], help="generate the synthetic dataset and verification pairs")
    sub.add_parser("pretrain-ae", parents=[common], help="pretrain and freeze the landmark autoencoder")
    sub.add_parser("train", parents=[common], help="train the recognition model and write a report")
    for name, text in (("eval", "evaluate a checkpoint"), ("probe-orth", "write the F_i/F_p inner-product matrix")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--checkpoint", help="model file (default: OUT/model.bin)")
        if name == "probe-orth":
            p.add_argument("--samples", type=int, help="number of test samples to probe")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every loss")
    p = sub.add_parser("sweep", parents=[common], help="train once per value of lambda1 or lambda2")
    p.add_argument("--param", choices=("lambda1", "lambda2"), help="multiplier to sweep")
    p.add_argument("--values", help="comma-separated grid, e.g. 0,1e3,1e5")
    return parser


def resolve_config(args) -> RunConfig:
    overrides = {"seed": args.seed, "out": args.out}
    if args.config:
        return load_config(args.config, **overrides)
    return with_values(RunConfig(), **{k: v for k, v in overrides.items() if v is not None})


def _parse_grid(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"bad --values grid: {text!r}") from None


def dispatch(args) -> int:
    cfg = resolve_config(args)
    cmd = args.command
    if cmd == "gen-data":
        ds = P.run_gen_data(cfg)
        print(f"wrote {len(ds.train)} training and {len(ds.test)} test samples to {cfg.artifact_dir}")
    elif cmd == "pretrain-ae":
        rep = P.run_pretrain_ae(cfg)
        r = rep.result
        print(f"holdout loss {r.holdout_initial:.4g} -> {r.holdout_final:.4g} "
              f"(ratio {r.holdout_final / r.holdout_initial:.3f}); min code distance {rep.code_min_distance:.3g}")
    elif cmd == "train":
        report = P.run_train(cfg)
        print(P._metrics_table(report.metrics), end="")
    elif cmd == "eval":
        ev = P.run_eval(cfg, args.checkpoint)
        print(P._metrics_table(ev.metrics), end="")
    elif cmd == "probe-orth":
        probe = P.run_probe_orth(cfg, args.checkpoint, args.samples)
        print(f"max |cos| {probe.max:.3e}  min |cos| {probe.min:.3e}")
    elif cmd == "gradcheck":
        rows, ok = P.run_gradcheck_report(args.out, cfg.seed)
        for name, err in rows:
            print(f"{name:<18} {err:.3e}")
        if not ok:
            print("gradient check FAILED", file=sys.stderr)
            return EXIT_NUMERIC
    elif cmd == "sweep":
        values = _parse_grid(args.values) if args.values else None
        P.run_sweep(cfg, args.param, values)
        print((Path(cfg.out) / "sweep.txt").read_text(), end="")
    return EXIT_OK


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return dispatch(args)
    except ConfigError as exc:
        print(f"poseface: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactError as exc:
        print(f"poseface: missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (NumericError, FloatingPointError) as exc:
        print(f"poseface: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
