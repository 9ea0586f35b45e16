"""Command line: ``python -m cagul_lab <command> [--config FILE] [--out DIR] [overrides]``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

from . import autodiff, cagul, harness, vlm
from .data import DataError

COMMANDS = ("datagen", "finetune", "unlearn", "eval", "probe-attention", "sweep")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cagul_lab", description="Attention-guided visual-token unlearning on a toy VLM.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="flat key = value file; flags override it")
        s.add_argument("--out", default="runs", help="artifact directory (default: runs)")
        s.add_argument("-v", "--verbose", action="store_true")
        for f in dataclasses.fields(harness.ExperimentConfig):
            s.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=type(f.default), default=None)
        if name == "probe-attention":
            s.add_argument("--layer", type=int, default=0)
        if name == "sweep":
            s.add_argument("--param", required=True, choices=("k", "m_tilde"))
            s.add_argument("--values", required=True, help="comma-separated integers")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    overrides = {f.name: getattr(args, f.name) for f in dataclasses.fields(harness.ExperimentConfig)}
    try:
        cfg = harness.load_config(args.config, overrides)
        ws = harness.Workspace(args.out, cfg)
        if args.command == "datagen":
            ds = harness.run_datagen(ws)
            print(f"{len(ds.records)} records, {len(ds.general)} general -> {ws.out / 'data'}")
        elif args.command == "finetune":
            _, entry = harness.run_finetune(ws)
            print(f"base model -> {ws.out / 'models' / 'finetune.tvlm'} "
                  f"({entry['params_trainable']} trainable parameters)")
        elif args.command == "unlearn":
            name, entry = harness.run_unlearn(ws)
            print(f"{name}: {entry['params_trainable']} trainable parameters, "
                  f"{entry['seconds_per_epoch']:.3f} s/epoch")
        elif args.command == "eval":
            harness.run_eval(ws)
            print((ws.out / "reports" / f"{harness.tag(cfg)}.txt").read_text(), end="")
        elif args.command == "probe-attention":
            print(harness.run_probe(ws, args.layer))
        elif args.command == "sweep":
            try:
                values = [int(v) for v in args.values.split(",") if v.strip()]
            except ValueError:
                raise harness.UsageError(f"--values must be comma-separated integers, got {args.values!r}") from None
            harness.run_sweep(ws, args.param, values)
            print((ws.out / "sweep" / f"{args.param}.txt").read_text(), end="")
    except (harness.UsageError, vlm.ConfigError, DataError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (vlm.TrainingError, cagul.CagulError, autodiff.NumericError, FloatingPointError) as e:
        print(f"training failed: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
