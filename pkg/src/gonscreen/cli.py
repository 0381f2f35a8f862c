"""``gonscreen`` command line: synth, gate, split, train, eval, compare, report.

Exit status is 0 on success, 2 for invalid input or configuration and 1 for
any other failure (including a missing upstream artifact).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline
from .registry import ManifestError

log = logging.getLogger("gonscreen")


def build_parser():
    p = argparse.ArgumentParser(prog="gonscreen", description="Glaucoma screening benchmark pipeline.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="run seed (overrides the config)")
    common.add_argument("--out", default="run", help="run directory (default: ./run)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate the synthetic multi-domain benchmark")
    sub.add_parser("gate", parents=[common], help="quality and optic disc gating")
    sub.add_parser("split", parents=[common], help="labels, exclusions, anchor split, LODO partitions")
    t = sub.add_parser("train", parents=[common], help="train SSD or MSD models")
    t.add_argument("--mode", choices=("ssd", "msd"), required=True)
    t.add_argument("--target", help="MSD target domain (default: every domain)")
    sub.add_parser("eval", parents=[common], help="score datasets, bootstrap CIs, ROC/KDE plots")
    sub.add_parser("compare", parents=[common], help="paired bootstrap comparisons against MSD")
    sub.add_parser("report", parents=[common], help="results table and flow report")
    return p


def run_command(args):
    cfg = pipeline.load_config(args.config, args.seed)
    run = pipeline.Run(args.out, cfg)
    if args.command == "synth":
        return pipeline.cmd_synth(run)
    if args.command == "gate":
        return pipeline.cmd_gate(run)
    if args.command == "split":
        return pipeline.cmd_split(run)
    if args.command == "train":
        return pipeline.cmd_train(run, args.mode, args.target)
    if args.command == "eval":
        return {"reports": len(pipeline.cmd_eval(run))}
    if args.command == "compare":
        return {"comparisons": len(pipeline.cmd_compare(run))}
    if args.command == "report":
        return pipeline.cmd_report(run)["cells"]
    raise pipeline.ConfigError(f"unknown command {args.command!r}")


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        summary = run_command(args)
    except (pipeline.ConfigError, ManifestError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(json.dumps(summary, indent=2, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
