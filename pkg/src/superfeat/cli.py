"""Command-line entry point.

Subcommands cover the whole pipeline: gen-data, train, fit-whitening,
fit-codebook, index, search, eval, diagnose, ablate.  Exit status 0 on
success, 2 for configuration errors (message names the offending key), 1
for runtime failures (message names the error class).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from . import ablation, pipeline
from .config import RunConfig, apply_overrides, load_config
from .errors import ConfigError, SuperfeatError

log = logging.getLogger(__name__)

COMMANDS = ("gen-data", "train", "fit-whitening", "fit-codebook", "index",
            "search", "eval", "diagnose", "ablate")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="superfeat",
        description="Ordered mid-level feature retrieval pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, default=None,
                       help="YAML config file (defaults used when omitted)")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE",
                       help="dotted-key override, e.g. train.epochs=5")
        p.add_argument("--seed", type=int, default=None,
                       help="shorthand for --set seed=N")
        p.add_argument("--runs-root", type=Path, default=None,
                       help="artifact root (default $SUPERFEAT_RUN_ROOT or ./runs)")
        return p

    common(sub.add_parser("gen-data", help="materialize the synthetic splits"))
    p = common(sub.add_parser("train", help="train encoder + templates"))
    p.add_argument("--force", action="store_true", help="retrain even if cached")
    common(sub.add_parser("fit-whitening", help="fit frozen whitening standalone"))
    p = common(sub.add_parser("fit-codebook", help="train the visual-word codebook"))
    p.add_argument("--force", action="store_true")
    p = common(sub.add_parser("index", help="build the inverted file"))
    p.add_argument("--force", action="store_true")
    p = common(sub.add_parser("search", help="rank the corpus for query images"))
    p.add_argument("--queries", default=None,
                   help="comma-separated query image ids (default: all)")
    p.add_argument("--top-m", type=int, default=None)
    common(sub.add_parser("eval", help="leave-one-out mAP over the eval split"))
    common(sub.add_parser("diagnose", help="analysis tables and figures"))
    p = common(sub.add_parser("ablate", help="run a config grid"))
    p.add_argument("--grid", type=Path, required=True,
                   help="YAML grid: list of override cells or key -> values")
    return parser


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg


def dispatch(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
        root = pipeline.run_root(args.runs_root)
        root.mkdir(parents=True, exist_ok=True)
        if args.command == "gen-data":
            pipeline.cmd_gen_data(cfg, root)
        elif args.command == "train":
            path = pipeline.cmd_train(cfg, root, force=args.force)
            print(f"checkpoint: {path}")
        elif args.command == "fit-whitening":
            print(f"whitening: {pipeline.cmd_fit_whitening(cfg, root)}")
        elif args.command == "fit-codebook":
            print(f"codebook: {pipeline.cmd_fit_codebook(cfg, root, force=args.force)}")
        elif args.command == "index":
            print(f"index: {pipeline.cmd_index(cfg, root, force=args.force)}")
        elif args.command == "search":
            queries = args.queries.split(",") if args.queries else None
            print(f"rankings: {pipeline.cmd_search(cfg, root, queries, args.top_m)}")
        elif args.command == "eval":
            summary = pipeline.cmd_eval(cfg, root)
            print(json.dumps(summary, indent=2))
        elif args.command == "diagnose":
            outputs = pipeline.cmd_diagnose(cfg, root)
            print(f"diagnostics: {outputs['directory']}")
        elif args.command == "ablate":
            grid = yaml.safe_load(args.grid.read_text())
            rows = ablation.ablation_harness(cfg, grid, root)
            failed = sum(1 for r in rows if r["status"] != "ok")
            print(f"ablation: {len(rows)} cells, {failed} failed")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except SuperfeatError as exc:
        print(f"error {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    logging.basicConfig(level=logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
