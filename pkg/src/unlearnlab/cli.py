"""Command line: ``unlearnlab <subcommand> --config cfg.json [--out DIR] [--seed N]``.

Exit codes: 0 success, 1 invalid config or input, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import glob
import logging
import os
import sys

from . import pipeline
from .config import ExperimentConfig
from .corpus import UnmatchedRecordError
from .errors import ConfigError, ContractViolation, PrerequisiteError, SchemaError

ROLES = ("original", "retained", "reinforce", "encoder")


def _parser():
    p = argparse.ArgumentParser(prog="unlearnlab", description="Desk-scale LLM unlearning experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_, config=True):
        sp = sub.add_parser(name, help=help_)
        if config:
            sp.add_argument("--config", help="experiment JSON (defaults apply to missing fields)")
            sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help="output directory (overrides the config's out)")
        return sp

    add("gen-corpus", "generate the synthetic corpus")
    sp = add("train", "train the original, retained, reinforce or encoder model")
    sp.add_argument("--role", choices=ROLES, required=True)
    sp.add_argument("--checkpoint", help="resume from this ckpt-*.npz")
    add("identify", "annotate the forget set with the configured identifier")
    sp = add("unlearn", "run the configured unlearning objective")
    sp.add_argument("--checkpoint", help="resume from this ckpt-unlearn-*.npz")
    sp = add("evaluate", "evaluate unlearning checkpoints")
    sp.add_argument("--checkpoint", help="glob of model files (default: this config's unlearning epochs)")
    add("run", "every stage in order, reusing artifacts that already exist")
    sp = add("report", "trade-off SVG and summary table from run CSVs", config=False)
    sp.add_argument("csv", nargs="+", help="run-*.csv files or globs")
    return p


def _config(args):
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.config:
        cfg = ExperimentConfig.load(args.config, overrides)
    else:
        cfg = ExperimentConfig(overrides)
    return cfg, pipeline.Workspace(cfg, args.out)


def _run_all(ws):
    if not os.path.exists(ws.corpus_path):
        pipeline.gen_corpus(ws)
    for role in ("original", "retained"):
        if not os.path.exists(ws.model_path(role)):
            pipeline.train(ws, role)
    if ws.cfg.objective().kind == "TaskVector" and not os.path.exists(ws.model_path("reinforce")):
        pipeline.train(ws, "reinforce")
    if ws.cfg.objective().reads_masks:
        pipeline.identify(ws)
    pipeline.run_unlearning(ws)
    return pipeline.evaluate(ws)


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "report":
            paths = sorted({p for pat in args.csv for p in (glob.glob(pat) or [pat])})
            svg, table = pipeline.report(paths, args.out or ".")
            print(svg)
            print(table)
            return 0
        cfg, ws = _config(args)
        if args.command == "gen-corpus":
            pipeline.gen_corpus(ws)
            print(ws.corpus_path)
        elif args.command == "train":
            pipeline.train(ws, args.role, args.checkpoint)
            print(ws.model_path(args.role))
        elif args.command == "identify":
            pipeline.identify(ws)
            print(ws.annotations_path)
        elif args.command == "unlearn":
            pipeline.run_unlearning(ws, args.checkpoint)
            print(ws.unlearn_dir)
        elif args.command == "evaluate":
            pipeline.evaluate(ws, args.checkpoint)
            print(ws.run_csv)
        elif args.command == "run":
            _run_all(ws)
            print(ws.run_csv)
        return 0
    except ConfigError as exc:
        print(f"config error at {exc.pointer or '/'}: {exc.message}", file=sys.stderr)
        return 1
    except (SchemaError, UnmatchedRecordError, ContractViolation) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return 1
    except PrerequisiteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
