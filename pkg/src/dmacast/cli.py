"""Command-line entry point: ``dmacast <subcommand> --config cfg.yaml [--set key=value ...]``."""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .data import DataError

EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_DATA = 4

HELP = {
    "synth-generate": "generate the synthetic DMA described by data.synthetic",
    "ingest": "parse, gap-fill and split meter and weather CSVs",
    "train-repr": "train the contrastive profile encoder",
    "embed": "write one embedding per meter",
    "cluster": "select k, cluster embeddings and write cluster demand",
    "train-forecast": "select the wavelet and train the forecasting models",
    "evaluate": "rolling-origin evaluation over the test range",
    "compare": "comparison table across evaluated models",
    "plot": "demand-vs-forecast and per-cluster demand figures",
    "run": "every step above in order",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="YAML or JSON config (default: built-in defaults)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. --set forecast.max_epochs=5")
    common.add_argument("--run-dir", help="use this directory instead of <output.root>/<name>-<hash>")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="dmacast", description="Cluster-aware DMA demand forecasting.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, text in HELP.items():
        p = sub.add_parser(name, parents=[common], help=text, description=text)
        if name in ("train-forecast", "evaluate"):
            p.add_argument("--models", nargs="+", choices=sorted(pipeline.MODELS),
                           help="subset of forecast.models")
        if name == "run":
            p.add_argument("--no-plots", action="store_true", help="skip figure generation")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = pipeline.load_config(args.config, args.overrides)
        run = pipeline.Run(cfg, args.run_dir)
        run.init()
        if args.command == "run":
            paths = pipeline.run_all(run, with_plots=not args.no_plots)
        elif args.command in ("train-forecast", "evaluate"):
            paths = pipeline.STAGES[args.command](run, args.models)
        else:
            paths = pipeline.STAGES[args.command](run)
    except pipeline.ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"dmacast: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except pipeline.MissingArtifactError as exc:
        print(f"dmacast: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (DataError, ValueError) as exc:
        print(f"dmacast: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(run.dir)
    for p in paths:
        print(f"  {p.relative_to(run.dir)}")
    if args.command in ("compare", "run") and run.path("comparison.txt").exists():
        print(run.path("comparison.txt").read_text(), end="")
    return 0


if __name__ == "__main__":
    sys.exit(main())
