"""Command-line interface.

One subcommand per pipeline stage plus ``run-all`` and ``scenario``. Exit
codes: 0 success, 2 configuration error, 3 backend failure, 4 missing
upstream artifact.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .config import available_presets, load_config
from .errors import BackendError, ConfigError, FeatureProbeError, MissingArtifactError

log = logging.getLogger("featureprobe")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_BACKEND = 3
EXIT_MISSING_ARTIFACT = 4

_STAGE_RUNNERS = {
    "scenario": pipeline.stage_scenario,
    "screen": pipeline.stage_screen,
    "mine": pipeline.stage_mine,
    "attribute": pipeline.stage_attribute,
    "explore": pipeline.stage_explore,
    "repair": pipeline.stage_repair,
    "report": pipeline.stage_report,
    "run-all": pipeline.run_all,
}

_STAGE_HELP = {
    "scenario": "build and persist the synthetic scenario (generator + toy SUT)",
    "screen": "compute per-channel sensitivity scores and candidate sets",
    "mine": "probe candidates under the confidence oracle",
    "attribute": "judge influential channels relevant/spurious",
    "explore": "probe relevant channels under the misclassification oracle "
               "and refine to the decision boundary",
    "repair": "assemble the repair set and fine-tune the SUT head",
    "report": "aggregate metrics, tables, and plots",
    "run-all": "run every stage in order",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="featureprobe",
        description="Feature-aware test generation for vision models: "
                    "single-channel latent perturbation, spurious-channel "
                    "mining, decision-boundary tests, and repair sets.",
        epilog=f"presets: {', '.join(available_presets())}",
    )
    parser.add_argument("--version", action="version",
                        version="%(prog)s " + _version())
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _STAGE_RUNNERS:
        cmd = sub.add_parser(name, help=_STAGE_HELP[name])
        _add_config_flags(cmd)
    return parser


def _version() -> str:
    from importlib.metadata import PackageNotFoundError, version
    try:
        return version("featureprobe")
    except PackageNotFoundError:
        return "unknown"


def _add_config_flags(cmd: argparse.ArgumentParser) -> None:
    cmd.add_argument("-c", "--config", metavar="FILE",
                     help="YAML configuration file")
    cmd.add_argument("-p", "--preset", metavar="NAME",
                     help="named preset applied under the config file")
    cmd.add_argument("--set", dest="overrides", action="append",
                     default=[], metavar="KEY=VALUE",
                     help="override one config value (dotted key, YAML "
                          "scalar); repeatable")
    cmd.add_argument("-o", "--output-dir", metavar="DIR",
                     help="artifact directory (shorthand for --set "
                          "output_dir=DIR)")
    cmd.add_argument("--seeds", metavar="N|A,B,C",
                     help="seed count, or an explicit comma-separated list")
    cmd.add_argument("--workers", type=int, metavar="N",
                     help="seed-level parallel workers")
    cmd.add_argument("-v", "--verbose", action="store_true",
                     help="debug-level logging")


def _collect_overrides(args) -> list:
    overrides = list(args.overrides)
    if args.output_dir:
        overrides.append(f"output_dir={args.output_dir}")
    if args.workers is not None:
        overrides.append(f"workers={args.workers}")
    if args.seeds:
        if "," in args.seeds:
            overrides.append(f"seeds.list=[{args.seeds}]")
        else:
            overrides.append(f"seeds.count={args.seeds}")
            overrides.append("seeds.list=null")
    return overrides


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        config = load_config(args.config, preset=args.preset,
                             overrides=_collect_overrides(args))
        log.info("config hash %s -> %s", config.config_hash,
                 config.output_dir)
        _STAGE_RUNNERS[args.command](config)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except MissingArtifactError as exc:
        log.error("%s", exc)
        return EXIT_MISSING_ARTIFACT
    except BackendError as exc:
        log.error("backend error: %s", exc)
        return EXIT_BACKEND
    except FeatureProbeError as exc:
        log.error("%s", exc)
        return 1
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
