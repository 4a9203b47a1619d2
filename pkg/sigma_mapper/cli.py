"""
Command-line interface for Sigma Mapper
Parses the verbs synth/train/estimate/evaluate/denoise/report,
builds the run configuration and maps failures to exit codes.
"""

import argparse
import logging
import sys
from typing import Dict, List, Optional

from . import __version__
from .config import EPS_M_AGGREGATIONS, EXIT_IO, EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE, TEST_MAP_MODELS, Config
from .errors import FormatError, NumericalError, SigmaMapperError, UsageError
from .lab import MAP_SOURCES, NoiseLab, read_suite
from .patch_pipeline import read_manifest

logger = logging.getLogger(__name__)

BASELINES = ("local_dct", "truth")


def _csv_list(raw: str) -> List[str]:
    return [v.strip() for v in raw.split(",") if v.strip()]


def _float_list(raw: str) -> List[float]:
    try:
        return [float(v) for v in _csv_list(raw)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {raw!r}")


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Key=value config file with sections")
    common.add_argument("--seed", type=int, help="Global seed (default from config or SIGMA_MAPPER_SEED)")
    common.add_argument("--out", help="Output directory (default: runs)")
    common.add_argument("--manifest", help="Plain-text list of image paths")
    common.add_argument("--verbose", action="store_true", help="Debug logging")
    common.add_argument("--quiet", action="store_true", help="Warnings only, no progress bars or summaries")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(
        prog="sigma_mapper",
        description="Sigma Mapper - simulate non-stationary Gaussian noise, estimate sigma-maps and evaluate them",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", parents=[common], help="Generate noisy test images and ground-truth maps")
    synth.add_argument("--sigma-av", type=_float_list, help="Comma-separated sigma_av levels")
    synth.add_argument("--model", help=f"Comma-separated map models ({', '.join(TEST_MAP_MODELS)})")
    synth.add_argument("--clip", action="store_true", default=None, help="Clamp noisy pixels to [0, 255]")

    train = sub.add_parser("train", parents=[common], help="Train the CNN estimator")
    train.add_argument("--checkpoint", help="Checkpoint to resume from")
    train.add_argument("--iterations", type=int, help="Total iterations")
    train.add_argument("--batch", type=int, help="Minibatch size (even)")
    train.add_argument("--patch", type=int, help="Patch size (multiple of 8)")
    train.add_argument("--downscale", type=int, default=1, help="Average corpus images by this factor on load")

    estimate = sub.add_parser("estimate", parents=[common], help="Estimate sigma-maps of images")
    estimate.add_argument("images", nargs="*", help="Input images (in addition to --manifest)")
    estimate.add_argument("--checkpoint", help="Estimator checkpoint")
    estimate.add_argument("--baseline", choices=["local_dct"], help="Use the classical estimator instead")
    estimate.add_argument("--suite", help="Synth manifest CSV whose noisy images to estimate")
    estimate.add_argument("--tile", type=int, help="Inference tile size")

    evaluate = sub.add_parser("evaluate", parents=[common], help="Score estimators against ground truth")
    evaluate.add_argument("--checkpoint", help="Evaluate the CNN estimator from this checkpoint")
    evaluate.add_argument("--baseline", help=f"Comma-separated baselines ({', '.join(BASELINES)})")
    evaluate.add_argument("--suite", help="Synth manifest CSV (default: <out>/synth_manifest.csv)")
    evaluate.add_argument("--awgn", action="store_true", help="Constant-map mode over --manifest images")
    evaluate.add_argument("--sigma-t", type=_float_list, help="Comma-separated sigma_t levels (AWGN mode)")
    evaluate.add_argument("--tile", type=int, help="Inference tile size")
    evaluate.add_argument("--aggregation", choices=EPS_M_AGGREGATIONS,
                          help="How eps_m pools the maps of a group (default: per_image)")

    denoise = sub.add_parser("denoise", parents=[common], help="Denoise the test suite with chosen sigma-maps")
    denoise.add_argument("--map-source", default="true",
                         help=f"Comma-separated map sources ({', '.join(MAP_SOURCES)}; default: true)")
    denoise.add_argument("--checkpoint", help="Estimator checkpoint for the 'checkpoint' source")
    denoise.add_argument("--maps", help="Directory of <image_id>.smap files for the 'file' source")
    denoise.add_argument("--suite", help="Synth manifest CSV (default: <out>/synth_manifest.csv)")
    denoise.add_argument("--tile", type=int, help="Inference tile size")

    report = sub.add_parser("report", parents=[common], help="Pivot report CSVs into tables")
    report.add_argument("reports", nargs="*", help="Report CSVs (default: those in --out)")
    report.add_argument("--aggregation", choices=EPS_M_AGGREGATIONS, help="How eps_m pools the maps of a group")
    return parser


def build_config(args: argparse.Namespace) -> Config:
    """Defaults, then the config file, then command-line flags"""
    config = Config.from_file(args.config)
    overrides: Dict[str, object] = {
        "global.seed": args.seed,
        "global.out": args.out,
        "global.manifest": args.manifest,
        "noise.sigma_av": getattr(args, "sigma_av", None),
        "noise.sigma_t": getattr(args, "sigma_t", None),
        "noise.clip": getattr(args, "clip", None),
        "schedule.iterations": getattr(args, "iterations", None),
        "schedule.batch": getattr(args, "batch", None),
        "schedule.patch": getattr(args, "patch", None),
        "estimator.tile": getattr(args, "tile", None),
        "metrics.aggregation": getattr(args, "aggregation", None),
    }
    model = getattr(args, "model", None)
    if model is not None:
        overrides["noise.models"] = _csv_list(model)
    config.apply_overrides(overrides)
    config.validate()
    return config


def setup_logging(args: argparse.Namespace, config: Config):
    if args.verbose:
        level = logging.DEBUG
    elif args.quiet:
        level = logging.WARNING
    else:
        level = getattr(logging, str(config.get("global", "log_level")).upper(), logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def run(args: argparse.Namespace) -> int:
    config = build_config(args)
    setup_logging(args, config)
    lab = NoiseLab(config, progress=not args.quiet, verbose=not args.quiet)

    if args.command == "synth":
        lab.synth()
    elif args.command == "train":
        lab.train(checkpoint=args.checkpoint, downscale=args.downscale)
    elif args.command == "estimate":
        inputs = list(args.images)
        if config.get("global", "manifest"):
            inputs += read_manifest(config.get("global", "manifest"))
        if args.suite:
            inputs += list(read_suite(args.suite)["raw_path"])
        lab.estimate(inputs, checkpoint=args.checkpoint, method=args.baseline or "cnn")
    elif args.command == "evaluate":
        methods = (["cnn"] if args.checkpoint else []) + (_csv_list(args.baseline) if args.baseline else [])
        unknown = [m for m in methods if m not in ("cnn",) + BASELINES]
        if unknown:
            raise UsageError(f"Unknown baseline(s): {', '.join(unknown)}")
        lab.evaluate(methods, checkpoint=args.checkpoint, suite=args.suite, awgn=args.awgn)
    elif args.command == "denoise":
        lab.denoise(_csv_list(args.map_source), checkpoint=args.checkpoint, suite=args.suite, maps_dir=args.maps)
    else:
        lab.report(args.reports)
    return EXIT_OK


def exit_code(error: BaseException) -> int:
    """Exit code for a failure: 2 usage/parameter, 3 I/O or format, 4 numerical"""
    if isinstance(error, (NumericalError, FloatingPointError)):
        return EXIT_NUMERICAL
    if isinstance(error, (FormatError, OSError)):
        return EXIT_IO
    return EXIT_USAGE


def main(argv: Optional[List[str]] = None) -> int:
    """
    Main CLI entry point
    """
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return run(args)
    except KeyboardInterrupt:
        print("\nOperation cancelled by user", file=sys.stderr)
        return 1
    except (SigmaMapperError, OSError, FloatingPointError) as e:
        logger.debug("Command %s failed", args.command, exc_info=True)
        print(f"Error: {e}", file=sys.stderr)
        return exit_code(e)
