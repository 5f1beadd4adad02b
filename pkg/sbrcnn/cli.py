"""
Command-line entry point

    python -m sbrcnn <command> [--config run.json] [--section.key=value ...]

Exit codes: 0 ok, 1 user error (bad config, missing file, bad checkpoint), 2 internal error.
"""
import argparse
import sys
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import structlog

from sbrcnn import __version__
from sbrcnn.analysis import plot_csv
from sbrcnn.config import get_settings, load_experiment_config
from sbrcnn.exceptions import ConfigError, SBRCNNError
from sbrcnn.log import configure_logging
from sbrcnn.services.export_service import ExportService
from sbrcnn import tasks

logger = structlog.get_logger(__name__)

EXIT_OK = 0
EXIT_USER_ERROR = 1
EXIT_INTERNAL_ERROR = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise ConfigError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sbrcnn", description="Looped two-stage instance segmentation on synthetic shapes")
    parser.add_argument("--version", action="version", version=f"sbrcnn {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="JSON experiment config; --section.key=value overrides it")
        return p

    with_config("gen-data", "write the synthetic training and evaluation sets")
    with_config("train", "train a model; writes checkpoint, traces and loss log")

    p = with_config("eval", "evaluate a checkpoint (box and mask AP)")
    p.add_argument("--checkpoint", type=Path, help="defaults to <output_dir>/checkpoint.pt")
    p.add_argument("--eval-loops", type=int, help="override L_e")
    p.add_argument("--split", choices=["eval", "train"], default="eval")

    with_config("count-params", "parameter tables of the head variants")
    with_config("analyze-anchors", "anchor coverage of gt boxes")

    p = with_config("analyze-iou-dist", "per-loop IoU histograms of positive samples")
    p.add_argument("--traces", type=Path, nargs="*", help="trace files or directories; defaults to <output_dir>/traces")

    p = sub.add_parser("plot", help="re-render a plot from an emitted CSV")
    p.add_argument("csv", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--title", default="")
    return parser


def split_overrides(extra: Sequence[str]) -> List[str]:
    """Keep ``--section.key=value`` arguments; anything else is a usage error"""
    overrides = []
    for item in extra:
        if not item.startswith("--") or "=" not in item:
            raise ConfigError(f"unrecognized argument {item!r}; overrides look like --section.key=value")
        overrides.append(item[2:])
    return overrides


def _dispatch(args: argparse.Namespace, overrides: List[str]) -> Tuple[str, int]:
    if args.command == "plot":
        if overrides:
            raise ConfigError(f"plot takes no config overrides, got {overrides}")
        out = plot_csv(args.csv, args.out, args.title)
        return f"Plot written: {out}", EXIT_OK

    config = load_experiment_config(args.config, overrides)

    if args.command == "gen-data":
        paths = tasks.run_gen_data(config)
        return "\n".join(f"{split}: {path}" for split, path in paths.items()), EXIT_OK

    if args.command == "train":
        summary = tasks.run_training(config)
        lines = [f"Trained {summary.epochs} epochs ({summary.iterations} iterations)"]
        lines.append(f"Final loss: {summary.final_loss:.6f}")
        lines.append(f"Checkpoint: {summary.checkpoint}")
        return "\n".join(lines), EXIT_OK

    if args.command == "eval":
        report = tasks.run_evaluation(config, args.checkpoint, args.eval_loops, args.split)
        return ExportService.format_eval_report(report), EXIT_OK

    if args.command == "count-params":
        return tasks.run_count_params(config), EXIT_OK

    if args.command == "analyze-anchors":
        return ExportService.format_coverage(tasks.run_analyze_anchors(config)), EXIT_OK

    if args.command == "analyze-iou-dist":
        traces = args.traces or [Path(config.output_dir) / tasks.TRACE_DIR]
        report, _ = tasks.run_analyze_iou_dist(traces, config.output_dir)
        return ExportService.format_rebalancing(report), EXIT_OK

    raise ConfigError(f"unknown command {args.command!r}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    settings = get_settings()
    configure_logging(settings.log_level, settings.log_json)
    try:
        args, extra = build_parser().parse_known_args(argv)
        text, code = _dispatch(args, split_overrides(extra))
    except SBRCNNError as e:
        print(f"error: {e.detail}", file=sys.stderr)
        return e.exit_code
    except FileNotFoundError as e:
        print(f"error: file not found: {e.filename}", file=sys.stderr)
        return EXIT_USER_ERROR
    except Exception as e:
        logger.exception("internal_error")
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL_ERROR
    print(text)
    return code
