"""Command-line entry points.

Verbs: train, eval, ablate, analyze, report. Exit codes: 0 on success,
2 for usage/config problems (bad config field, missing dataset root,
malformed graph file), 3 for runtime failures such as a training abort.
The output root resolves as --out, then $DISTILLKIT_OUT, then the
config's run.out_dir.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from .backbone import GGhostStageSpec
from .complexity import AnalysisError, analyze_graph, crosscheck_stage
from .config import ConfigError, load_run_config
from .data import ImageLoadError, IngestionError
from .graph import GraphParseError, LayerGraph
from .trainer import TrainingAbort

log = logging.getLogger("distillkit")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _out_root(args, cfg=None) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    env = os.environ.get("DISTILLKIT_OUT")
    if env:
        return Path(env)
    return Path(cfg.run.out_dir if cfg is not None else "runs")


def _load_config(args):
    cfg = load_run_config(args.config)
    if getattr(args, "dataset_root", None):
        cfg = replace(cfg, data=replace(cfg.data, kind="folder", root=args.dataset_root))
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, run=replace(cfg.run, seed=args.seed))
    return cfg


def cmd_train(args) -> int:
    from .experiment import run_train

    cfg = _load_config(args)
    record, run_dir = run_train(cfg, _out_root(args, cfg), resume=args.resume)
    print(f"run {record.run_id} finished: top1={record.eval.top1:.4f} "
          f"top5={record.eval.top5:.4f} params={record.eval.params} "
          f"-> {run_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .experiment import run_eval

    cfg = _load_config(args)
    report = run_eval(cfg, args.run, checkpoint=args.checkpoint)
    print(report.to_json())
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .experiment import render_table, run_ablation, ABLATION_COLUMNS

    cfg = _load_config(args)
    rows = run_ablation(cfg, _out_root(args, cfg))
    print(render_table(ABLATION_COLUMNS, rows, title="Ablation"), end="")
    return EXIT_OK


def cmd_analyze(args) -> int:
    input_hw = tuple(args.input_hw)
    if args.stage:
        spec = _parse_stage_spec(args.stage)
        result = crosscheck_stage(spec, input_hw)
        print(result.render(), end="")
        return EXIT_OK
    graph = LayerGraph.load(args.graph)
    report = analyze_graph(graph, input_hw)
    print(report.to_json() if args.json else report.render(), end="")
    return EXIT_OK


def _parse_stage_spec(text: str) -> GGhostStageSpec:
    """`n=4,ghost_ratio=0.5,channels=64[,in_channels=..,stride=..]`"""
    fields: dict[str, float] = {}
    for item in text.split(","):
        key, sep, val = item.partition("=")
        if not sep:
            raise ConfigError(f"--stage: expected key=value, got {item!r}")
        try:
            fields[key.strip()] = float(val)
        except ValueError:
            raise ConfigError(f"--stage: non-numeric value in {item!r}") from None
    try:
        channels = int(fields.pop("channels"))
        spec = GGhostStageSpec(
            n=int(fields.pop("n")),
            ghost_ratio=fields.pop("ghost_ratio"),
            in_channels=int(fields.pop("in_channels", channels)),
            out_channels=channels,
            stride=int(fields.pop("stride", 1)),
            mix_enabled=bool(fields.pop("mix_enabled", 1.0)),
        )
    except KeyError as exc:
        raise ConfigError(f"--stage: missing required key {exc.args[0]}") from None
    except ValueError as exc:
        raise ConfigError(f"--stage: {exc}") from None
    if fields:
        raise ConfigError(f"--stage: unknown key(s) {', '.join(sorted(fields))}")
    return spec


def cmd_report(args) -> int:
    from .experiment import make_report

    out = make_report(args.runs, args.out or _out_root(args) / "report")
    print(f"report written to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="distillkit",
                                     description="teacher-student distillation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="run config (TOML)")
        p.add_argument("--seed", type=int, default=None, help="override run.seed")
        p.add_argument("--out", default=None, help="output root directory")
        p.add_argument("--dataset-root", default=None,
                       help="override data.root (switches data.kind to 'folder')")

    p_train = sub.add_parser("train", help="pretrain teacher (if needed) and train the student")
    add_common(p_train)
    p_train.add_argument("--resume", action="store_true",
                         help="resume from the run's last checkpoint")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on the config's test split")
    add_common(p_eval)
    p_eval.add_argument("--run", required=True, help="run directory")
    p_eval.add_argument("--checkpoint", default=None,
                        help="checkpoint path (default: <run>/best.ckpt)")
    p_eval.set_defaults(func=cmd_eval)

    p_ablate = sub.add_parser("ablate", help="teacher / student / student+distillation table")
    add_common(p_ablate)
    p_ablate.set_defaults(func=cmd_ablate)

    p_analyze = sub.add_parser("analyze", help="parameter/FLOP analysis of a serialized graph")
    p_analyze.add_argument("graph", nargs="?", help="serialized LayerGraph file")
    p_analyze.add_argument("--input-hw", type=int, nargs=2, default=[32, 32],
                           metavar=("H", "W"))
    p_analyze.add_argument("--stage", default=None,
                           help="crosscheck a ghost stage instead, e.g. "
                                "'n=4,ghost_ratio=0.5,channels=64'")
    p_analyze.add_argument("--json", action="store_true", help="emit JSON instead of text")
    p_analyze.set_defaults(func=cmd_analyze)

    p_report = sub.add_parser("report", help="merge run directories into a comparison report")
    p_report.add_argument("runs", nargs="+", help="run directories with manifest.json")
    p_report.add_argument("--out", default=None, help="report output directory")
    p_report.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "analyze" and not args.stage and not args.graph:
        parser.error("analyze needs a graph file or --stage")
    try:
        return args.func(args)
    except (ConfigError, IngestionError, GraphParseError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingAbort, ImageLoadError, AnalysisError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
