"""Command-line entry point.

Subcommands: ingest, render, train, eval, gradcam, export-features,
synthetic. Exit codes: 0 success, 2 missing input or I/O failure, 3
parse/data errors, 4 invalid configuration or unmet precondition.
"""
from __future__ import annotations

import argparse
import json
import sys

from . import pipeline
from .config import PipelineConfig
from .errors import InvalidConfig, MalfuseError, MalformedLine, MissingAsm, NoOpcodesFound

EXIT_OK = 0
EXIT_IO = 2
EXIT_PARSE = 3
EXIT_CONFIG = 4


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file (defaults apply to every field)")
    parser.add_argument("--workdir", help="override paths.workdir")
    parser.add_argument("--jobs", type=int, help="parallel workers for per-sample work")
    parser.add_argument("--seed", type=int, help="replace the configured seed list with [SEED]")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="malfuse", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse the corpus strictly and summarize it")
    _common(p)

    p = sub.add_parser("render", help="write modality images as PGM files")
    _common(p)
    p.add_argument("--modalities", default="gs,eg,sh", help="comma list from gs,eg,sh")

    p = sub.add_parser("train", help="train the configured model per seed")
    _common(p)
    p.add_argument("--parallel-seeds", action="store_true", help="train seeds concurrently")

    p = sub.add_parser("eval", help="evaluate checkpoints on the held-out split")
    _common(p)

    p = sub.add_parser("gradcam", help="write cumulative per-family heatmaps")
    _common(p)

    p = sub.add_parser("export-features", help="write penultimate features as CSV")
    _common(p)

    p = sub.add_parser("synthetic", help="generate a corpus and run the full experiment grid")
    _common(p)
    p.add_argument("--parallel-seeds", action="store_true", help="run grid tasks concurrently")
    return parser


def load_config(args) -> PipelineConfig:
    overrides: dict = {}
    if args.workdir:
        overrides.setdefault("paths", {})["workdir"] = args.workdir
    if args.jobs is not None:
        overrides["jobs"] = args.jobs
    if args.seed is not None:
        overrides.setdefault("train", {})["seeds"] = [args.seed]
    return PipelineConfig.load(args.config, overrides)


def cmd_ingest(cfg: PipelineConfig) -> int:
    try:
        summary = pipeline.ingest_corpus(cfg)
    except OSError as exc:
        print(f"ingest: I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO
    if summary["samples"] == 0:
        print("ingest: manifest lists no samples", file=sys.stderr)
        return EXIT_IO
    out = pipeline.write_ingest_report(cfg, summary)
    print(f"parsed {summary['parsed_bytes_files']}/{summary['samples']} samples; "
          f"{len(summary['parse_errors'])} parse error(s); summary at {out}")
    if summary["parse_errors"]:
        for err in summary["parse_errors"]:
            print(f"  {err['file']}:{err['line']}: {err['message']}", file=sys.stderr)
        return EXIT_PARSE
    return EXIT_OK


def cmd_render(cfg: PipelineConfig, modalities: str) -> int:
    names = tuple(m.strip() for m in modalities.split(",") if m.strip())
    for name in names:
        if name not in pipeline.MODALITY_BY_NAME:
            print(f"render: unknown modality {name!r}", file=sys.stderr)
            return EXIT_CONFIG
    summary = pipeline.render_corpus(cfg, names, jobs=cfg["jobs"])
    print(f"rendered {summary['rendered']} samples ({summary['files']} files) "
          f"at side {summary['side']}")
    if summary["missing_bytes"]:
        print("render: missing .bytes for: " + ", ".join(summary["missing_bytes"]),
              file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


def cmd_train(cfg: PipelineConfig) -> int:
    summary = pipeline.train_command(cfg)
    acc = summary["averaged"]["accuracy"]["mean"]
    f1 = summary["averaged"]["macro_f1"]["mean"]
    print(f"trained {summary['label']} over seeds {summary['seeds']}: "
          f"accuracy {acc:.3f}, macro-F1 {f1:.3f}")
    return EXIT_OK


def cmd_eval(cfg: PipelineConfig) -> int:
    report = pipeline.eval_command(cfg)
    f1 = report["averaged"]["macro_f1"]["mean"]
    print(f"evaluated {report['label']} on {report['test_samples']} held-out samples: "
          f"macro-F1 {f1:.3f}")
    return EXIT_OK


def cmd_gradcam(cfg: PipelineConfig) -> int:
    files = pipeline.gradcam_command(cfg)
    print(f"wrote {len(files)} heatmap files")
    return EXIT_OK


def cmd_export(cfg: PipelineConfig) -> int:
    out = pipeline.export_command(cfg)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_synthetic(cfg: PipelineConfig) -> int:
    report = pipeline.synthetic_experiment(cfg, jobs=cfg["jobs"])
    rows = report["rows"]
    best = max(rows, key=lambda r: r["averaged"]["macro_f1"]["mean"])
    print(f"grid complete: {len(rows)} rows over seeds {report['seeds']}; "
          f"best {best['label']} macro-F1 {best['averaged']['macro_f1']['mean']:.3f}")
    reports = pipeline.workdir_layout(cfg.workdir())["reports"]
    print(f"reports under {reports}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
    except FileNotFoundError as exc:
        print(f"config: {exc}", file=sys.stderr)
        return EXIT_IO
    except (InvalidConfig, json.JSONDecodeError) as exc:
        print(f"config: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    if getattr(args, "parallel_seeds", False) and cfg["jobs"] < 2:
        cfg.data["jobs"] = 2

    try:
        if args.command == "ingest":
            return cmd_ingest(cfg)
        if args.command == "render":
            return cmd_render(cfg, args.modalities)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg)
        if args.command == "gradcam":
            return cmd_gradcam(cfg)
        if args.command == "export-features":
            return cmd_export(cfg)
        if args.command == "synthetic":
            return cmd_synthetic(cfg)
    except pipeline.PreconditionError as exc:
        print(f"{args.command}: precondition: {exc}", file=sys.stderr)
        return EXIT_IO
    except MissingAsm as exc:
        print(f"{args.command}: {exc}", file=sys.stderr)
        return EXIT_IO
    except (MalformedLine, NoOpcodesFound) as exc:
        print(f"{args.command}: parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except InvalidConfig as exc:
        print(f"{args.command}: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"{args.command}: I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO
    except MalfuseError as exc:
        print(f"{args.command}: {exc}", file=sys.stderr)
        return EXIT_PARSE
    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
