"""Command-line entry point: ``scadcl {run,eval,gen-stream,report}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .benchmark import ManifestError, build_stream, export_manifest, load_manifest
from .runner import ConfigError, evaluate_checkpoint, load_config, report, run_experiment


def _cmd_run(args) -> int:
    config = load_config(args.config)
    record = run_experiment(config, seed=args.seed, out_dir=args.out, resume_from=args.resume)
    print(json.dumps({"method": record.method, "seed": record.seed, "ar_f": record.ar_f, "fg_f": record.fg_f,
                      "out": str(args.out)}))
    return 0


def _cmd_eval(args) -> int:
    stream = load_manifest(args.stream)
    result = evaluate_checkpoint(args.checkpoint, stream, threshold=args.threshold)
    print(json.dumps(result))
    return 0


def _cmd_gen_stream(args) -> int:
    config = load_config(args.config)
    stream = build_stream(config.stream)
    path = export_manifest(stream, args.out)
    print(path)
    return 0


def _cmd_report(args) -> int:
    rows = report(args.runs, args.out)
    if not rows:
        print("no summary.json found under the given run directories", file=sys.stderr)
        return 1
    for r in rows:
        fg = "n/a" if r["fg_f_mean"] is None else f"{r['fg_f_mean']:.2f} +- {r['fg_f_std']:.2f}"
        print(f"{r['method']:<14} runs={r['runs']}  AR_f {r['ar_f_mean']:.2f} +- {r['ar_f_std']:.2f}  FG_f {fg}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scadcl", description="Multi-label continual learning experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train one method over a task stream and write result files")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--resume", type=Path, default=None, help="snapshot directory to continue from")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("eval", help="score a saved student checkpoint on a stream manifest")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--stream", required=True, type=Path, help="manifest.jsonl written by gen-stream")
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("gen-stream", help="render a task stream and export it as a manifest")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=_cmd_gen_stream)

    p = sub.add_parser("report", help="aggregate AR_f / FG_f over run directories")
    p.add_argument("--runs", required=True, nargs="+", type=Path)
    p.add_argument("--out", type=Path, default=None, help="CSV file for the table")
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ManifestError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
