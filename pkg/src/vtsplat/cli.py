"""Command-line entry point: one subcommand per pipeline stage."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import io, pipeline
from .hull import HullError
from .pipeline import ConfigError, StageInputError, Workspace
from .touch import SelectionError

EXIT_OK, EXIT_CONFIG, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3, 4


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("config overrides (flag beats --config file)")
    for key, default in pipeline.scalar_keys():
        if key == "profile":
            continue
        g.add_argument(f"--{key}", dest=f"cfg:{key}", default=None, metavar=type(default).__name__.upper(),
                       help=f"default {default!r}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vtsplat", description="Visuo-tactile Gaussian reconstruction pipeline")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in (*pipeline.STAGES, "export-ply", "run-all", "show-config"):
        p = sub.add_parser(name)
        p.add_argument("--workdir", default="work", help="artifact directory")
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--profile", choices=sorted(pipeline.PROFILES), default=None)
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("train", "eval", "run-all"):
            p.add_argument("--no-touch", action="store_true", help="baseline without tactile anchors")
        if name == "train":
            p.add_argument("--until", type=int, help="stop at this iteration")
        if name in ("touch-sim", "run-all"):
            p.add_argument("--manual", action="store_true", help="read captured tactile frames from the manifest")
        if name == "export-ply":
            p.add_argument("--stage", default="refine", choices=("train", "refine"))
            p.add_argument("--out", required=True)
        _add_config_flags(p)
    return ap


def config_from_args(args) -> pipeline.PipelineConfig:
    over = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg:") and v is not None}
    if args.profile:
        over["profile"] = args.profile
    if getattr(args, "manual", False):
        over["touch.manual"] = True
    return pipeline.load_config(args.config, over)


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        ws = Workspace(args.workdir, cfg)
        cmd = args.command
        out = None
        if cmd == "show-config":
            out = cfg.to_dict()
        elif cmd == "synth":
            out = pipeline.stage_synth(ws)
        elif cmd == "carve":
            out = pipeline.stage_carve(ws)
        elif cmd == "train":
            out = pipeline.stage_train(ws, until=args.until, no_touch=args.no_touch)
        elif cmd == "select-touches":
            out = pipeline.stage_select(ws)
        elif cmd == "touch-sim":
            out = pipeline.stage_touch_sim(ws)
        elif cmd == "refine":
            out = pipeline.stage_refine(ws)
        elif cmd == "eval":
            out = pipeline.stage_eval(ws, no_touch=args.no_touch).to_dict()
        elif cmd == "export-ply":
            out = {"written": str(pipeline.export_ply(ws, args.stage, Path(args.out)))}
        elif cmd == "run-all":
            out = pipeline.run_all(ws, no_touch=args.no_touch).to_dict()
        if out is not None:
            out = {k: v for k, v in out.items() if k != "config"}
            print(json.dumps(out, indent=1, sort_keys=True, default=str))
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StageInputError, io.ManifestError, io.PlyError, HullError, SelectionError, FileNotFoundError) as exc:
        print(f"stage input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
