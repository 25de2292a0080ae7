"""Command-line entry points for the labeling pipeline.

Subcommands mirror the pipeline stages plus `synth` (generate a synthetic
bundle), `serve` (the review service), and `run` (everything). A stage
subcommand runs the pipeline up to and including that stage, reusing caches.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import time
from pathlib import Path

from . import pipeline, review, simulate
from .config import PipelineConfig, config_from_dict, load_config

log = logging.getLogger(__name__)

_STAGE_COMMANDS = ("sync", "cluster", "correct", "detect", "track", "export", "eval")


def _build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", type=Path, help="YAML config file")
    shared.add_argument("--out", type=Path, help="output directory (overrides config)")
    shared.add_argument("--seed", type=int, help="random seed (overrides config)")
    shared.add_argument("--stages", help="comma-separated stage list for 'run'")
    shared.add_argument("--serve-addr", default="127.0.0.1:8871", help="host:port for 'serve'")

    parser = argparse.ArgumentParser(prog="moslabel", description=__doc__, parents=[shared])
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", parents=[shared], help="generate a synthetic labeled bundle")
    synth.add_argument("--scene", type=Path, help="scene spec YAML (default: built-in demo)")
    synth.add_argument("--frames", type=int, default=100)
    synth.add_argument("--layout", choices=("demo", "circuit"), default="demo")
    synth.add_argument("--drift", type=float, default=0.0, help="inject pose drift (meters)")
    synth.add_argument("out_dir", type=Path)

    run = sub.add_parser("run", parents=[shared], help="run the full pipeline")
    run.add_argument("input_dir", type=Path, nargs="?")
    for stage in _STAGE_COMMANDS:
        s = sub.add_parser(stage, parents=[shared], help=f"run the pipeline through '{stage}'")
        s.add_argument("input_dir", type=Path, nargs="?")

    serve = sub.add_parser("serve", parents=[shared], help="serve the review UI over a run")
    serve.add_argument("--static", type=Path, help="directory with the browser client build")
    return parser


def _resolve_config(args) -> PipelineConfig:
    if args.config:
        config = load_config(args.config)
    else:
        config = config_from_dict({})
    overrides = {}
    if getattr(args, "input_dir", None):
        overrides["input_dir"] = str(args.input_dir)
    if args.out:
        overrides["out_dir"] = str(args.out)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.stages:
        overrides["stages"] = tuple(s.strip() for s in args.stages.split(","))
    if overrides:
        config = dataclasses.replace(config, **overrides)
    return config


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = _build_parser().parse_args(argv)

    if args.command == "synth":
        seed = args.seed if args.seed is not None else 7
        if args.scene:
            spec = simulate.scene_from_yaml(args.scene)
        elif args.layout == "circuit":
            spec = simulate.circuit_scene(frame_count=args.frames, seed=seed)
        else:
            spec = simulate.demo_scene(frame_count=args.frames, seed=seed)
        bundle = simulate.generate_scene(spec)
        if args.drift > 0:
            bundle = simulate.corrupt_poses(bundle, args.drift, seed=seed)
        simulate.write_bundle(bundle, args.out_dir)
        print(f"wrote synthetic bundle ({spec.frame_count} frames) to {args.out_dir}")
        return 0

    if args.command == "serve":
        config = _resolve_config(args)
        if not config.out_dir:
            print("serve needs --out (the pipeline output directory)", file=sys.stderr)
            return 2
        server = review.serve_review(config.out_dir, args.serve_addr, args.static)
        print(f"review service on http://{server.server_address[0]}:{server.server_address[1]}")
        try:
            while True:
                time.sleep(3600)
        except KeyboardInterrupt:
            server.shutdown()
        return 0

    config = _resolve_config(args)
    if args.command in _STAGE_COMMANDS:
        config = dataclasses.replace(config, stages=(args.command,))
    if not config.input_dir or not config.out_dir:
        print("need an input bundle directory and --out", file=sys.stderr)
        return 2
    results = pipeline.run(config)
    print(pipeline.report_text(results), end="")
    return 0


if __name__ == "__main__":
    sys.exit(main())
