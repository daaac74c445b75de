# src/ppslab/cli.py - Command-line entry points (ppslab, pps)

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

from dotenv import load_dotenv

from ppslab.configuration import REACH_POLICIES, Configuration
from ppslab.debug_utils import analyze_acceptance, print_acceptance_report
from ppslab.errors import ConfigError, PpsLabError, StageFailure
from ppslab.pipeline import STAGES, RunContext, run_offset_grid, run_pipeline
from ppslab.pps_graph import build_graph, densify, save_graph
from ppslab.sim_world import SimWorld
from ppslab.utils import rng_stream

logger = logging.getLogger(__name__)

# Stages a command runs, prerequisites included; finished stages reload from their checkpoints
_THROUGH = {
    "build": "build_graph",
    "explore": "explore",
    "reach": "reach_ladder",
    "learn-aperture": "aperture_study",
    "learn-cossim": "cosine_learning",
    "wrist-search": "wrist_learning",
    "eval-train": "fine_tune",
    "eval-test": "generalization",
    "eval": "generalization",
}


def _through(stage: str, skip: Sequence[str] = ()) -> list[str]:
    stages = STAGES[: STAGES.index(stage) + 1]
    return [s for s in stages if s not in skip]


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="Versioned JSON configuration file")
    parser.add_argument("--seed", type=int, help="Master seed for every random stream")
    parser.add_argument("--out", help="Output directory")
    parser.add_argument("--paper-scale", action="store_true", default=None, help="3000-node graph")
    parser.add_argument("--workers", type=int, help="Threads for evaluation trials")
    parser.add_argument("--verbose", "-v", action="store_true", help="Debug logging")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ppslab", description="Developmental reaching and grasping on a PPS graph.")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, text in (
        ("build", "Babble and densify the PPS graph"),
        ("explore", "Random exploration, bump clustering and feature selection"),
        ("eval", "Every learning and evaluation stage"),
        ("emit-figures", "Write figure tables from the stage reports"),
        ("run", "Full pipeline followed by the acceptance report"),
    ):
        _common(sub.add_parser(name, help=text))

    reach = sub.add_parser("reach", help="Reach policy ladder")
    _common(reach)
    reach.add_argument("--policy", choices=REACH_POLICIES, help="Run a single policy")

    grasp = sub.add_parser("grasp", help="Grasp learning steps")
    grasp_sub = grasp.add_subparsers(dest="grasp_command", required=True)
    for name, text in (
        ("learn-aperture", "Aperture study"),
        ("learn-cossim", "Cosine-similarity approach learning"),
        ("wrist-search", "Wrist-angle example collection"),
        ("offset-grid", "Rank centre-offset coefficients on the training placements"),
    ):
        _common(grasp_sub.add_parser(name, help=text))
    ev = grasp_sub.add_parser("eval", help="Grasp method evaluation")
    _common(ev)
    which = ev.add_mutually_exclusive_group()
    which.add_argument("--train", action="store_true", help="Training placements (default)")
    which.add_argument("--test", action="store_true", help="Unseen test placements")
    return parser


def load_config(args: argparse.Namespace, **extra: Any) -> Configuration:
    overrides = {
        "seed": args.seed,
        "out_dir": args.out,
        "paper_scale": args.paper_scale,
        "workers": args.workers,
        **extra,
    }
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if args.config:
        return Configuration.from_file(args.config, **overrides)
    return Configuration.from_runnable_config({"configurable": overrides})


def _summarize(reports) -> None:
    print("\n📊 STAGE SUMMARY:")
    print("=" * 50)
    for r in reports:
        print(f"   ✅ {r.stage:<16} {r.wall_clock:7.1f}s  {r.content_digest()}")


def _acceptance(config: Configuration) -> None:
    run = RunContext(config, Path(config.out_dir))
    reports = {name: r for name in STAGES if (r := run.report(name)) is not None}
    print_acceptance_report(analyze_acceptance(reports), str(run.out))


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

    command = args.command if args.command != "grasp" else args.grasp_command
    try:
        if command == "reach" and args.policy:
            config = load_config(args, policies=[args.policy])
        else:
            config = load_config(args)
    except ConfigError as e:
        print(f"❌ Invalid configuration: {e.message}", file=sys.stderr)
        return 2

    try:
        if command == "offset-grid":
            run_pipeline(config, _through("wrist_learning", skip=("reach_ladder",)))
            path = run_offset_grid(config)
            print(f"✅ Offset ranking written to {path}")
            return 0
        if command == "emit-figures":
            stages = ["emit_figures"]
        elif command == "run":
            stages = list(STAGES)
        elif command == "eval" and args.command == "grasp":
            stages = _through(_THROUGH["eval-test" if args.test else "eval-train"], skip=("reach_ladder",))
        else:
            skip = ("reach_ladder",) if args.command == "grasp" else ()
            stages = _through(_THROUGH[command], skip=skip)
        reports = run_pipeline(config, stages)
    except StageFailure as e:
        print(f"❌ {e.message}", file=sys.stderr)
        return 1
    except PpsLabError as e:
        print(f"❌ {e.error_code}: {e.message}", file=sys.stderr)
        return 1

    _summarize(reports)
    if command in ("run", "emit-figures"):
        _acceptance(config)
    return 0


def pps_main(argv: Optional[Sequence[str]] = None) -> int:
    """``pps build --nodes N --seed S --out FILE``: build and archive a graph only."""
    load_dotenv()
    parser = argparse.ArgumentParser(prog="pps", description="PPS graph tools.")
    sub = parser.add_subparsers(dest="command", required=True)
    build = sub.add_parser("build", help="Babble, densify and archive a graph")
    build.add_argument("--nodes", type=int, required=True)
    build.add_argument("--seed", type=int, default=0)
    build.add_argument("--out", required=True, help="Archive path (.npz)")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")

    try:
        world = SimWorld()
        graph = build_graph(world, args.nodes, rng_stream(args.seed, "babble"))
        graph.seed = args.seed
        densify(graph)
        path = save_graph(graph, args.out)
    except PpsLabError as e:
        print(f"❌ build failed: {e.error_code}: {e.message}", file=sys.stderr)
        return 1
    print(f"✅ {len(graph)} nodes, {graph.edge_count()} edges -> {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
