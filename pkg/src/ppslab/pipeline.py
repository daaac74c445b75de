# src/ppslab/pipeline.py - Developmental pipeline as a LangGraph graph with checkpointed stages

import logging
import time
from dataclasses import asdict, replace
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

from langchain_core.runnables import RunnableConfig
from langgraph.graph import END, START, StateGraph

from ppslab.configuration import Configuration
from ppslab.errors import InsufficientData, StageFailure
from ppslab.grasp_learning import (
    FineTunePolicy,
    GraspContext,
    GraspReport,
    aperture_experiment,
    build_cos_sim_table,
    collect_examples,
    conclude_approach_geometry,
    derive_motion_scale,
    evaluate,
    generalization_study,
    grasp_rows,
    grasp_summary,
    load_examples,
    offset_grid,
    save_examples,
)
from ppslab.pps_graph import PpsGraph, build_graph, densify, load_graph, save_graph
from ppslab.reach_learning import (
    Comparator,
    EventRecord,
    IouClusterer,
    ReachContext,
    best_group,
    bump_probability_table,
    evaluate_reach_policy,
    feature_curves,
    feature_samples,
    random_exploration,
    reach_summary,
    read_records,
    select_feature,
    write_records,
)
from ppslab.reports import StageReport, emit_figures, write_csv
from ppslab.sim_world import Placement, SimWorld, sample_placements
from ppslab.state import InputState, OutputState, PipelineState
from ppslab.utils import digest, dump_json, load_json, rng_stream

logger = logging.getLogger(__name__)

STAGES = [
    "build_graph",
    "explore",
    "reach_ladder",
    "aperture_study",
    "cosine_learning",
    "wrist_learning",
    "fine_tune",
    "generalization",
    "emit_figures",
]


class RunContext:
    """Output directory, configuration and lazily loaded artifacts for one stage invocation."""

    def __init__(self, config: Configuration, out: Path):
        self.config = config
        self.out = out
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "stages").mkdir(exist_ok=True)
        self._world: Optional[SimWorld] = None
        self._graph: Optional[PpsGraph] = None

    def path(self, name: str) -> Path:
        return self.out / name

    def stage_path(self, stage: str) -> Path:
        return self.out / "stages" / f"{stage}.json"

    @property
    def world(self) -> SimWorld:
        if self._world is None:
            self._world = SimWorld(self.config.world)
        return self._world

    def graph(self) -> PpsGraph:
        if self._graph is None:
            path = self.path("graph.npz")
            if not path.exists():
                raise FileNotFoundError(f"{path} missing; run the build_graph stage first")
            self._graph = load_graph(path)
        return self._graph

    def report(self, stage: str) -> Optional[StageReport]:
        path = self.stage_path(stage)
        return StageReport.load(path) if path.exists() else None

    def placements(self, which: str) -> list[Placement]:
        count = self.config.train_placements if which == "train" else self.config.test_placements
        if count == 0:
            return []
        rng = rng_stream(self.config.placement_seed, f"placements-{which}")
        return [s[0] for s in sample_placements(self.world, count, rng)]

    def clusterer(self) -> IouClusterer:
        return IouClusterer.from_dict(load_json(self.path("clusterer.json")))

    def comparator(self) -> Comparator:
        data = load_json(self.path("comparator.json"))
        return Comparator(data["kind"], float(data["k"]))

    def motion_scale(self) -> tuple[float, float]:
        """Preshape magnitude and candidate cutoff, derived by the aperture study when enabled."""
        report = self.report("aperture_study")
        if report is not None and "preshape" in report.aggregates:
            return float(report.aggregates["preshape"]), float(report.aggregates["cutoff"])
        return self.config.preshape_magnitude, self.config.candidate_cutoff

    def reach_context(self, **overrides: Any) -> ReachContext:
        ctx = ReachContext(
            world=self.world,
            graph=self.graph(),
            clusterer=self.clusterer(),
            comparator=self.comparator(),
            seed=self.config.policy_seed,
            aperture=self.config.reach_aperture,
            change_threshold=self.config.mask_change_threshold,
            workers=self.config.workers,
        )
        return replace(ctx, **overrides)

    def grasp_context(self, examples: Sequence = ()) -> GraspContext:
        preshape, cutoff = self.motion_scale()
        return GraspContext(
            world=self.world,
            graph=self.graph(),
            clusterer=self.clusterer(),
            comparator=self.comparator(),
            seed=self.config.policy_seed,
            aperture=self.config.grasp_aperture,
            change_threshold=self.config.mask_change_threshold,
            workers=self.config.workers,
            preshape=preshape,
            tuning=FineTunePolicy(cutoff=cutoff, coefficients=self.config.offsets(), preshape=preshape),
            examples=list(examples),
        )


def _grasp_records(
    run: RunContext, ctx: GraspContext, method: str, which: str, upstream: Sequence[str] = ()
) -> list[EventRecord]:
    """Grasp trials of one method on one placement set; reuses a log an upstream stage wrote."""
    path = run.path(f"grasp_{method}_{which}.jsonl")
    for stage in upstream:
        report = run.report(stage)
        if report is not None and str(path) in report.artifacts.values() and path.exists():
            return read_records(path)
    report = evaluate(ctx, run.placements(which), method)
    write_records(path, report.records)
    return report.records


def _summary_row(records: Sequence[EventRecord], method: str, which: str) -> dict[str, Any]:
    return {"set": which, **grasp_summary(records, method)}


# ----- stages -----


def _build_graph(run: RunContext) -> dict[str, Any]:
    cfg = run.config
    world = run.world.copy()
    graph = build_graph(
        world,
        cfg.n_nodes,
        rng_stream(cfg.babble_seed, "babble"),
        progress=lambda i: print(f"   🤖 babbled {i}/{cfg.n_nodes}") if i % 200 == 0 else None,
    )
    graph.seed = cfg.babble_seed
    densify(graph)
    path = save_graph(graph, run.path("graph.npz"))
    return {
        "aggregates": {
            "nodes": len(graph),
            "edges": graph.edge_count(),
            "chain_edges": graph.edge_count(chain=True),
            "mean_chain_length": graph.mean_chain_length,
        },
        "artifacts": {"graph": str(path)},
    }


def _explore(run: RunContext) -> dict[str, Any]:
    cfg = run.config
    records, clusterer = random_exploration(
        run.world.copy(),
        run.graph(),
        seed=cfg.policy_seed,
        n_blocks=cfg.exploration_blocks,
        rare_target=cfg.rare_cluster_target,
        max_trajectories=cfg.max_exploration_trajectories,
        change_threshold=cfg.mask_change_threshold,
    )
    log = write_records(run.path("exploration.jsonl"), records)
    dump_json(run.path("clusterer.json"), clusterer.to_dict())

    table = bump_probability_table(records)
    samples = feature_samples(records)
    curves = feature_curves(samples, cfg.feature_thresholds)
    fallback = False
    try:
        comparator = select_feature(samples, cfg.feature_thresholds)
    except InsufficientData as e:
        logger.warning("Feature selection fell back to the centre distance: %s", e.message)
        comparator, fallback = Comparator(), True
    dump_json(run.path("comparator.json"), comparator.to_dict())

    observations = [o for r in records for o in r.observations]
    return {
        "aggregates": {
            "trajectories": len(records),
            "iou_values": len(clusterer.values),
            "rare_count": clusterer.rare_count,
            "centroids": list(clusterer.centroids or ()),
            "comparator": comparator.to_dict(),
            "comparator_fallback": fallback,
            "best_group": best_group(table),
            "false_positives": sum(o.bump and not o.ground_truth for o in observations),
        },
        "tables": {"bump_table": table.to_dict("records"), "feature_curves": curves.to_dict("records")},
        "artifacts": {
            "exploration": str(log),
            "clusterer": str(run.path("clusterer.json")),
            "comparator": str(run.path("comparator.json")),
        },
    }


def _reach_ladder(run: RunContext) -> dict[str, Any]:
    ctx = run.reach_context()
    placements = run.placements("train")
    rows, summary, artifacts = [], [], {}
    for policy in run.config.policies:
        print(f"   🎯 reach policy {policy}")
        records = evaluate_reach_policy(ctx, placements, policy)
        artifacts[f"reach_{policy}"] = str(write_records(run.path(f"reach_{policy}.jsonl"), records))
        summary.append(reach_summary(records, policy))
        for r in records:
            obs = r.observations[0]
            rows.append(
                {
                    "policy": policy, "trial": r.trial, "x": obs.placement[0], "y": obs.placement[1],
                    "yaw": obs.placement[2], "final_node": r.final_node, "bump_final": r.bump_final,
                    "bump_any": r.bump_anywhere, "ground_truth": r.bump_ground_truth,
                    "early_contact": r.early_contact, "relaxed": r.relaxed, "tier": r.tier,
                    "candidate_count": r.candidate_count, "false_positive": obs.bump and not obs.ground_truth,
                }
            )
    return {
        "rows": rows,
        "tables": {"summary": summary},
        "aggregates": {"false_positives": sum(r["false_positive"] for r in rows)},
        "artifacts": artifacts,
    }


def _aperture_study(run: RunContext) -> dict[str, Any]:
    cfg = run.config
    table, by_aperture = aperture_experiment(run.reach_context(), run.placements("train"), cfg.apertures)
    records = [r for a in sorted(by_aperture) for r in by_aperture[a]]
    log = write_records(run.path("aperture_records.jsonl"), records)
    preshape, cutoff = cfg.preshape_magnitude, cfg.candidate_cutoff
    if cfg.derive_motion_scale:
        try:
            preshape = cutoff = derive_motion_scale(records)
            logger.info("Derived motion scale %.2f from Palmar bumps", preshape)
        except InsufficientData as e:
            logger.warning("Keeping configured motion scale: %s", e.message)
    return {
        "rows": table.to_dict("records"),
        "aggregates": {"preshape": preshape, "cutoff": cutoff},
        "artifacts": {"aperture_records": str(log)},
    }


def _cosine_learning(run: RunContext) -> dict[str, Any]:
    cfg = run.config
    monitored = read_records(run.path("aperture_records.jsonl"))
    widest = max(cfg.apertures)
    table = build_cos_sim_table([r for r in monitored if r.aperture == widest])
    geometry = conclude_approach_geometry(table)
    print(f"   📐 approach geometry consistent: {'✅' if geometry.consistent else '❌'}")

    ctx = run.grasp_context()
    rows, summaries, artifacts = [], [], {}
    for method in ("accidental", "cosine"):
        if method not in cfg.methods:
            continue
        records = _grasp_records(run, ctx, method, "train")
        artifacts[f"grasp_{method}_train"] = str(run.path(f"grasp_{method}_train.jsonl"))
        rows += grasp_rows(records).to_dict("records")
        summaries.append(_summary_row(records, method, "train"))
    return {
        "rows": rows,
        "aggregates": geometry.to_dict(),
        "tables": {"cos_sim": table.rows.to_dict("records"), "grasp_summary": summaries},
        "artifacts": artifacts,
    }


def _wrist_learning(run: RunContext) -> dict[str, Any]:
    cfg = run.config
    ctx = run.grasp_context()
    placements = run.placements("train")
    cosine = _grasp_records(run, ctx, "cosine", "train", upstream=("cosine_learning",))
    examples = collect_examples(ctx, placements, cosine, cfg.wrist_grid_steps)
    db = save_examples(examples, run.path("examples.csv"))
    artifacts = {"examples": str(db)}
    rows, summaries = [], []
    if "wrist" in cfg.methods:
        records = _grasp_records(run, run.grasp_context(examples), "wrist", "train")
        artifacts["grasp_wrist_train"] = str(run.path("grasp_wrist_train.jsonl"))
        rows = grasp_rows(records).to_dict("records")
        summaries.append(_summary_row(records, "wrist", "train"))
    return {
        "rows": rows,
        "aggregates": {"examples": len(examples), "successful_cosine_grasps": sum(r.outcome == "grasp" for r in cosine)},
        "tables": {"grasp_summary": summaries},
        "artifacts": artifacts,
    }


def _fine_tune(run: RunContext) -> dict[str, Any]:
    ctx = run.grasp_context(load_examples(run.path("examples.csv")))
    placements = run.placements("train")
    stop = evaluate(ctx, placements, "fine-tuned")
    no_stop = evaluate(ctx, placements, "fine-tuned", stop_on_reflex=False)
    write_records(run.path("grasp_fine-tuned_train.jsonl"), stop.records)
    write_records(run.path("grasp_fine-tuned-no-stop_train.jsonl"), no_stop.records)
    return {
        "rows": stop.rows.to_dict("records") + no_stop.rows.to_dict("records"),
        "aggregates": {"stop_gain": stop.summary["grasp"] - no_stop.summary["grasp"]},
        "tables": {"grasp_summary": [{"set": "train", **stop.summary}, {"set": "train", **no_stop.summary}]},
        "artifacts": {
            "grasp_fine-tuned_train": str(run.path("grasp_fine-tuned_train.jsonl")),
            "grasp_fine-tuned-no-stop_train": str(run.path("grasp_fine-tuned-no-stop_train.jsonl")),
        },
    }


def _generalization(run: RunContext) -> dict[str, Any]:
    cfg = run.config
    method = "fine-tuned" if "fine-tuned" in cfg.methods or not cfg.methods else cfg.methods[-1]
    examples_path = run.path("examples.csv")
    ctx = run.grasp_context(load_examples(examples_path) if examples_path.exists() else ())
    train_records = _grasp_records(run, ctx, method, "train", upstream=("cosine_learning", "wrist_learning", "fine_tune"))
    test_records = _grasp_records(run, ctx, method, "test")
    train = GraspReport(method, grasp_rows(train_records), grasp_summary(train_records, method), train_records)
    test = GraspReport(method, grasp_rows(test_records), grasp_summary(test_records, method), test_records)
    study = generalization_study(train, test)
    return {
        "rows": test.rows.to_dict("records"),
        "aggregates": study,
        "tables": {"grasp_summary": [{"set": "test", **test.summary}]},
        "artifacts": {f"grasp_{method}_test": str(run.path(f"grasp_{method}_test.jsonl"))},
    }


def _emit_figures(run: RunContext) -> dict[str, Any]:
    reports = {name: r for name in STAGES[:-1] if (r := run.report(name)) is not None}
    written = emit_figures(reports, run.path("figures"))
    return {"aggregates": {"tables": sorted(written)}, "artifacts": written}


# Stage name, implementation, configuration lists that affect its output
_STAGE_IMPLS: dict[str, tuple[Callable[[RunContext], dict[str, Any]], tuple[str, ...]]] = {
    "build_graph": (_build_graph, ()),
    "explore": (_explore, ()),
    "reach_ladder": (_reach_ladder, ("policies",)),
    "aperture_study": (_aperture_study, ()),
    "cosine_learning": (_cosine_learning, ("methods",)),
    "wrist_learning": (_wrist_learning, ("methods",)),
    "fine_tune": (_fine_tune, ("methods",)),
    "generalization": (_generalization, ("methods",)),
    "emit_figures": (_emit_figures, ("policies", "methods")),
}


def run_stage(name: str, config: Configuration, out_dir: Optional[str | Path] = None) -> StageReport:
    """Run one stage, or reload its checkpoint when the configuration digest matches."""
    fn, keep = _STAGE_IMPLS[name]
    try:
        run = RunContext(config, Path(out_dir or config.out_dir))
        input_digest = digest({"stage": name, "config": config.digest(*keep)})
        cached = run.report(name)
        if (
            cached is not None
            and cached.input_digest == input_digest
            and all(Path(p).exists() for p in cached.artifacts.values())
            and name != "emit_figures"
        ):
            print(f"♻️  {name}: reusing checkpoint")
            return cached
        print(f"🚀 Starting {name}...")
        start = time.perf_counter()
        result = fn(run)
        report = StageReport(stage=name, input_digest=input_digest, wall_clock=time.perf_counter() - start, **result)
        report.save(run.stage_path(name))
        print(f"✅ {name} completed in {report.wall_clock:.1f}s")
        return report
    except StageFailure:
        raise
    except Exception as e:
        logger.debug("Stage %s failed", name, exc_info=True)
        raise StageFailure(name, e) from e


def _node(name: str) -> Callable[[PipelineState, RunnableConfig], dict[str, Any]]:
    def node(state: PipelineState, config: RunnableConfig) -> dict[str, Any]:
        if state.stages and name not in state.stages:
            return {}
        report = run_stage(name, Configuration.from_runnable_config(config), state.out_dir)
        return {"artifacts": {**state.artifacts, **report.artifacts}, "stage_reports": [report.model_dump()]}

    node.__name__ = name
    return node


# Graph Setup
builder = StateGraph(
    PipelineState,
    input=InputState,
    output=OutputState,
    config_schema=Configuration,
)

for _name in STAGES:
    builder.add_node(_name, _node(_name))

builder.add_edge(START, STAGES[0])
for _a, _b in zip(STAGES, STAGES[1:]):
    builder.add_edge(_a, _b)
builder.add_edge(STAGES[-1], END)

# Compile
graph = builder.compile()


def run_pipeline(
    config: Configuration,
    stages: Optional[Sequence[str]] = None,
    out_dir: Optional[str | Path] = None,
) -> list[StageReport]:
    """Run the pipeline (or a subset of its stages, in pipeline order)."""
    unknown = [s for s in stages or () if s not in STAGES]
    if unknown:
        raise ValueError(f"unknown stages: {unknown}")
    configurable = asdict(config)
    state = {"out_dir": None if out_dir is None else str(out_dir), "stages": list(stages) if stages else None}
    result = graph.invoke(state, {"configurable": configurable})
    return [StageReport.model_validate(r) for r in result["stage_reports"]]


def run_offset_grid(config: Configuration, out_dir: Optional[str | Path] = None) -> Path:
    """Rank centre-offset coefficients of the fine-tuned policy on the training placements."""
    run = RunContext(config, Path(out_dir or config.out_dir))
    examples_path = run.path("examples.csv")
    ctx = run.grasp_context(load_examples(examples_path) if examples_path.exists() else ())
    ranking = offset_grid(ctx, run.placements("train"))
    return write_csv(ranking, run.path("offset_grid.csv"))
