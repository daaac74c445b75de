# src/ppslab/grasp_learning.py - Palmar detection, approach geometry, wrist transfer and grasp evaluation

import itertools
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from ppslab.errors import (
    DegenerateVector,
    InsufficientData,
    MissingReturnPercepts,
    NoCandidates,
    NoExamples,
    NoNeighbors,
    NoSuccessfulInterval,
)
from ppslab.percept import CaptureTag, Center3, Vec3Dir
from ppslab.pps_graph import PpsGraph, local_jacobian
from ppslab.reach_learning import (
    EventRecord,
    ExecSettings,
    Plan,
    ReachContext,
    TargetView,
    adjust_final_config,
    candidate_final_nodes,
    execute_reach,
    plan_path,
    plan_reach,
    reach_trial,
    run_trials,
)
from ppslab.sim_world import WRIST_TWIST, Placement
from ppslab.utils import rate, rng_stream

logger = logging.getLogger(__name__)

EXAMPLE_SCHEMA_VERSION = 1
OUTCOMES = ("miss", "bump", "palmar-bump", "weak-grasp", "grasp")
VECTOR_NAMES = ("g_p", "g_f", "m_pf", "m_pt", "m_ft", "o")
COS_BUCKETS = (-1.0, -0.5, 0.0, 0.5, 1.0)
# ----- grasp classification -----


@dataclass(frozen=True)
class GraspOutcome:
    cls: str
    return_checks: tuple[bool, ...]
    palmar_step: Optional[int] = None

    @property
    def success(self) -> bool:
        return self.cls == "grasp"


def classify_grasp(record: EventRecord) -> GraspOutcome:
    """Grasp iff the block meets the hand at every return node; weak if it is dropped on the way."""
    if record.return_hits is None:
        raise MissingReturnPercepts(f"trial {record.trial} has no return observations")
    hits = tuple(bool(h) for h in record.return_hits)
    moved = list(record.target_moved or [])
    if hits and all(hits):
        cls = "grasp"
    elif _dropped_on_return(hits, moved):
        cls = "weak-grasp"
    elif record.palmar:
        cls = "palmar-bump"
    elif record.bump_final or record.bump_anywhere:
        cls = "bump"
    else:
        cls = "miss"
    return GraspOutcome(cls, hits, record.palmar_step)


def _dropped_on_return(hits: tuple[bool, ...], moved: list[bool]) -> bool:
    lead = next((i for i, h in enumerate(hits) if not h), len(hits))
    if lead < 2 or lead == len(hits):
        return False
    return any(moved[1:lead])


# ----- aperture study -----


def aperture_experiment(
    ctx: ReachContext,
    placements: Sequence[Placement],
    apertures: Sequence[float] = (0.0, 0.25, 0.5, 0.75, 1.0),
) -> tuple[pd.DataFrame, dict[float, list[EventRecord]]]:
    """Jacobian-adjusted reaches repeated at each gripper aperture."""
    rows, by_aperture = [], {}
    for a in apertures:
        run = replace(ctx, aperture=float(a))
        records = run_trials(
            lambda i: reach_trial(run, placements[i], "jacobian-adjusted", i), len(placements), ctx.workers
        )
        n = len(records)
        row = {
            "aperture": float(a),
            "trials": n,
            "bump_rate": rate(sum(r.bump_final for r in records), n),
            "ground_truth_rate": rate(sum(r.bump_ground_truth for r in records), n),
            "palmar_rate": rate(sum(r.palmar for r in records), n),
        }
        logger.info("Aperture %.2f: bump %.3f, palmar %.3f", a, row["bump_rate"], row["palmar_rate"])
        rows.append(row)
        by_aperture[float(a)] = records
    return pd.DataFrame(rows, columns=["aperture", "trials", "bump_rate", "ground_truth_rate", "palmar_rate"]), by_aperture


def derive_motion_scale(records: Sequence[EventRecord]) -> float:
    """Mean final-motion length over reaches that triggered the Palmar reflex."""
    lengths = [
        float(np.linalg.norm(r.vectors["m_pf"]))
        for r in records
        if r.palmar and r.vectors.get("m_pf") is not None
    ]
    if not lengths:
        raise InsufficientData("no Palmar bumps to derive a motion scale from")
    return float(np.mean(lengths))


# ----- cosine similarity learning -----


def cos_bucket(value: float) -> float:
    """Nearest value of the {-1, -0.5, 0, 0.5, 1} grid."""
    return float(np.round(np.clip(value, -1.0, 1.0) * 2.0) / 2.0) + 0.0


@dataclass
class CosSimTable:
    rows: pd.DataFrame  # pair, bucket, trials, palmar, rate
    skipped: dict[str, str] = field(default_factory=dict)

    def pair(self, v1: str, v2: str) -> pd.DataFrame:
        return self.rows[self.rows["pair"] == f"{v1}|{v2}"]


def build_cos_sim_table(records: Sequence[EventRecord]) -> CosSimTable:
    """Palmar-bump rate per vector pair and discretized cosine similarity."""
    rows, skipped = [], {}
    for v1, v2 in itertools.combinations(VECTOR_NAMES, 2):
        name = f"{v1}|{v2}"
        counts = {b: [0, 0] for b in COS_BUCKETS}
        for record in records:
            a, b = record.vectors.get(v1), record.vectors.get(v2)
            if a is None or b is None:
                continue
            try:
                c = Vec3Dir(*a).cosine(Vec3Dir(*b))
            except DegenerateVector:
                continue
            bucket = counts[cos_bucket(c)]
            bucket[0] += 1
            bucket[1] += int(record.palmar)
        if not any(n for n, _ in counts.values()):
            skipped[name] = InsufficientData(f"no usable samples for {name}").message
            logger.debug("Skipping cosine pair %s: no samples", name)
            continue
        for b in COS_BUCKETS:
            n, p = counts[b]
            rows.append({"pair": name, "bucket": b, "trials": n, "palmar": p, "rate": p / n if n else float("nan")})
    return CosSimTable(pd.DataFrame(rows, columns=["pair", "bucket", "trials", "palmar", "rate"]), skipped)


@dataclass
class ApproachGeometry:
    peaks: dict[str, float]
    parallel: list[str]
    perpendicular: list[str]
    skipped: list[str]

    @property
    def consistent(self) -> bool:
        """Hand and motion vectors parallel to each other and perpendicular to the target axis."""
        expected = {k: (0.0 if k.endswith("|o") else 1.0) for k in self.peaks}
        return bool(self.peaks) and all(self.peaks[k] == v for k, v in expected.items())

    def to_dict(self) -> dict[str, Any]:
        return {
            "peaks": self.peaks,
            "parallel": self.parallel,
            "perpendicular": self.perpendicular,
            "skipped": self.skipped,
            "consistent": self.consistent,
        }


def conclude_approach_geometry(table: CosSimTable) -> ApproachGeometry:
    """Bucket with the highest Palmar rate per pair; ties go to the better-sampled, then larger bucket."""
    peaks: dict[str, float] = {}
    for name, group in table.rows.groupby("pair", sort=False):
        populated = group[group["trials"] > 0]
        if populated.empty:
            continue
        best = populated.sort_values(["rate", "trials", "bucket"], ascending=False, kind="stable").iloc[0]
        peaks[str(name)] = float(best["bucket"])
    parallel = [k for k, b in peaks.items() if not k.endswith("|o") and b == 1.0]
    perpendicular = [k for k, b in peaks.items() if k.endswith("|o") and b == 0.0]
    return ApproachGeometry(peaks, parallel, perpendicular, sorted(table.skipped))


# ----- approach planning -----


def plan_grasp_approach(
    graph: PpsGraph,
    target: TargetView,
    limits: Optional[np.ndarray] = None,
    preshape: float = 21.0,
    aim: Optional[Center3] = None,
    cutoff: Optional[float] = None,
    policy: str = "cosine",
) -> Plan:
    """Final node with the gripper across the target axis, reached through a preshape position."""
    if target.orientation is None:
        raise NoCandidates("target orientation undefined")
    cands = candidate_final_nodes(graph, target)
    members = cands.tier1
    st = graph.feature_stack()
    dist = np.linalg.norm(st["palm_center"][members] - target.center.array(), axis=1)
    if cutoff is not None:
        keep = dist < cutoff
        members, dist = members[keep], dist[keep]
    if members.size == 0:
        raise NoCandidates("no candidate final nodes" + (f" within {cutoff}" if cutoff is not None else ""))

    o = target.orientation.array()
    alignment = np.array([_abs_cosine(graph.nodes[i].gripper, o) for i in members])
    n_f = int(members[np.lexsort((members, dist, alignment))[0]])
    node = graph.nodes[n_f]
    try:
        jac = local_jacobian(graph, n_f)
    except NoNeighbors as e:
        raise NoCandidates(f"node {n_f} has no Jacobian") from e

    adj = adjust_final_config(node.q, node.palm_center, aim or target.center, jac, limits)
    dq = (-preshape * node.gripper.unit()) @ jac.J_inv
    q_p = adj.q_star + dq
    if limits is not None:
        q_p = np.clip(q_p, limits[:, 0], limits[:, 1])
    c_p = adj.predicted_center.array() + (q_p - adj.q_star) @ jac.J
    n_n = int(np.argmin(np.linalg.norm(st["q"] - q_p, axis=1)))
    path, relaxed = plan_path(graph, target, n_n)
    return Plan(
        policy=policy,
        final_node=n_f,
        path=path,
        extra=[q_p, adj.q_star],
        q_star=adj.q_star,
        predicted_center=adj.predicted_center,
        clamped=adj.clamped,
        candidates=cands,
        relaxed=relaxed,
        penultimate_center=Center3(*map(float, c_p)),
        penultimate_gripper=node.gripper,
    )


def _abs_cosine(g: Vec3Dir, o: np.ndarray) -> float:
    try:
        return abs(g.cosine(Vec3Dir(*o)))
    except DegenerateVector:
        return 1.0


# ----- wrist orientation -----


@dataclass
class GraspExample:
    placement: list[float]
    q: list[float]  # q1..q6 of the executed final configuration
    q7: float
    outcome: str = "grasp"
    interval: Optional[tuple[float, float]] = None


def longest_success_interval(grid: Sequence[float], successes: Sequence[bool]) -> tuple[float, float]:
    """Longest contiguous run of successes; ties go to the lower-q7 run."""
    best: Optional[tuple[int, int]] = None
    start = None
    for i, ok in enumerate([*successes, False]):
        if ok and start is None:
            start = i
        elif not ok and start is not None:
            if best is None or (i - start) > (best[1] - best[0] + 1):
                best = (start, i - 1)
            start = None
    if best is None:
        raise NoSuccessfulInterval("no wrist angle reproduced the grasp")
    return float(grid[best[0]]), float(grid[best[1]])


@dataclass
class GraspContext(ReachContext):
    """Reach context plus the grasp-specific knobs."""

    aperture: float = 1.0
    preshape: float = 21.0
    tuning: "FineTunePolicy" = field(default_factory=lambda: FineTunePolicy())
    examples: list[GraspExample] = field(default_factory=list)


def wrist_search(ctx: GraspContext, placement: Placement, steps: int = 16, trial: int = 0) -> GraspExample:
    """Replay the cosine approach over a q7 grid; the ideal q7 centres the widest success run."""
    world = ctx.world.copy()
    world.reset_blocks([placement])
    world.reset_arm(world.home_q, ctx.aperture)
    target = TargetView.observe(world.render(tag=CaptureTag("P", ctx.graph.home_id)), 0)
    plan = plan_grasp_approach(ctx.graph, target, world.arm.limits, ctx.preshape)
    lo, hi = world.arm.limits[WRIST_TWIST]
    grid = np.linspace(lo, hi, steps + 1)

    def replay(i: int) -> EventRecord:
        w = ctx.world.copy()
        w.reset_blocks([placement])
        w.reset_arm(w.home_q, ctx.aperture)
        settings = ExecSettings(aperture=ctx.aperture, resume=True, change_threshold=ctx.change_threshold)
        return execute_reach(w, ctx.graph, replace(plan, q7=float(grid[i])), target, ctx.clusterer, settings, trial, "grasp")

    records = run_trials(replay, len(grid), ctx.workers)
    successes = [classify_grasp(r).success for r in records]
    try:
        low, high = longest_success_interval(grid, successes)
    except NoSuccessfulInterval as e:
        raise NoSuccessfulInterval(f"placement {placement.as_list()} not reproduced on the wrist grid") from e
    logger.debug("Wrist interval [%.3f, %.3f] at trial %d", low, high, trial)
    return GraspExample(placement.as_list(), plan.q_star[:6].tolist(), (low + high) / 2.0, "grasp", (low, high))


def wrist_transfer(examples: Sequence[GraspExample], q_star: np.ndarray) -> float:
    """Ideal q7 of the nearest example over q1..q6; ties go to the lower index."""
    if not examples:
        raise NoExamples("example grasp database is empty")
    Q = np.array([e.q[:6] for e in examples], dtype=float)
    d = np.linalg.norm(Q - np.asarray(q_star, dtype=float)[:6], axis=1)
    return float(examples[int(np.argmin(d))].q7)


_EXAMPLE_COLUMNS = ["schema_version", "x", "y", "yaw", "q1", "q2", "q3", "q4", "q5", "q6", "q7", "outcome"]


def save_examples(examples: Sequence[GraspExample], path: str | Path) -> Path:
    path = Path(path)
    rows = [
        {"schema_version": EXAMPLE_SCHEMA_VERSION, "x": e.placement[0], "y": e.placement[1], "yaw": e.placement[2],
         **{f"q{i + 1}": v for i, v in enumerate(e.q[:6])}, "q7": e.q7, "outcome": e.outcome}
        for e in examples
    ]
    pd.DataFrame(rows, columns=_EXAMPLE_COLUMNS).to_csv(path, index=False, float_format="%.17g")
    return path


def load_examples(path: str | Path) -> list[GraspExample]:
    df = pd.read_csv(path)
    if not df.empty and set(df["schema_version"]) != {EXAMPLE_SCHEMA_VERSION}:
        raise ValueError(f"unsupported example schema in {path}")
    return [
        GraspExample([row.x, row.y, row.yaw], [getattr(row, f"q{i}") for i in range(1, 7)], float(row.q7), str(row.outcome))
        for row in df.itertuples(index=False)
    ]


# ----- fine-tuned policy -----


@dataclass(frozen=True)
class FineTunePolicy:
    cutoff: float = 21.0  # strict
    stop_on_reflex: bool = True
    coefficients: tuple[float, float, float] = (0.125, -0.25, -0.125)  # (u, v, d) per unit major-axis length
    preshape: float = 21.0

    def __post_init__(self):
        if self.cutoff <= 0:
            raise ValueError("cutoff must be positive")

    def aim_offset(self, axis_length: float) -> tuple[float, float, float]:
        cu, cv, cd = self.coefficients
        return (cu * axis_length, cv * axis_length, cd * axis_length)


def fine_tuned_grasp(
    graph: PpsGraph,
    target: TargetView,
    policy: FineTunePolicy,
    examples: Sequence[GraspExample] = (),
    limits: Optional[np.ndarray] = None,
) -> Plan:
    """Close candidates only, aim off the perceived centre, transfer the wrist angle."""
    aim = target.center.shifted(policy.aim_offset(target.axis_length))
    plan = plan_grasp_approach(graph, target, limits, policy.preshape, aim, policy.cutoff, policy="fine-tuned")
    if examples:
        plan.q7 = wrist_transfer(examples, plan.q_star)
    return plan


# ----- evaluation -----


def _plan_for(ctx: GraspContext, target: TargetView, method: str, trial: int, limits: np.ndarray) -> Plan:
    rng = rng_stream(ctx.seed, f"grasp-{method}", trial)
    if method == "accidental":
        return plan_reach(ctx.graph, target, "jacobian-adjusted", rng, ctx.comparator, limits)

    attempts: list[tuple[Optional[str], Any]] = []
    if method == "fine-tuned":
        attempts.append((None, lambda: fine_tuned_grasp(ctx.graph, target, ctx.tuning, ctx.examples, limits)))
        attempts.append(("unfiltered", lambda: plan_grasp_approach(ctx.graph, target, limits, ctx.tuning.preshape, policy=method)))
    elif method in ("cosine", "wrist"):
        attempts.append((None, lambda: plan_grasp_approach(ctx.graph, target, limits, ctx.preshape, policy=method)))
    else:
        raise ValueError(f"unknown grasp method {method!r}")

    for fallback, build in attempts:
        try:
            plan = build()
        except NoCandidates as e:
            logger.debug("Trial %d %s: %s", trial, method, e.message)
            continue
        plan.fallback = fallback
        break
    else:
        plan = plan_reach(ctx.graph, target, "jacobian-adjusted", rng, ctx.comparator, limits)
        plan.fallback = "reach"
    plan.policy = method

    if method in ("wrist", "fine-tuned") and plan.q7 is None and plan.q_star is not None:
        try:
            plan.q7 = wrist_transfer(ctx.examples, plan.q_star)
        except NoExamples:
            logger.warning("No wrist examples; %s trial %d keeps stored wrist angles", method, trial)
    return plan


def grasp_trial(
    ctx: GraspContext,
    placement: Placement,
    method: str,
    trial: int,
    stop_on_reflex: Optional[bool] = None,
) -> EventRecord:
    world = ctx.world.copy()
    world.reset_blocks([placement])
    world.reset_arm(world.home_q, ctx.aperture)
    target = TargetView.observe(world.render(tag=CaptureTag("P", ctx.graph.home_id)), 0)
    plan = _plan_for(ctx, target, method, trial, world.arm.limits)
    if stop_on_reflex is None:
        stop_on_reflex = method == "fine-tuned" and ctx.tuning.stop_on_reflex
    settings = ExecSettings(
        aperture=ctx.aperture, stop_on_reflex=stop_on_reflex, resume=True, change_threshold=ctx.change_threshold
    )
    record = execute_reach(world, ctx.graph, plan, target, ctx.clusterer, settings, trial=trial, kind="grasp")
    record.outcome = classify_grasp(record).cls
    return record


@dataclass
class GraspReport:
    method: str
    rows: pd.DataFrame
    summary: dict[str, Any]
    records: list[EventRecord] = field(default_factory=list)


GRASP_ROW_COLUMNS = [
    "trial", "method", "x", "y", "yaw", "outcome", "palmar", "bump_ground_truth",
    "attached_throughout", "candidate_count", "tier", "fallback",
]


def grasp_rows(records: Sequence[EventRecord]) -> pd.DataFrame:
    rows = []
    for r in records:
        x, y, yaw = (r.observations[0].placement + [np.nan] * 3)[:3]
        rows.append(
            {
                "trial": r.trial, "method": r.policy, "x": x, "y": y, "yaw": yaw, "outcome": r.outcome,
                "palmar": r.palmar, "bump_ground_truth": r.bump_ground_truth,
                "attached_throughout": bool(r.attached_at_return) and all(r.attached_at_return),
                "candidate_count": r.candidate_count, "tier": r.tier, "fallback": r.fallback,
            }
        )
    return pd.DataFrame(rows, columns=GRASP_ROW_COLUMNS)


def grasp_summary(records: Sequence[EventRecord], method: str) -> dict[str, Any]:
    counts = {cls: sum(r.outcome == cls for r in records) for cls in OUTCOMES}
    return {
        "method": method,
        "n": len(records),
        "miss": counts["miss"],
        "bump": counts["bump"],
        "palmar": counts["palmar-bump"],
        "weak": counts["weak-grasp"],
        "grasp": counts["grasp"],
        "palmar_any": sum(r.palmar for r in records),
        "bump_ground_truth": sum(r.bump_ground_truth for r in records),
    }


def evaluate(
    ctx: GraspContext,
    placements: Sequence[Placement],
    method: str,
    stop_on_reflex: Optional[bool] = None,
) -> GraspReport:
    """Per-placement outcomes and aggregate counts for one grasp method."""
    records = run_trials(lambda i: grasp_trial(ctx, placements[i], method, i, stop_on_reflex), len(placements), ctx.workers)
    label = method if stop_on_reflex is None or stop_on_reflex == (method == "fine-tuned") else f"{method}-no-stop"
    for r in records:
        r.policy = label
    summary = grasp_summary(records, label)
    logger.info("Grasp %-12s %d/%d grasps, %d Palmar", label, summary["grasp"], summary["n"], summary["palmar_any"])
    return GraspReport(label, grasp_rows(records), summary, list(records))


def collect_examples(ctx: GraspContext, placements: Sequence[Placement], records: Sequence[EventRecord], steps: int = 16) -> list[GraspExample]:
    """Wrist search over every successful grasp of the cosine method."""
    examples = []
    for r in records:
        if r.outcome != "grasp":
            continue
        try:
            examples.append(wrist_search(ctx, placements[r.trial], steps, r.trial))
        except (NoSuccessfulInterval, NoCandidates) as e:
            logger.warning("Wrist search skipped trial %d: %s", r.trial, e)
    logger.info("Collected %d wrist examples", len(examples))
    return examples


def offset_grid(
    ctx: GraspContext,
    placements: Sequence[Placement],
    grid: Optional[Sequence[tuple[float, float, float]]] = None,
) -> pd.DataFrame:
    """Grasp counts of the fine-tuned policy over centre-offset coefficients, best first."""
    if grid is None:
        base = ctx.tuning.coefficients
        steps = (-0.125, 0.0, 0.125)
        grid = [(base[0] + a, base[1] + b, base[2] + c) for a in steps for b in steps for c in steps]
    rows = []
    for coeffs in grid:
        run = replace(ctx, tuning=replace(ctx.tuning, coefficients=tuple(coeffs)))
        report = evaluate(run, placements, "fine-tuned")
        rows.append(
            {"cu": coeffs[0], "cv": coeffs[1], "cd": coeffs[2], "grasps": report.summary["grasp"],
             "rate": rate(report.summary["grasp"], report.summary["n"])}
        )
    df = pd.DataFrame(rows, columns=["cu", "cv", "cd", "grasps", "rate"])
    return df.sort_values(["grasps", "cu", "cv", "cd"], ascending=[False, True, True, True], kind="stable").reset_index(drop=True)


# ----- generalization -----


def two_proportion_test(k1: int, n1: int, k2: int, n2: int) -> tuple[float, float]:
    """Pooled two-proportion z statistic and two-sided p-value."""
    if n1 == 0 or n2 == 0:
        return float("nan"), float("nan")
    pooled = (k1 + k2) / (n1 + n2)
    se = np.sqrt(pooled * (1.0 - pooled) * (1.0 / n1 + 1.0 / n2))
    if se == 0.0:
        return 0.0, 1.0
    z = (k1 / n1 - k2 / n2) / se
    return float(z), float(2.0 * stats.norm.sf(abs(z)))


def generalization_study(train: GraspReport, test: GraspReport) -> dict[str, Any]:
    """Train vs test grasp rate and placement difficulty (candidate counts)."""
    k1, n1 = train.summary["grasp"], train.summary["n"]
    k2, n2 = test.summary["grasp"], test.summary["n"]
    z, p = two_proportion_test(k1, n1, k2, n2)
    c1 = train.rows["candidate_count"].to_numpy(dtype=float)
    c2 = test.rows["candidate_count"].to_numpy(dtype=float)
    if len(c1) > 1 and len(c2) > 1 and (c1.std() > 0 or c2.std() > 0):
        t, p_t = (float(v) for v in stats.ttest_ind(c1, c2, equal_var=False))
    else:
        t, p_t = float("nan"), float("nan")
    result = {
        "method": test.method,
        "train_grasps": k1,
        "train_n": n1,
        "test_grasps": k2,
        "test_n": n2,
        "train_rate": rate(k1, n1),
        "test_rate": rate(k2, n2),
        "z": z,
        "p_rate": p,
        "train_mean_candidates": float(c1.mean()) if len(c1) else float("nan"),
        "test_mean_candidates": float(c2.mean()) if len(c2) else float("nan"),
        "t": t,
        "p_candidates": p_t,
    }
    logger.info("Generalization: train %.3f, test %.3f (p=%.4f)", result["train_rate"], result["test_rate"], p)
    return result
