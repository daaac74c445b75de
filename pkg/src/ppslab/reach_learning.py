# src/ppslab/reach_learning.py - Bump discovery and the reach policy ladder

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Optional, Sequence

import jsonschema
import numpy as np
import pandas as pd
from scipy.cluster.vq import kmeans2

from ppslab.errors import (
    BlockNotVisible,
    DegenerateMask,
    InsufficientData,
    InsufficientHistory,
    NoPath,
)
from ppslab.percept import (
    Center3,
    CaptureTag,
    DepthRange,
    Mask,
    Percept,
    Vec3Dir,
    center,
    changed_fraction,
    depth_range,
    extract_hand_masks,
    iou,
    major_axis_length,
    target_mask,
    target_orientation,
    visible_block_mask,
)
from ppslab.pps_graph import LocalJacobian, PpsGraph, local_jacobian, shortest_path
from ppslab.sim_world import Placement, SimWorld, detect_palmar_bump, sample_placements
from ppslab.state import EVENT_RECORD_SCHEMA
from ppslab.utils import rng_stream

logger = logging.getLogger(__name__)

RECORD_SCHEMA_VERSION = 1
FEATURE_KINDS = ("f_c", "f_u", "f_v", "f_d")  # declared order doubles as tie-break
MASK_KINDS = ("p_f", "h_f", "s_pf")
TIERS = ("both-intersect", "depth-only", "any")


# ----- target observation -----


@dataclass(frozen=True)
class TargetView:
    """Target features seen from the home pose."""

    block_id: int
    mask: Mask
    depth: DepthRange
    center: Center3
    orientation: Optional[Vec3Dir]
    axis_length: float

    @classmethod
    def observe(cls, p: Percept, block_id: int) -> "TargetView":
        t = target_mask(p, block_id)
        try:
            o: Optional[Vec3Dir] = target_orientation(p, t)
            length = major_axis_length(t)
        except DegenerateMask:
            o, length = None, 1.0
        return cls(block_id, t, depth_range(p, t), center(p, t), o, length)


# ----- IOU clustering -----


@dataclass
class IouClusterer:
    """Two-cluster split of IOU history; the smaller cluster is the rare 'bump' event."""

    values: list[float] = field(default_factory=list)
    centroids: Optional[tuple[float, float]] = None
    frozen: bool = False

    def fit(self) -> tuple[float, float]:
        if len(self.values) < 2:
            raise InsufficientHistory(f"clustering needs two values, have {len(self.values)}")
        data = np.asarray(self.values, dtype=float)
        lo, hi = float(data.min()), float(data.max())
        if lo == hi:
            self.centroids = (lo, hi)
            return self.centroids
        codebook, _ = kmeans2(data, np.array([lo, hi]), iter=len(data) + 1, minit="matrix", missing="warn")
        low, high = sorted(float(c) for c in codebook)
        self.centroids = (low, high)
        return self.centroids

    def _assign(self, values: np.ndarray) -> np.ndarray:
        low, high = self.centroids
        return (np.abs(values - low) > np.abs(values - high)).astype(int)

    def cluster_sizes(self) -> tuple[int, int]:
        if self.centroids is None:
            return (0, 0)
        labels = self._assign(np.asarray(self.values, dtype=float))
        return int((labels == 0).sum()), int((labels == 1).sum())

    @property
    def bump_cluster(self) -> int:
        low_n, high_n = self.cluster_sizes()
        return 0 if low_n <= high_n else 1

    @property
    def rare_count(self) -> int:
        return min(self.cluster_sizes())

    def is_bump(self, value: float) -> bool:
        return int(self._assign(np.array([value]))[0]) == self.bump_cluster

    def classify(self, value: float) -> str:
        """Classify a new IOU; unless frozen the value joins the history first."""
        if not self.frozen:
            if len(self.values) < 2:
                raise InsufficientHistory(f"clustering needs two values, have {len(self.values)}")
            self.values.append(float(value))
            self.fit()
        elif self.centroids is None:
            raise InsufficientHistory("frozen clusterer was never fitted")
        return "bump" if self.is_bump(value) else "usual"

    def to_dict(self) -> dict[str, Any]:
        return {"values": self.values, "centroids": self.centroids, "frozen": self.frozen}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "IouClusterer":
        c = data.get("centroids")
        return cls(values=list(data["values"]), centroids=tuple(c) if c else None, frozen=data.get("frozen", False))


def classify_iou(clusterer: IouClusterer, value: float) -> str:
    return clusterer.classify(value)


# ----- records -----


@dataclass
class ObjectObservation:
    block_id: int
    placement: list[float]
    iou: float
    bump: bool
    ground_truth: bool
    target_center: list[float]
    target_depth: list[float]
    target_axis_length: float
    final_palm_center: Optional[list[float]] = None
    candidate: bool = False
    groups: dict[str, list[bool]] = field(default_factory=dict)


@dataclass
class EventRecord:
    """One executed trajectory."""

    trial: int
    kind: str
    path: list[int]
    observations: list[ObjectObservation]
    policy: Optional[str] = None
    final_node: Optional[int] = None
    penultimate_node: Optional[int] = None
    q_star: Optional[list[float]] = None
    aperture: float = 0.0
    q7: Optional[float] = None
    aborted_at: Optional[int] = None
    resumed: int = 0
    bump_final: bool = False
    bump_anywhere: bool = False
    bump_ground_truth: bool = False
    early_contact: bool = False
    palmar: bool = False
    palmar_step: Optional[int] = None
    return_hits: Optional[list[bool]] = None
    attached_at_return: Optional[list[bool]] = None
    target_moved: Optional[list[bool]] = None
    vectors: dict[str, Optional[list[float]]] = field(default_factory=dict)
    candidate_count: int = 0
    tier: Optional[str] = None
    relaxed: bool = False
    fallback: Optional[str] = None
    outcome: Optional[str] = None
    schema_version: int = RECORD_SCHEMA_VERSION

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "EventRecord":
        data = dict(data)
        data["observations"] = [ObjectObservation(**o) for o in data.get("observations", [])]
        return cls(**data)


def write_records(path: str | Path, records: Iterable[EventRecord], append: bool = False) -> Path:
    """Append records as JSON lines, validating each."""
    path = Path(path)
    with open(path, "a" if append else "w", encoding="utf-8") as fh:
        for record in records:
            doc = record.to_dict()
            jsonschema.validate(doc, EVENT_RECORD_SCHEMA)
            fh.write(json.dumps(doc, sort_keys=True) + "\n")
    return path


def read_records(path: str | Path) -> list[EventRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                doc = json.loads(line)
                jsonschema.validate(doc, EVENT_RECORD_SCHEMA)
                records.append(EventRecord.from_dict(doc))
    return records


# ----- plans and execution -----


@dataclass
class Plan:
    """Trajectory from home through graph nodes, then optional off-graph configurations."""

    policy: str
    final_node: int
    path: list[int]
    extra: list[np.ndarray] = field(default_factory=list)
    q_star: Optional[np.ndarray] = None
    predicted_center: Optional[Center3] = None
    clamped: list[int] = field(default_factory=list)
    candidates: Optional["CandidateSet"] = None
    relaxed: bool = False
    q7: Optional[float] = None
    fallback: Optional[str] = None
    penultimate_center: Optional[Center3] = None
    penultimate_gripper: Optional[Vec3Dir] = None

    def waypoints(self, graph: PpsGraph) -> list[tuple[np.ndarray, Optional[int]]]:
        points = [(graph.nodes[i].q.copy(), i) for i in self.path]
        points += [(np.asarray(q, dtype=float).copy(), None) for q in self.extra]
        if self.q7 is not None:
            for q, _ in points:
                q[6] = self.q7
        return points


@dataclass
class ExecSettings:
    aperture: float = 0.0
    stop_on_reflex: bool = False
    resume: bool = True
    change_threshold: float = 0.2


@dataclass
class Execution:
    """Raw outcome of running a plan, before it is turned into a record."""

    reached: int  # index of the last waypoint reached going forward
    aborted_at: Optional[int]
    resumed: int
    ious: dict[int, float]
    classes: dict[int, str]
    contact: dict[int, bool]
    first_contact: dict[int, Optional[int]]
    aperture_trace: list[tuple[float, float]]
    palmar_step: Optional[int]
    return_hits: dict[int, list[bool]]
    attached_at_return: dict[int, list[bool]]
    target_moved: dict[int, list[bool]]
    aborted_bump: bool


def _arm_hand(world: SimWorld, graph: PpsGraph, q: np.ndarray, node_id: Optional[int]) -> tuple[Mask, DepthRange]:
    """Hand mask expected at a configuration in an empty world (stored for unmodified nodes)."""
    if node_id is not None and np.array_equal(graph.nodes[node_id].q, q):
        node = graph.nodes[node_id]
        return node.hand, node.hand_depth
    p = world.render(q=q, a=1.0, include_blocks=False)
    _, hand = extract_hand_masks(p)
    return hand, depth_range(p, hand)


def run_plan(
    world: SimWorld,
    graph: PpsGraph,
    plan: Plan,
    targets: dict[int, TargetView],
    clusterer: Optional[IouClusterer],
    settings: ExecSettings,
) -> Execution:
    """Execute a plan with mask monitoring, abort-and-resume, and a monitored return home."""
    wp = plan.waypoints(graph)
    last = len(wp) - 1
    trace: list[tuple[float, float]] = []
    contact = {k: False for k in targets}
    first_contact: dict[int, Optional[int]] = {k: None for k in targets}
    palmar_step: Optional[int] = None
    step_offset = 0

    def move(q: np.ndarray, index: int, stop: bool) -> bool:
        nonlocal palmar_step, step_offset
        out = world.step_to(q, None, stop_on_reflex=stop)
        trace.extend(out.aperture_trace)
        for e in out.events:
            if e.block_id in contact and e.kind in ("push", "palmar-trigger", "attach", "topple-off"):
                contact[e.block_id] = True
                if first_contact[e.block_id] is None:
                    first_contact[e.block_id] = index
            if e.kind == "palmar-trigger" and palmar_step is None:
                palmar_step = step_offset + e.step
        step_offset += len(out.aperture_trace)
        return out.reflex_stop_step is not None

    def go_home(from_index: int, capture: bool):
        hits = {k: [] for k in targets}
        attached = {k: [] for k in targets}
        moved = {k: [] for k in targets}
        previous = {k: t.mask for k, t in targets.items()}
        final_p = None
        for j in range(from_index, -1, -1):
            q, node_id = wp[j]
            move(q, -1, False)
            if not capture and j > 0:
                continue
            p = world.render(tag=CaptureTag("P2", node_id))
            final_p = p
            if node_id is None:
                continue
            hand, hand_depth = _arm_hand(world, graph, q, node_id)
            for k in targets:
                seen = visible_block_mask(p, k)
                hit = bool(seen) and hand.intersects(seen) and hand_depth.intersects(depth_range(p, seen))
                hits[k].append(hit)
                attached[k].append(world.state.attached == k)
                moved[k].append(not (seen == previous[k]))
                previous[k] = seen
        return final_p, hits, attached, moved

    def score(p: Percept) -> tuple[dict[int, float], dict[int, str]]:
        ious, classes = {}, {}
        for k, t in targets.items():
            value = iou(t.mask, visible_block_mask(p, k))
            ious[k] = value
            if clusterer is not None and clusterer.centroids is not None and clusterer.frozen:
                classes[k] = clusterer.classify(value)
            else:
                classes[k] = "pending"
        return ious, classes

    aborted_at: Optional[int] = None
    resumed = 0
    ignore_until = 0
    aborted_bump = False
    j = 1
    reached = 0
    halted = False
    while j <= last:
        halted = move(wp[j][0], j, settings.stop_on_reflex)
        reached = j
        if halted:
            break
        if j > ignore_until and j < last:
            p1 = world.render(tag=CaptureTag("P1", wp[j][1]))
            if any(changed_fraction(t.mask, p1, k) > settings.change_threshold for k, t in targets.items()):
                aborted_at = j
                final_p, *_ = go_home(j - 1, capture=False)
                ious, classes = score(final_p)
                if not settings.resume or any(c == "bump" for c in classes.values()):
                    aborted_bump = any(c == "bump" for c in classes.values())
                    return Execution(
                        reached=j, aborted_at=j, resumed=resumed, ious=ious, classes=classes,
                        contact=contact, first_contact=first_contact, aperture_trace=trace,
                        palmar_step=palmar_step, return_hits={k: [] for k in targets},
                        attached_at_return={k: [] for k in targets}, target_moved={k: [] for k in targets},
                        aborted_bump=aborted_bump,
                    )
                resumed += 1
                ignore_until = j
                j = 1
                continue
        j += 1

    final_p, hits, attached, moved = go_home(reached - 1, capture=True)
    if final_p is None:
        final_p = world.render(tag=CaptureTag("P2", wp[0][1]))
    ious, classes = score(final_p)
    return Execution(
        reached=reached, aborted_at=aborted_at, resumed=resumed, ious=ious, classes=classes,
        contact=contact, first_contact=first_contact, aperture_trace=trace, palmar_step=palmar_step,
        return_hits=hits, attached_at_return=attached, target_moved=moved, aborted_bump=aborted_bump,
    )


def _observation(
    graph: PpsGraph,
    world_placement: list[float],
    t: TargetView,
    final: Optional[int],
    penultimate: Optional[int],
    ex: Execution,
    final_center: Optional[Center3] = None,
) -> ObjectObservation:
    k = t.block_id
    groups: dict[str, list[bool]] = {}
    candidate = False
    palm_center = None
    if final is not None and graph.nodes[final].palm is not None:
        f = graph.nodes[final]
        p = penultimate if penultimate is not None else final
        swept, swept_d = graph.swept(p, final)
        groups = {
            "p_f": [f.palm.intersects(t.mask), f.palm_depth.intersects(t.depth)],
            "h_f": [f.hand.intersects(t.mask), f.hand_depth.intersects(t.depth)],
            "s_pf": [swept.intersects(t.mask), swept_d.intersects(t.depth)],
        }
        candidate = all(groups["p_f"])
        palm_center = (final_center or f.palm_center).array().tolist()
    return ObjectObservation(
        block_id=k,
        placement=world_placement,
        iou=float(ex.ious[k]),
        bump=ex.classes[k] == "bump",
        ground_truth=ex.contact[k],
        target_center=t.center.array().tolist(),
        target_depth=[t.depth.lo, t.depth.hi],
        target_axis_length=t.axis_length,
        final_palm_center=palm_center,
        candidate=candidate,
        groups=groups,
    )


def _approach_vectors(graph: PpsGraph, plan: Plan, t: TargetView) -> dict[str, Optional[list[float]]]:
    f = graph.nodes[plan.final_node]
    c_f = plan.predicted_center or f.palm_center
    if plan.penultimate_center is not None:
        c_p, g_p = plan.penultimate_center, plan.penultimate_gripper or f.gripper
    else:
        prev = graph.nodes[plan.path[-2]] if len(plan.path) > 1 else f
        c_p, g_p = prev.palm_center, prev.gripper
    return {
        "g_p": g_p.array().tolist(),
        "g_f": f.gripper.array().tolist(),
        "m_pf": c_p.to(c_f).array().tolist(),
        "m_pt": c_p.to(t.center).array().tolist(),
        "m_ft": c_f.to(t.center).array().tolist(),
        "o": None if t.orientation is None else t.orientation.array().tolist(),
    }


def execute_reach(
    world: SimWorld,
    graph: PpsGraph,
    plan: Plan,
    target: TargetView,
    clusterer: IouClusterer,
    settings: ExecSettings,
    trial: int = 0,
    kind: str = "reach",
) -> EventRecord:
    """Run one single-target plan and turn the outcome into a record."""
    k = target.block_id
    placement = _placement_of(world, k)
    ex = run_plan(world, graph, plan, {k: target}, clusterer, settings)
    completed = ex.aborted_at is None or ex.reached == len(plan.waypoints(graph)) - 1
    full = completed and not ex.aborted_bump
    final_node = plan.final_node if full else _last_node(plan, ex.reached)
    penultimate = _node_before(plan, final_node)
    obs = _observation(graph, placement, target, final_node, penultimate, ex, plan.predicted_center if full else None)
    final_graph_index = len(plan.path) - 1
    first = ex.first_contact[k]
    record = EventRecord(
        trial=trial,
        kind=kind,
        policy=plan.policy,
        path=list(plan.path),
        observations=[obs],
        final_node=final_node,
        penultimate_node=penultimate,
        q_star=None if plan.q_star is None else plan.q_star.tolist(),
        aperture=settings.aperture,
        q7=plan.q7,
        aborted_at=ex.aborted_at,
        resumed=ex.resumed,
        bump_final=full and obs.bump,
        bump_anywhere=obs.bump or ex.aborted_bump,
        bump_ground_truth=ex.contact[k],
        early_contact=first is not None and 0 < first < final_graph_index,
        palmar=detect_palmar_bump(ex.aperture_trace),
        palmar_step=ex.palmar_step,
        return_hits=ex.return_hits[k],
        attached_at_return=ex.attached_at_return[k],
        target_moved=ex.target_moved[k],
        vectors=_approach_vectors(graph, plan, target),
        candidate_count=0 if plan.candidates is None else len(plan.candidates.tier1),
        tier=None if plan.candidates is None else plan.candidates.tier,
        relaxed=plan.relaxed,
        fallback=plan.fallback,
    )
    return record


def _last_node(plan: Plan, reached: int) -> int:
    return plan.path[min(reached, len(plan.path) - 1)]


def _node_before(plan: Plan, node: int) -> Optional[int]:
    if node not in plan.path:
        # off-path final node of an approach plan; the last graph node precedes it
        return plan.path[-1] if plan.path else None
    idx = plan.path.index(node)
    return plan.path[idx - 1] if idx > 0 else None


def _placement_of(world: SimWorld, block_id: int) -> list[float]:
    block = world.state.blocks.get(block_id)
    return list(block.placement()) if block is not None else []


# ----- exploration -----


def random_exploration(
    world: SimWorld,
    graph: PpsGraph,
    seed: int,
    n_blocks: int = 3,
    rare_target: int = 20,
    max_trajectories: int = 400,
    change_threshold: float = 0.2,
) -> tuple[list[EventRecord], IouClusterer]:
    """Random reaches over multi-block scenes until the rare IOU cluster is populated."""
    if n_blocks < 1:
        raise ValueError("exploration needs at least one block per trajectory")
    clusterer = IouClusterer()
    records: list[EventRecord] = []
    settings = ExecSettings(aperture=0.0, resume=False, change_threshold=change_threshold)
    pending: list[list[ObjectObservation]] = []

    for trial in range(max_trajectories):
        placements = sample_placements(world, 1, rng_stream(seed, "explore-placement", trial), per_set=n_blocks)[0]
        world.reset_arm(world.home_q, settings.aperture)
        world.reset_blocks(placements)
        home = world.render(tag=CaptureTag("P", graph.home_id))
        targets = {k: TargetView.observe(home, k) for k in range(n_blocks)}
        rng = rng_stream(seed, "explore-policy", trial)
        n_f = int(rng.integers(len(graph)))
        plan = Plan(policy="exploration", final_node=n_f, path=shortest_path(graph, graph.home_id, n_f))

        ex = run_plan(world, graph, plan, targets, None, settings)
        final_node = plan.path[min(ex.reached, len(plan.path) - 1)]
        penultimate = _node_before(plan, final_node)
        observations = [
            _observation(graph, list(p.as_list()), targets[k], final_node, penultimate, ex)
            for k, p in enumerate(placements)
        ]
        clusterer.values.extend(ex.ious[k] for k in range(n_blocks))
        if len(clusterer.values) >= 2:
            clusterer.fit()
        pending.append(observations)
        records.append(
            EventRecord(
                trial=trial, kind="exploration", policy="exploration", path=plan.path,
                observations=observations, final_node=final_node, penultimate_node=penultimate,
                aperture=settings.aperture, aborted_at=ex.aborted_at,
                bump_ground_truth=any(ex.contact.values()),
            )
        )
        if clusterer.centroids is not None and clusterer.rare_count >= rare_target:
            logger.info("Exploration stopped after %d trajectories", trial + 1)
            break
    else:
        logger.warning("Exploration hit the trajectory cap (%d) before %d rare events", max_trajectories, rare_target)

    # final labels come from the converged clustering
    for record in records:
        for obs in record.observations:
            obs.bump = clusterer.is_bump(obs.iou)
        record.bump_anywhere = record.bump_final = any(o.bump for o in record.observations)
    clusterer.frozen = True
    return records, clusterer


# ----- candidate criterion and feature selection -----


def bump_probability_table(records: Sequence[EventRecord]) -> pd.DataFrame:
    """P(bump | mask kind, mask intersects target, depth intersects target)."""
    rows = []
    for kind in MASK_KINDS:
        for mask_hit in (True, False):
            for depth_hit in (True, False):
                trials = bumps = 0
                for record in records:
                    for obs in record.observations:
                        g = obs.groups.get(kind)
                        if g is None or g[0] != mask_hit or g[1] != depth_hit:
                            continue
                        trials += 1
                        bumps += obs.bump
                rows.append(
                    {
                        "mask_kind": kind,
                        "mask_hit": mask_hit,
                        "depth_hit": depth_hit,
                        "trials": trials,
                        "bumps": bumps,
                        "probability": bumps / trials if trials else float("nan"),
                    }
                )
    return pd.DataFrame(rows)


def best_group(table: pd.DataFrame) -> Optional[tuple[str, bool, bool]]:
    populated = table[table["trials"] > 0]
    if populated.empty:
        return None
    row = populated.sort_values("probability", ascending=False, kind="stable").iloc[0]
    return str(row["mask_kind"]), bool(row["mask_hit"]), bool(row["depth_hit"])


@dataclass
class CandidateSet:
    tier: str
    node_ids: np.ndarray
    distances: np.ndarray  # ||c^t - c^p_f|| per member
    tier1: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))

    def __len__(self) -> int:
        return len(self.node_ids)


def candidate_final_nodes(graph: PpsGraph, target: TargetView) -> CandidateSet:
    """Nodes whose palm mask and depth meet the target, relaxed until nonempty."""
    st = graph.feature_stack()
    mask_hit = st["palm"][:, target.mask.bits].any(axis=1)
    pd_ = st["palm_depth"]
    depth_hit = (pd_[:, 1] >= target.depth.lo) & (pd_[:, 0] <= target.depth.hi)
    dist = np.linalg.norm(st["palm_center"] - target.center.array(), axis=1)
    tier1 = np.flatnonzero(mask_hit & depth_hit)
    for tier, members in ((TIERS[0], tier1), (TIERS[1], np.flatnonzero(depth_hit)), (TIERS[2], np.arange(len(graph)))):
        if members.size:
            return CandidateSet(tier, members, dist[members], tier1)
    return CandidateSet(TIERS[2], np.arange(len(graph)), dist, tier1)


@dataclass(frozen=True)
class Comparator:
    kind: str = "f_c"
    k: float = float("inf")

    def metric(self, target_center: np.ndarray, palm_centers: np.ndarray) -> np.ndarray:
        diff = np.abs(np.atleast_2d(palm_centers) - np.asarray(target_center))
        if self.kind == "f_c":
            return np.linalg.norm(diff, axis=1)
        return diff[:, {"f_u": 0, "f_v": 1, "f_d": 2}[self.kind]]

    def holds(self, target_center: np.ndarray, palm_center: np.ndarray) -> bool:
        return bool(self.metric(target_center, palm_center)[0] < self.k)

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "k": self.k}


def feature_samples(records: Sequence[EventRecord]) -> pd.DataFrame:
    """One row per observation whose final node was a tier-one candidate."""
    rows = []
    for record in records:
        for obs in record.observations:
            if not obs.candidate or obs.final_palm_center is None:
                continue
            d = np.abs(np.array(obs.final_palm_center) - np.array(obs.target_center))
            rows.append({"du": d[0], "dv": d[1], "dd": d[2], "dc": float(np.linalg.norm(d)), "bump": bool(obs.bump)})
    return pd.DataFrame(rows, columns=["du", "dv", "dd", "dc", "bump"])


_FEATURE_COLUMN = {"f_c": "dc", "f_u": "du", "f_v": "dv", "f_d": "dd"}


def feature_curves(samples: pd.DataFrame, thresholds: Sequence[float]) -> pd.DataFrame:
    """P(bump | candidate and feature below k) per feature kind and threshold."""
    rows = []
    for kind in FEATURE_KINDS:
        col = samples[_FEATURE_COLUMN[kind]] if not samples.empty else pd.Series(dtype=float)
        for k in thresholds:
            held = samples[col < k] if not samples.empty else samples
            n = len(held)
            bumps = int(held["bump"].sum()) if n else 0
            rows.append({"kind": kind, "k": float(k), "candidates": n, "bumps": bumps, "probability": bumps / n if n else float("nan")})
    return pd.DataFrame(rows)


def select_feature(
    samples: pd.DataFrame | Sequence[EventRecord],
    thresholds: Sequence[float] = tuple(float(k) for k in range(2, 41, 2)),
) -> Comparator:
    """Feature kind winning the most thresholds; its threshold is the widest attaining its best rate."""
    if not isinstance(samples, pd.DataFrame):
        samples = feature_samples(samples)
    if samples.empty:
        raise InsufficientData("no candidate observations to select a feature from")
    curves = feature_curves(samples, thresholds)
    wins = {kind: 0 for kind in FEATURE_KINDS}
    for k in thresholds:
        at_k = curves[(curves["k"] == float(k)) & (curves["candidates"] > 0)]
        if at_k.empty:
            continue
        best = at_k["probability"].max()
        winner = next(kind for kind in FEATURE_KINDS if ((at_k["kind"] == kind) & (at_k["probability"] == best)).any())
        wins[winner] += 1
    if not any(wins.values()):
        raise InsufficientData("no threshold selects any candidate")
    top = max(wins.values())
    kind = next(kind for kind in FEATURE_KINDS if wins[kind] == top)
    own = curves[(curves["kind"] == kind) & (curves["candidates"] > 0)]
    best_rate = own["probability"].max()
    k = float(own[own["probability"] == best_rate]["k"].max())
    logger.info("Selected comparator %s (k=%.1f, wins %s)", kind, k, wins)
    return Comparator(kind, k)


# ----- planning -----


def _ban_predicate(graph: PpsGraph, target: TargetView, dst: int) -> Callable[[int, int], bool]:
    """Ban non-final edges whose swept hand region meets the target in mask and depth."""
    st = graph.feature_stack()
    tb = target.mask.bbox()
    boxes, depths = st["hand_bbox"], st["hand_depth"]

    def banned(i: int, j: int) -> bool:
        if i == dst or j == dst or tb is None:
            return False
        r0 = min(boxes[i, 0], boxes[j, 0])
        r1 = max(boxes[i, 1], boxes[j, 1])
        c0 = min(boxes[i, 2], boxes[j, 2])
        c1 = max(boxes[i, 3], boxes[j, 3])
        if r1 < tb[0] or tb[1] < r0 or c1 < tb[2] or tb[3] < c0:
            return False
        lo, hi = min(depths[i, 0], depths[j, 0]), max(depths[i, 1], depths[j, 1])
        if hi < target.depth.lo or target.depth.hi < lo:
            return False
        swept, swept_d = graph.swept(i, j)
        return swept.intersects(target.mask) and swept_d.intersects(target.depth)

    return banned


def plan_path(graph: PpsGraph, target: Optional[TargetView], dst: int) -> tuple[list[int], bool]:
    """Shortest home->dst path avoiding target-sweeping edges; returns (path, relaxed)."""
    if target is not None:
        try:
            return shortest_path(graph, graph.home_id, dst, _ban_predicate(graph, target, dst)), False
        except NoPath:
            logger.debug("No path to %d avoiding the target; relaxing bans", dst)
    return shortest_path(graph, graph.home_id, dst), target is not None


@dataclass
class Adjustment:
    q_star: np.ndarray
    predicted_center: Center3
    clamped: list[int]


def adjust_final_config(
    q_f: np.ndarray,
    palm_center: Center3,
    aim: Center3,
    jac: LocalJacobian,
    limits: Optional[np.ndarray] = None,
) -> Adjustment:
    """Off-graph correction q* = q_f + (c^t - c^p_f) J^+, clamped to the joint ranges."""
    dc = aim.array() - palm_center.array()
    q_star = np.asarray(q_f, dtype=float) + dc @ jac.J_inv
    clamped: list[int] = []
    if limits is not None:
        low, high = limits[:, 0], limits[:, 1]
        clamped = [int(k) for k in np.flatnonzero((q_star < low) | (q_star > high))]
        q_star = np.clip(q_star, low, high)
        if clamped:
            logger.warning("JointLimit: clamped joints %s for node %d", clamped, jac.node_id)
    predicted = palm_center.array() + (q_star - q_f) @ jac.J
    return Adjustment(q_star, Center3(*map(float, predicted)), clamped)


def plan_reach(
    graph: PpsGraph,
    target: TargetView,
    policy: str,
    rng: np.random.Generator,
    comparator: Optional[Comparator] = None,
    limits: Optional[np.ndarray] = None,
) -> Plan:
    """Choose a final node by policy and plan the home->final trajectory."""
    candidates = candidate_final_nodes(graph, target)
    if policy == "random-node":
        n_f = int(rng.integers(len(graph)))
    elif policy == "random-candidate":
        n_f = int(rng.choice(candidates.node_ids))
    elif policy in ("nearest-candidate", "jacobian-adjusted"):
        n_f = nearest_candidate(graph, target, candidates, comparator)
    else:
        raise ValueError(f"unknown reach policy {policy!r}")

    path, relaxed = plan_path(graph, target, n_f)
    plan = Plan(policy=policy, final_node=n_f, path=path, candidates=candidates, relaxed=relaxed)
    if policy == "jacobian-adjusted" and len(graph) > 1:
        node = graph.nodes[n_f]
        adj = adjust_final_config(node.q, node.palm_center, target.center, local_jacobian(graph, n_f), limits)
        plan.q_star, plan.predicted_center, plan.clamped = adj.q_star, adj.predicted_center, adj.clamped
        plan.extra = [adj.q_star]
    return plan


def nearest_candidate(
    graph: PpsGraph,
    target: TargetView,
    candidates: CandidateSet,
    comparator: Optional[Comparator] = None,
) -> int:
    """Candidate minimizing the comparator metric; ties go to the lower node id."""
    comparator = comparator or Comparator()
    centers = graph.feature_stack()["palm_center"][candidates.node_ids]
    metric = comparator.metric(target.center.array(), centers)
    order = np.lexsort((candidates.node_ids, metric))
    return int(candidates.node_ids[order[0]])


# ----- evaluation -----


@dataclass
class ReachContext:
    """Everything a reach trial needs besides its placement."""

    world: SimWorld
    graph: PpsGraph
    clusterer: IouClusterer
    comparator: Comparator = field(default_factory=Comparator)
    seed: int = 0
    aperture: float = 0.0
    change_threshold: float = 0.2
    workers: int = 1


def reach_trial(ctx: ReachContext, placement: Placement, policy: str, trial: int) -> EventRecord:
    world = ctx.world.copy()
    world.reset_blocks([placement])
    world.reset_arm(world.home_q, ctx.aperture)
    target = TargetView.observe(world.render(tag=CaptureTag("P", ctx.graph.home_id)), 0)
    rng = rng_stream(ctx.seed, f"reach-{policy}", trial)
    plan = plan_reach(ctx.graph, target, policy, rng, ctx.comparator, world.arm.limits)
    settings = ExecSettings(aperture=ctx.aperture, resume=True, change_threshold=ctx.change_threshold)
    return execute_reach(world, ctx.graph, plan, target, ctx.clusterer, settings, trial=trial)


def run_trials(fn: Callable[[int], EventRecord], count: int, workers: int = 1) -> list[EventRecord]:
    """Run trials in index order, optionally on a thread pool; results stay index-ordered."""
    if workers <= 1:
        return [fn(i) for i in range(count)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(count)))


def evaluate_reach_policy(ctx: ReachContext, placements: Sequence[Placement], policy: str) -> list[EventRecord]:
    records = run_trials(lambda i: reach_trial(ctx, placements[i], policy, i), len(placements), ctx.workers)
    summary = reach_summary(records, policy)
    logger.info(
        "Reach %-18s final %d/%d, anywhere %d, ground truth %d",
        policy, summary["bumps_final"], summary["trials"], summary["bumps_any"], summary["bumps_ground_truth"],
    )
    return records


def reach_summary(records: Sequence[EventRecord], policy: str) -> dict[str, Any]:
    return {
        "policy": policy,
        "trials": len(records),
        "bumps_final": sum(r.bump_final for r in records),
        "bumps_any": sum(r.bump_anywhere for r in records),
        "bumps_ground_truth": sum(r.bump_ground_truth for r in records),
    }


def false_positive_count(records: Sequence[EventRecord]) -> int:
    """Observed bumps without simulator contact."""
    return sum(1 for r in records for o in r.observations if o.bump and not o.ground_truth)
