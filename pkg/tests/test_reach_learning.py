# tests/test_reach_learning.py - Bump clustering, candidate criterion, feature selection and reach planning

from dataclasses import dataclass
from typing import Optional

import numpy as np
import pandas as pd
import pytest
from conftest import SHAPE, SYNTHETIC_SPECS, projected_palm_center, star_graph, synthetic_graph

from ppslab.errors import InsufficientData, InsufficientHistory
from ppslab.percept import CaptureTag, Center3, Mask, Percept, block_label
from ppslab.pps_graph import LocalJacobian, local_jacobian
from ppslab.reach_learning import (
    Comparator,
    EventRecord,
    ExecSettings,
    IouClusterer,
    ObjectObservation,
    Plan,
    ReachContext,
    TargetView,
    adjust_final_config,
    best_group,
    bump_probability_table,
    candidate_final_nodes,
    classify_iou,
    false_positive_count,
    feature_curves,
    nearest_candidate,
    plan_path,
    plan_reach,
    random_exploration,
    reach_summary,
    reach_trial,
    read_records,
    run_plan,
    run_trials,
    select_feature,
    write_records,
)
from ppslab.sim_world import MotionOutcome, sample_placements
from ppslab.utils import rng_stream


# ----- clustering -----


def test_rare_low_iou_is_a_bump():
    clusterer = IouClusterer(values=[0.98, 0.97, 1.0])
    assert clusterer.classify(0.05) == "bump"
    assert clusterer.classify(0.99) == "usual"
    assert clusterer.rare_count == 1


def test_clusterer_needs_history():
    with pytest.raises(InsufficientHistory):
        IouClusterer(values=[0.9]).classify(0.5)
    with pytest.raises(InsufficientHistory):
        IouClusterer(values=[0.9, 0.8], frozen=True).classify(0.5)


def test_frozen_clusterer_keeps_its_history(frozen_clusterer):
    before = list(frozen_clusterer.values)
    assert frozen_clusterer.classify(0.1) == "bump"
    assert frozen_clusterer.values == before
    restored = IouClusterer.from_dict(frozen_clusterer.to_dict())
    assert restored.centroids == frozen_clusterer.centroids
    assert restored.classify(0.97) == "usual"


def test_classify_iou_uses_the_frozen_split(frozen_clusterer):
    assert classify_iou(frozen_clusterer, 0.05) == "bump"
    assert classify_iou(frozen_clusterer, 0.95) == "usual"


# ----- records -----


def observation(bump, ground_truth=True, groups=None, candidate=False, palm=None, target=(0.0, 0.0, 0.0)):
    return ObjectObservation(
        block_id=0, placement=[0.6, 0.1, 0.2], iou=0.1 if bump else 0.99, bump=bump, ground_truth=ground_truth,
        target_center=list(target), target_depth=[5.0, 30.0], target_axis_length=10.0,
        final_palm_center=palm, candidate=candidate, groups=groups or {},
    )


def record(*observations, trial=0) -> EventRecord:
    return EventRecord(trial=trial, kind="exploration", path=[0, 1], observations=list(observations))


def test_records_survive_a_jsonl_file(tmp_path):
    r = record(observation(True, groups={"p_f": [True, False]}), trial=4)
    r.vectors = {"g_f": [1.0, 0.0, 0.0], "o": None}
    path = write_records(tmp_path / "log.jsonl", [r])
    write_records(path, [record(observation(False), trial=5)], append=True)
    loaded = read_records(path)
    assert [x.trial for x in loaded] == [4, 5]
    assert loaded[0].observations[0].groups == {"p_f": [True, False]}
    assert loaded[0].vectors["o"] is None


def test_bump_probability_table_groups_by_intersection():
    records = [
        record(observation(True, groups={"p_f": [True, True]})),
        record(observation(True, groups={"p_f": [True, True]})),
        record(observation(False, groups={"p_f": [True, True]})),
        record(observation(False, groups={"p_f": [False, True]})),
    ]
    table = bump_probability_table(records)
    assert len(table) == 12
    both = table[(table.mask_kind == "p_f") & table.mask_hit & table.depth_hit].iloc[0]
    assert (both.trials, both.bumps) == (3, 2)
    assert both.probability == pytest.approx(2 / 3)
    assert np.isnan(table[(table.mask_kind == "h_f")].probability).all()
    assert best_group(table) == ("p_f", True, True)


def test_false_positives_are_bumps_without_contact():
    records = [record(observation(True, ground_truth=False)), record(observation(True)), record(observation(False))]
    assert false_positive_count(records) == 1


# ----- feature selection -----


def planted_samples() -> pd.DataFrame:
    """Bumps exactly when the centre distance is below 10."""
    rows = [
        (3, 3, 3, True),
        (5, 5, 0, True),
        (6, 6, 6, False),
        (1, 20, 1, False),
        (20, 1, 1, False),
        (1, 1, 20, False),
    ]
    return pd.DataFrame(
        [{"du": u, "dv": v, "dd": d, "dc": float(np.linalg.norm([u, v, d])), "bump": b} for u, v, d, b in rows]
    )


def test_select_feature_finds_the_planted_rule():
    comparator = select_feature(planted_samples())
    assert comparator == Comparator("f_c", 10.0)


def test_feature_curves_cover_every_kind_and_threshold():
    curves = feature_curves(planted_samples(), [6.0, 12.0])
    assert len(curves) == 8
    f_c = curves[curves.kind == "f_c"].set_index("k")
    assert f_c.loc[6.0, "probability"] == 1.0
    assert f_c.loc[12.0, "probability"] == pytest.approx(2 / 3)


def test_select_feature_reads_records():
    records = [
        record(observation(True, candidate=True, palm=[3.0, 0.0, 0.0])),
        record(observation(False, candidate=True, palm=[30.0, 0.0, 0.0])),
        record(observation(True, candidate=False, palm=[1.0, 0.0, 0.0])),
    ]
    comparator = select_feature(records, [4.0, 40.0])
    assert comparator.kind == "f_c" and comparator.k == 4.0


def test_select_feature_without_candidates():
    with pytest.raises(InsufficientData):
        select_feature([record(observation(True))])


def test_comparator_metrics():
    target = np.array([10.0, 0.0, 0.0])
    assert Comparator("f_u", 5.0).holds(target, np.array([12.0, 100.0, 100.0]))
    assert not Comparator("f_c", 5.0).holds(target, np.array([12.0, 100.0, 100.0]))
    assert Comparator("f_d", 1.0).metric(target, np.array([[0.0, 0.0, 3.0]]))[0] == 3.0


# ----- candidates and planning -----


def test_candidates_require_mask_and_depth(tier_graph, target_view):
    cands = candidate_final_nodes(tier_graph, target_view)
    assert cands.tier == "both-intersect"
    assert cands.node_ids.tolist() == [1, 2]
    assert cands.tier1.tolist() == [1, 2]


def test_candidates_relax_to_depth_then_any(target_view):
    depth_only = synthetic_graph([SYNTHETIC_SPECS[0], SYNTHETIC_SPECS[3]])
    cands = candidate_final_nodes(depth_only, target_view)
    assert cands.tier == "depth-only"
    assert cands.node_ids.tolist() == [1]
    assert cands.tier1.size == 0

    far = synthetic_graph([SYNTHETIC_SPECS[0]])
    assert candidate_final_nodes(far, target_view).tier == "any"


def test_nearest_candidate_breaks_ties_by_id(tier_graph, target_view):
    cands = candidate_final_nodes(tier_graph, target_view)
    assert nearest_candidate(tier_graph, target_view, cands) == 2
    shifted = TargetView(0, target_view.mask, target_view.depth, Center3(5, 5, 15.5), None, 1.0)
    assert nearest_candidate(tier_graph, shifted, candidate_final_nodes(tier_graph, shifted)) == 1


def test_plan_path_avoids_sweeping_the_target(target_view):
    # a detour 0-3-2 avoids the edge 0-1 whose sweep covers the target
    graph = synthetic_graph(
        [
            ((0, 0), (10, 20), (0, 0, 15), (1, 0, 0)),
            ((5, 5), (10, 20), (5, 5, 15), (1, 0, 0)),
            ((9, 9), (10, 20), (9, 9, 15), (1, 0, 0)),
            ((0, 9), (10, 20), (0, 9, 15), (1, 0, 0)),
        ]
    )
    graph.add_edge(0, 3, chain=False)
    graph.add_edge(3, 2, chain=False)
    path, relaxed = plan_path(graph, target_view, 2)
    assert path == [0, 3, 2]
    assert not relaxed

    # the final edge into the target node is never banned
    path, relaxed = plan_path(graph, target_view, 1)
    assert path == [0, 1] and not relaxed


def test_plan_path_relaxes_when_every_route_sweeps(target_view):
    graph = synthetic_graph(
        [
            ((0, 0), (10, 20), (0, 0, 15), (1, 0, 0)),
            ((5, 5), (10, 20), (5, 5, 15), (1, 0, 0)),
            ((9, 9), (10, 20), (9, 9, 15), (1, 0, 0)),
        ]
    )
    path, relaxed = plan_path(graph, target_view, 2)
    assert path == [0, 1, 2]
    assert relaxed


def test_adjustment_lands_on_the_aim():
    rng = np.random.default_rng(1)
    J = rng.normal(size=(7, 3))
    jac = LocalJacobian(node_id=0, J=J, J_inv=np.linalg.pinv(J), neighbors=7)
    adj = adjust_final_config(np.zeros(7), Center3(0, 0, 0), Center3(1, 0, 15), jac)
    np.testing.assert_allclose(adj.predicted_center.array(), [1.0, 0.0, 15.0], atol=1e-9)
    assert adj.clamped == []

    limits = np.array([[-0.01, 0.01]] * 7)
    clamped = adjust_final_config(np.zeros(7), Center3(0, 0, 0), Center3(1, 0, 15), jac, limits)
    assert clamped.clamped
    assert np.all(np.abs(clamped.q_star) <= 0.01)


def test_plan_reach_policies_on_synthetic_graph(tier_graph, target_view):
    plan = plan_reach(tier_graph, target_view, "nearest-candidate", rng_stream(0, "reach-nearest-candidate", 0))
    assert plan.final_node == 2
    assert plan.path[0] == tier_graph.home_id and plan.path[-1] == 2
    assert plan.extra == []

    adjusted = plan_reach(tier_graph, target_view, "jacobian-adjusted", rng_stream(0, "reach-jacobian-adjusted", 0))
    assert adjusted.q_star is not None
    assert len(adjusted.extra) == 1
    assert adjusted.predicted_center is not None

    random_candidate = plan_reach(tier_graph, target_view, "random-candidate", rng_stream(0, "reach-random-candidate", 0))
    assert random_candidate.final_node in (1, 2)

    with pytest.raises(ValueError):
        plan_reach(tier_graph, target_view, "teleport", rng_stream(0, "x"))


def test_plan_waypoints_override_the_wrist(tier_graph):
    plan = Plan(policy="wrist", final_node=2, path=[0, 1, 2], extra=[np.ones(7)], q7=0.5)
    points = plan.waypoints(tier_graph)
    assert len(points) == 4
    assert all(q[6] == 0.5 for q, _ in points)
    assert points[-1][1] is None
    assert tier_graph.nodes[1].q[6] == 0.0


def test_run_trials_keeps_index_order():
    assert run_trials(lambda i: i * i, 6, workers=3) == [0, 1, 4, 9, 16, 25]
    assert run_trials(lambda i: i, 3) == [0, 1, 2]


# ----- simulator trials -----


def test_reach_trial_on_a_babbled_graph(base_world, small_graph, frozen_clusterer):
    ctx = ReachContext(world=base_world, graph=small_graph, clusterer=frozen_clusterer, seed=5)
    [[placement]] = sample_placements(base_world, 1, rng_stream(5, "placements-train"))
    r = reach_trial(ctx, placement, "jacobian-adjusted", 0)
    assert r.kind == "reach" and r.policy == "jacobian-adjusted"
    assert r.path[0] == small_graph.home_id
    assert len(r.observations) == 1
    assert r.observations[0].placement == pytest.approx(placement.as_list())
    assert r.bump_final <= r.bump_anywhere
    assert r.q_star is not None and len(r.q_star) == 7

    again = reach_trial(ctx, placement, "jacobian-adjusted", 0)
    assert again.to_dict() == r.to_dict()
    assert reach_summary([r, again], "jacobian-adjusted")["trials"] == 2


def test_local_jacobian_on_babbled_graph(small_graph):
    jac = local_jacobian(small_graph, small_graph.home_id)
    assert jac.J.shape == (7, 3)
    assert jac.J_inv.shape == (3, 7)


def test_target_view_from_home_percept(base_world):
    world = base_world.copy()
    [[placement]] = sample_placements(world, 1, rng_stream(1, "placements-train"))
    world.reset_blocks([placement])
    view = TargetView.observe(world.render(), 0)
    assert view.mask and view.depth.lo <= view.center.d <= view.depth.hi
    assert view.orientation is not None
    assert view.axis_length > 1.0
    assert view.mask.shape == (world.config.image_rows, world.config.image_cols)


def test_random_exploration_labels_every_observation(base_world, small_graph):
    records, clusterer = random_exploration(
        base_world.copy(), small_graph, seed=2, n_blocks=2, rare_target=1000, max_trajectories=3
    )
    assert [r.trial for r in records] == [0, 1, 2]
    assert clusterer.frozen and len(clusterer.values) == 6
    for r in records:
        assert r.kind == "exploration" and r.path[0] == small_graph.home_id
        assert len(r.observations) == 2
        assert all(o.bump == clusterer.is_bump(o.iou) for o in r.observations)
        assert r.bump_final == any(o.bump for o in r.observations)


def test_adjustment_moves_the_rendered_palm_closer(base_world):
    rng = rng_stream(0, "adjust-aims")
    limits = base_world.arm.limits
    closer = total = 0
    for b in range(10):
        q = np.clip(base_world.home_q + rng.normal(0.0, 0.05, size=7), limits[:, 0], limits[:, 1])
        graph = star_graph(base_world, q, 0.01, rng_stream(b, "adjust-neighbours"))
        jac = local_jacobian(graph, 0)
        assert jac.rank == 3
        here = graph.nodes[0].palm_center
        for _ in range(20):
            u = rng.normal(size=3)
            aim = here.shifted(rng.uniform(0.5, 5.0) * u / np.linalg.norm(u))
            adj = adjust_final_config(q, here, aim, jac, limits)
            closer += projected_palm_center(base_world, adj.q_star).distance(aim) < here.distance(aim)
            total += 1
    assert total == 200
    assert closer >= 190


# ----- plan execution with occlusion -----


@dataclass
class ScriptedState:
    attached: Optional[int] = None


class ScriptedWorld:
    """Stand-in world whose renders place block 0 at a scripted pixel per capture."""

    def __init__(self, pixels):
        self.state = ScriptedState()
        self.pixels = pixels
        self.moves = []
        self.captures = []

    def step_to(self, q, a=None, stop_on_reflex=False):
        self.moves.append(np.asarray(q, dtype=float).copy())
        return MotionOutcome(
            events=[], final_q=np.asarray(q, dtype=float), final_aperture=0.0,
            palmar_triggered=False, reflex_stop_step=None, aperture_trace=[(0.0, 0.0)],
        )

    def render(self, q=None, a=None, include_blocks=True, tag=CaptureTag()):
        self.captures.append((tag.kind, tag.node))
        labels = np.zeros(SHAPE, dtype=np.uint8)
        pixel = self.pixels.get((tag.kind, tag.node), (5, 5))
        if pixel is not None:
            labels[Mask.from_pixels(SHAPE, [pixel]).bits] = block_label(0)
        return Percept(labels, np.full(SHAPE, 20, dtype=np.uint8), tag)


def occluded_run(tier_graph, target_view, frozen_clusterer, pixels, **settings):
    world = ScriptedWorld(pixels)
    plan = Plan(policy="jacobian-adjusted", final_node=3, path=[0, 1, 2, 3])
    ex = run_plan(world, tier_graph, plan, {0: target_view}, frozen_clusterer, ExecSettings(**settings))
    return world, ex


def test_occlusion_aborts_returns_home_and_resumes(tier_graph, target_view, frozen_clusterer):
    world, ex = occluded_run(tier_graph, target_view, frozen_clusterer, {("P1", 2): None})
    assert ex.aborted_at == 2
    assert ex.resumed == 1
    assert ex.reached == 3
    assert not ex.aborted_bump
    # out to node 2, back home, out again past the ignored prefix, home
    assert [int(np.flatnonzero(q)[0]) for q in world.moves] == [1, 2, 1, 0, 1, 2, 3, 2, 1, 0]
    assert world.captures == [("P1", 1), ("P1", 2), ("P2", 0), ("P2", 2), ("P2", 1), ("P2", 0)]
    assert len(ex.return_hits[0]) == 3
    assert ex.attached_at_return[0] == [False, False, False]
    assert ex.classes[0] == "usual"


def test_occlusion_with_a_displaced_block_is_a_bump(tier_graph, target_view, frozen_clusterer):
    world, ex = occluded_run(tier_graph, target_view, frozen_clusterer, {("P1", 2): None, ("P2", 0): (8, 8)})
    assert ex.aborted_at == 2
    assert ex.resumed == 0
    assert ex.aborted_bump
    assert ex.classes[0] == "bump"
    assert ex.return_hits == {0: []}
    assert len(world.moves) == 4


def test_occlusion_without_resume_stops_at_home(tier_graph, target_view, frozen_clusterer):
    world, ex = occluded_run(tier_graph, target_view, frozen_clusterer, {("P1", 2): None}, resume=False)
    assert ex.aborted_at == 2
    assert ex.resumed == 0
    assert not ex.aborted_bump
    assert ex.reached == 2
    assert world.captures == [("P1", 1), ("P1", 2), ("P2", 0)]
