# tests/test_grasp_learning.py - Palmar detection, grasp outcomes, approach geometry and wrist transfer

import numpy as np
import pandas as pd
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ppslab.errors import MissingReturnPercepts, NoCandidates, NoExamples, NoSuccessfulInterval
from ppslab.grasp_learning import (
    COS_BUCKETS,
    OUTCOMES,
    CosSimTable,
    FineTunePolicy,
    GraspContext,
    GraspExample,
    GraspReport,
    aperture_experiment,
    build_cos_sim_table,
    classify_grasp,
    conclude_approach_geometry,
    cos_bucket,
    derive_motion_scale,
    evaluate,
    fine_tuned_grasp,
    generalization_study,
    grasp_rows,
    grasp_summary,
    load_examples,
    longest_success_interval,
    offset_grid,
    plan_grasp_approach,
    save_examples,
    two_proportion_test,
    wrist_transfer,
)
from ppslab.percept import Center3
from ppslab.pps_graph import PpsGraph, node_from_percept
from ppslab.reach_learning import (
    EventRecord,
    ExecSettings,
    ObjectObservation,
    Plan,
    ReachContext,
    TargetView,
    execute_reach,
)
from ppslab.sim_world import WRIST_TWIST, Block, detect_palmar_bump, sample_placements
from ppslab.utils import rng_stream


def grasp_record(trial=0, hits=(), moved=None, palmar=False, bump=False, attached=None, outcome=None, candidates=0):
    obs = ObjectObservation(
        block_id=0, placement=[0.6, 0.1, 0.3], iou=0.5, bump=bump, ground_truth=bump or palmar,
        target_center=[80.0, 60.0, 20.0], target_depth=[18.0, 22.0], target_axis_length=12.0,
    )
    return EventRecord(
        trial=trial, kind="grasp", path=[0, 1], observations=[obs], policy="cosine",
        palmar=palmar, bump_final=bump, bump_anywhere=bump, bump_ground_truth=bump or palmar,
        return_hits=None if hits is None else list(hits),
        target_moved=list(moved) if moved is not None else [False] * len(hits or ()),
        attached_at_return=list(attached) if attached is not None else [False] * len(hits or ()),
        outcome=outcome, candidate_count=candidates,
    )


# ----- Palmar detection -----


def test_palmar_bump_holds_the_blocked_aperture():
    assert detect_palmar_bump([(0.2, 0.2), (0.4, 0.3), (0.6, 0.3), (0.8, 0.3)])


def test_palmar_bump_needs_a_positive_command():
    assert not detect_palmar_bump([(0.0, 0.0), (0.0, 0.0)])
    assert not detect_palmar_bump([])


def test_aperture_released_again_is_not_palmar():
    assert not detect_palmar_bump([(0.4, 0.4), (0.6, 0.5), (0.8, 0.8)])


@given(st.lists(st.floats(0.0, 1.0), max_size=30))
def test_tracking_command_is_never_palmar(commands):
    assert not detect_palmar_bump([(c, c) for c in commands])


# ----- grasp outcomes -----


def test_grasp_needs_contact_at_every_return_node():
    assert classify_grasp(grasp_record(hits=[True, True, True])).cls == "grasp"
    assert classify_grasp(grasp_record(hits=[True, True, True])).success


def test_block_dropped_on_the_way_home_is_weak():
    r = grasp_record(hits=[True, True, False], moved=[False, True, True])
    assert classify_grasp(r).cls == "weak-grasp"


def test_single_return_contact_is_not_weak():
    r = grasp_record(hits=[True, False, False], moved=[False, True, True], palmar=True)
    assert classify_grasp(r).cls == "palmar-bump"


def test_remaining_outcomes():
    assert classify_grasp(grasp_record(hits=[False, False], bump=True)).cls == "bump"
    assert classify_grasp(grasp_record(hits=[False, False])).cls == "miss"
    assert classify_grasp(grasp_record(hits=[])).cls == "miss"


def test_classification_needs_return_percepts():
    with pytest.raises(MissingReturnPercepts):
        classify_grasp(grasp_record(hits=None))


def test_motion_scale_from_palmar_reaches():
    a = grasp_record(palmar=True)
    a.vectors = {"m_pf": [3.0, 4.0, 0.0]}
    b = grasp_record(palmar=True)
    b.vectors = {"m_pf": [0.0, 0.0, 15.0]}
    c = grasp_record()
    c.vectors = {"m_pf": [100.0, 0.0, 0.0]}
    assert derive_motion_scale([a, b, c]) == pytest.approx(10.0)


# ----- cosine similarity -----


def test_cos_bucket_rounds_to_half_steps():
    assert cos_bucket(0.9) == 1.0
    assert cos_bucket(0.3) == 0.5
    assert cos_bucket(-0.1) == 0.0
    assert cos_bucket(-0.8) == -1.0
    assert str(cos_bucket(-0.1)) == "0.0"


@given(st.floats(-1.5, 1.5))
def test_cos_bucket_lands_on_the_grid(value):
    assert cos_bucket(value) in COS_BUCKETS


def vector_record(palmar, g_f, o, m_pf=(0.0, 0.0, 1.0)):
    r = grasp_record(palmar=palmar)
    r.vectors = {"g_p": list(g_f), "g_f": list(g_f), "m_pf": list(m_pf), "m_pt": list(m_pf), "m_ft": list(m_pf), "o": list(o)}
    return r


def test_cos_sim_table_counts_palmar_per_bucket():
    records = [
        vector_record(True, (0.0, 1.0, 0.0), (1.0, 0.0, 0.0)),
        vector_record(True, (0.0, 1.0, 0.0), (1.0, 0.0, 0.0)),
        vector_record(False, (1.0, 0.0, 0.0), (1.0, 0.0, 0.0)),
    ]
    table = build_cos_sim_table(records)
    g_o = table.pair("g_f", "o").set_index("bucket")
    assert len(g_o) == len(COS_BUCKETS)
    assert (g_o.loc[0.0, "trials"], g_o.loc[0.0, "palmar"]) == (2, 2)
    assert (g_o.loc[1.0, "trials"], g_o.loc[1.0, "palmar"]) == (1, 0)
    assert table.skipped == {}


def test_missing_orientation_skips_target_pairs():
    r = vector_record(True, (0.0, 1.0, 0.0), (1.0, 0.0, 0.0))
    r.vectors["o"] = None
    table = build_cos_sim_table([r])
    assert "g_f|o" in table.skipped
    assert table.pair("g_f", "o").empty


def test_geometry_from_a_consistent_table():
    rows = []
    for name in ("g_p|g_f", "g_f|m_pf", "g_f|o", "m_pf|o"):
        peak = 0.0 if name.endswith("|o") else 1.0
        for b in COS_BUCKETS:
            rows.append({"pair": name, "bucket": b, "trials": 4, "palmar": 3 if b == peak else 1,
                         "rate": (3 if b == peak else 1) / 4})
    geometry = conclude_approach_geometry(CosSimTable(pd.DataFrame(rows)))
    assert geometry.peaks["g_f|o"] == 0.0
    assert geometry.parallel == ["g_p|g_f", "g_f|m_pf"]
    assert geometry.perpendicular == ["g_f|o", "m_pf|o"]
    assert geometry.consistent
    assert geometry.to_dict()["consistent"] is True


def test_geometry_ties_prefer_better_sampled_buckets():
    rows = [
        {"pair": "g_f|o", "bucket": 0.0, "trials": 2, "palmar": 1, "rate": 0.5},
        {"pair": "g_f|o", "bucket": 0.5, "trials": 8, "palmar": 4, "rate": 0.5},
        {"pair": "g_f|o", "bucket": 1.0, "trials": 0, "palmar": 0, "rate": float("nan")},
    ]
    geometry = conclude_approach_geometry(CosSimTable(pd.DataFrame(rows)))
    assert geometry.peaks == {"g_f|o": 0.5}
    assert not geometry.consistent


# ----- approach planning -----


def test_approach_prefers_gripper_across_the_target_axis(tier_graph, target_view):
    plan = plan_grasp_approach(tier_graph, target_view, preshape=21.0)
    assert plan.final_node == 2
    assert plan.policy == "cosine"
    assert len(plan.extra) == 2
    np.testing.assert_array_equal(plan.extra[1], plan.q_star)
    assert plan.penultimate_center is not None
    assert plan.penultimate_gripper == tier_graph.nodes[2].gripper
    assert plan.path[0] == tier_graph.home_id


def test_approach_needs_an_orientation(tier_graph, target_view):
    blind = TargetView(0, target_view.mask, target_view.depth, target_view.center, None, 1.0)
    with pytest.raises(NoCandidates):
        plan_grasp_approach(tier_graph, blind)


def test_candidate_cutoff_is_strict(tier_graph, target_view):
    # tier-one palms sit 21 and 30 pixels from this target centre
    far = TargetView(0, target_view.mask, target_view.depth, Center3(5, 5, -10), target_view.orientation, 4.0)
    with pytest.raises(NoCandidates):
        plan_grasp_approach(tier_graph, far, cutoff=21.0)
    assert plan_grasp_approach(tier_graph, far, cutoff=21.5).final_node == 1


def test_fine_tuned_aim_offset_scales_with_axis_length():
    assert FineTunePolicy().aim_offset(20.0) == (2.5, -5.0, -2.5)
    with pytest.raises(ValueError):
        FineTunePolicy(cutoff=0.0)


def test_fine_tuned_plan_takes_the_nearest_wrist_angle(tier_graph, target_view):
    examples = [GraspExample([0.6, 0.1, 0.0], [5.0] * 6, 1.2), GraspExample([0.6, 0.1, 0.0], [0.0] * 6, -0.4)]
    plan = fine_tuned_grasp(tier_graph, target_view, FineTunePolicy(), examples)
    assert plan.policy == "fine-tuned"
    assert plan.q7 == -0.4
    assert fine_tuned_grasp(tier_graph, target_view, FineTunePolicy()).q7 is None


# ----- wrist orientation -----


def test_longest_success_interval():
    grid = np.linspace(-1.0, 1.0, 9)
    successes = [False, True, True, True, False, True, True, False, False]
    assert longest_success_interval(grid, successes) == (grid[1], grid[3])


def test_longest_success_interval_tie_goes_to_lower_run():
    grid = [0.0, 1.0, 2.0, 3.0, 4.0]
    assert longest_success_interval(grid, [True, True, False, True, True]) == (0.0, 1.0)
    assert longest_success_interval(grid, [False, False, False, False, True]) == (4.0, 4.0)
    with pytest.raises(NoSuccessfulInterval):
        longest_success_interval(grid, [False] * 5)


def test_wrist_transfer_uses_the_nearest_example():
    examples = [
        GraspExample([0.0, 0.0, 0.0], [0.0] * 6, 0.3),
        GraspExample([0.0, 0.0, 0.0], [1.0] * 6, -0.7),
        GraspExample([0.0, 0.0, 0.0], [0.0] * 6, 0.9),
    ]
    assert wrist_transfer(examples, np.array([0.9] * 6 + [2.0])) == -0.7
    assert wrist_transfer(examples, np.zeros(7)) == 0.3
    with pytest.raises(NoExamples):
        wrist_transfer([], np.zeros(7))


def test_example_database_file(tmp_path):
    examples = [GraspExample([0.61, 0.12, 0.3], [0.1, -0.2, 0.3, 1.4, 0.0, -0.5], 0.25)]
    loaded = load_examples(save_examples(examples, tmp_path / "examples.csv"))
    assert len(loaded) == 1
    assert loaded[0].q == pytest.approx(examples[0].q)
    assert loaded[0].q7 == pytest.approx(0.25)
    assert loaded[0].outcome == "grasp"
    assert load_examples(save_examples([], tmp_path / "empty.csv")) == []


# ----- evaluation summaries -----


def test_grasp_summary_and_rows():
    records = [
        grasp_record(0, outcome="grasp", palmar=True, attached=[True, True], hits=[True, True], candidates=3),
        grasp_record(1, outcome="palmar-bump", palmar=True, hits=[False], candidates=1),
        grasp_record(2, outcome="miss", hits=[False], candidates=0),
    ]
    summary = grasp_summary(records, "cosine")
    assert (summary["n"], summary["grasp"], summary["palmar"], summary["miss"]) == (3, 1, 1, 1)
    assert summary["palmar_any"] == 2
    assert summary["grasp"] <= summary["palmar_any"] <= summary["bump_ground_truth"]

    rows = grasp_rows(records)
    assert rows["attached_throughout"].tolist() == [True, False, False]
    assert rows.loc[0, "x"] == pytest.approx(0.6)


def test_two_proportion_test():
    z, p = two_proportion_test(30, 40, 20, 40)
    assert z == pytest.approx(2.3094, abs=1e-3)
    assert p == pytest.approx(0.0209, abs=1e-3)
    assert two_proportion_test(5, 10, 5, 10) == (0.0, 1.0)
    assert two_proportion_test(0, 10, 0, 10) == (0.0, 1.0)
    assert all(np.isnan(two_proportion_test(0, 0, 1, 2)))


def test_generalization_study_compares_rates_and_difficulty():
    train_records = [grasp_record(i, outcome="grasp" if i < 3 else "miss", hits=[True], candidates=4 + i) for i in range(4)]
    test_records = [grasp_record(i, outcome="grasp" if i < 1 else "miss", hits=[True], candidates=1 + i) for i in range(4)]
    train = GraspReport("fine-tuned", grasp_rows(train_records), grasp_summary(train_records, "fine-tuned"))
    test = GraspReport("fine-tuned", grasp_rows(test_records), grasp_summary(test_records, "fine-tuned"))
    study = generalization_study(train, test)
    assert (study["train_grasps"], study["test_grasps"]) == (3, 1)
    assert study["train_rate"] == 0.75 and study["test_rate"] == 0.25
    assert study["train_mean_candidates"] == 5.5
    assert study["test_mean_candidates"] == 2.5
    assert study["t"] > 0
    assert 0.0 < study["p_rate"] < 1.0


# ----- simulator trials -----


@pytest.fixture
def placements(base_world):
    return [s[0] for s in sample_placements(base_world, 2, rng_stream(5, "placements-train"))]


def test_aperture_study_has_one_row_per_aperture(base_world, small_graph, frozen_clusterer, placements):
    ctx = ReachContext(world=base_world, graph=small_graph, clusterer=frozen_clusterer, seed=5)
    table, by_aperture = aperture_experiment(ctx, placements[:1], apertures=(0.0, 1.0))
    assert table["aperture"].tolist() == [0.0, 1.0]
    assert (table["trials"] == 1).all()
    assert table[["bump_rate", "ground_truth_rate", "palmar_rate"]].isin([0.0, 1.0]).all().all()
    assert [r.aperture for r in by_aperture[1.0]] == [1.0]


def test_evaluate_classifies_every_trial(base_world, small_graph, frozen_clusterer, placements):
    ctx = GraspContext(world=base_world, graph=small_graph, clusterer=frozen_clusterer, seed=5)
    report = evaluate(ctx, placements, "cosine")
    s = report.summary
    assert s["n"] == 2
    assert s["miss"] + s["bump"] + s["palmar"] + s["weak"] + s["grasp"] == 2
    assert report.rows["trial"].tolist() == [0, 1]
    assert set(report.rows["method"]) == {"cosine"}
    assert all(r.outcome in OUTCOMES for r in report.records)

    no_stop = evaluate(ctx, placements, "fine-tuned", stop_on_reflex=False)
    assert no_stop.method == "fine-tuned-no-stop"


def test_offset_grid_ranks_best_first(base_world, small_graph, frozen_clusterer, placements):
    ctx = GraspContext(world=base_world, graph=small_graph, clusterer=frozen_clusterer, seed=5)
    ranking = offset_grid(ctx, placements[:1], grid=[(0.0, 0.0, 0.0), (0.125, -0.25, -0.125)])
    assert len(ranking) == 2
    assert ranking["grasps"].is_monotonic_decreasing
    assert set(ranking["rate"]) <= {0.0, 1.0}


def wrist_twist_graph(world) -> PpsGraph:
    """Home and a small wrist roll about the palm axis, which keeps the palm centre in place."""
    empty = world.copy()
    empty.reset_blocks([])
    twisted = world.home_q.copy()
    twisted[WRIST_TWIST] += 0.05
    graph = PpsGraph()
    for i, q in enumerate((world.home_q, twisted)):
        graph.add_node(node_from_percept(i, q, 1.0, empty.render(q=q, a=1.0, include_blocks=False), home=(i == 0)))
    graph.add_edge(0, 1, chain=True)
    return graph


def twist_and_return(world, graph, clusterer) -> EventRecord:
    target = TargetView.observe(world.render(), 0)
    plan = Plan(policy="cosine", final_node=1, path=[0, 1])
    return execute_reach(world, graph, plan, target, clusterer, ExecSettings(aperture=1.0), kind="grasp")


def test_grasp_outcome_matches_attachment(base_world, frozen_clusterer):
    graph = wrist_twist_graph(base_world)

    held = base_world.copy()
    held.reset_arm(held.home_q, 1.0)
    held.reset_blocks([])
    pose = held.arm.forward(held.home_q)
    held.state.blocks[0] = Block(0, pose.palm_center, pose.rotation.copy(), np.array([0.03, 0.02, 0.02]))
    grasped = twist_and_return(held, graph, frozen_clusterer)
    assert grasped.attached_at_return == [True]
    assert grasped.palmar
    assert classify_grasp(grasped).cls == "grasp"

    home_hand = graph.nodes[0].hand
    clear = base_world.copy()
    clear.reset_arm(clear.home_q, 1.0)
    for (placement,) in sample_placements(base_world, 6, rng_stream(8, "placements-test")):
        clear.reset_blocks([placement])
        if not home_hand.intersects(TargetView.observe(clear.render(), 0).mask):
            break
    else:
        pytest.fail("every sampled placement overlaps the hand")
    untouched = twist_and_return(clear, graph, frozen_clusterer)
    assert untouched.attached_at_return == [False]
    assert classify_grasp(untouched).cls == "miss"

    for record in (grasped, untouched):
        assert (classify_grasp(record).cls == "grasp") == all(record.attached_at_return)
