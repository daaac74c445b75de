# tests/test_sim_world.py - Simulator contracts

import numpy as np
import pytest

from ppslab.configuration import WorldConfig
from ppslab.errors import InvalidTarget, OverlapError
from ppslab.percept import BACKGROUND, PALM
from ppslab.sim_world import (
    MAX_GAP,
    Block,
    Box,
    JointConfig,
    Placement,
    SimWorld,
    detect_palmar_bump,
    sample_placements,
)
from ppslab.utils import rng_stream


def test_home_pose_is_valid_with_palm_in_view(world):
    assert world.validity_check(world.home_q, 1.0)
    p = world.render()
    assert p.shape == (world.config.image_rows, world.config.image_cols)
    assert (p.labels == PALM).any()


def test_out_of_range_configuration_is_invalid(world):
    q = world.home_q.copy()
    q[0] = world.arm.limits[0, 1] + 0.5
    assert not world.validity_check(q, 1.0)
    assert not world.validity_check(np.full(7, np.nan), 1.0)


def test_joint_config_requires_seven_angles():
    with pytest.raises(ValueError):
        JointConfig(np.zeros(6))
    assert JointConfig(np.zeros(7), 0.5).within_limits(np.array([[-1.0, 1.0]] * 7))


def test_step_to_rejects_targets_outside_ranges(world):
    with pytest.raises(InvalidTarget):
        world.step_to(world.home_q, 1.5)
    q = world.home_q.copy()
    q[3] = world.arm.limits[3, 0] - 0.1
    with pytest.raises(InvalidTarget):
        world.step_to(q)


def test_closing_in_empty_world_tracks_the_command(world):
    world.reset_arm(world.home_q, 1.0)
    out = world.step_to(world.home_q, 0.0)
    assert len(out.aperture_trace) == world.config.substeps
    assert all(actual == pytest.approx(commanded) for commanded, actual in out.aperture_trace)
    assert out.final_aperture == pytest.approx(0.0)
    assert out.events == []
    assert not out.palmar_triggered
    assert not detect_palmar_bump(out.aperture_trace)
    np.testing.assert_allclose(out.final_q, world.home_q)


def test_render_is_deterministic_without_noise(world):
    world.reset_blocks([Placement(0.6, 0.1, 0.3)])
    a, b = world.render(), world.render()
    assert a.same_images(b)


def test_overlapping_blocks_are_refused(world):
    world.place_block(Placement(0.6, 0.1, 0.0))
    with pytest.raises(OverlapError):
        world.place_block(Placement(0.61, 0.1, 0.0))


def test_reset_blocks_restarts_ids(world):
    assert world.reset_blocks([(0.5, 0.0, 0.0), (0.7, 0.2, 0.0)]) == [0, 1]
    assert world.reset_blocks([(0.6, 0.1, 0.0)]) == [0]


def test_snapshot_restores_blocks_and_arm(world):
    world.reset_blocks([Placement(0.55, 0.05, 0.4)])
    record = world.snapshot()
    world.reset_blocks([])
    world.reset_arm(world.home_q, 0.3)
    world.restore(record)
    assert world.state.aperture == pytest.approx(record["aperture"])
    x, y, yaw = world.state.blocks[0].placement()
    assert (x, y, yaw) == pytest.approx((0.55, 0.05, 0.4))
    assert world.place_block(Placement(0.8, 0.3, 0.0)) == 1


def test_sample_placements_are_reproducible_and_in_bounds(base_world):
    first = sample_placements(base_world, 3, rng_stream(11, "placements-test"))
    again = sample_placements(base_world, 3, rng_stream(11, "placements-test"))
    assert first == again
    x0, x1, y0, y1 = base_world.config.placement_bounds
    for (p,) in first:
        assert x0 <= p.x <= x1 and y0 <= p.y <= y1
        assert 0.0 <= p.yaw <= np.pi / 2


def test_sampled_sets_hold_distinct_blocks(base_world):
    (placements,) = sample_placements(base_world, 1, rng_stream(2, "explore-placement", 0), per_set=3)
    world = base_world.copy()
    assert world.reset_blocks(placements) == [0, 1, 2]


def test_disparity_noise_is_seeded():
    config = WorldConfig(disparity_noise=2, noise_seed=5)
    a, b = SimWorld(config).render(), SimWorld(config).render()
    assert a.same_images(b)


# ----- contact during motion -----


def hold_block(world, local_center, half):
    """Float a block in the hand frame at home; blocks only fall once grasped."""
    world.reset_arm(world.home_q, 1.0)
    world.reset_blocks([])
    pose = world.arm.forward(world.home_q)
    world.state.blocks[0] = Block(0, pose.to_world(np.asarray(local_center, dtype=float)), pose.rotation.copy(), np.asarray(half, dtype=float))
    return pose


def swung(world, delta=0.05):
    q = world.home_q.copy()
    q[0] += delta if q[0] + delta <= world.arm.limits[0, 1] else -delta
    return q


def kinds(out):
    return [e.kind for e in out.events]


def test_block_between_the_fingers_is_grasped(world):
    hold_block(world, [0.095, 0.0, 0.0], [0.02, 0.02, 0.02])
    out = world.step_to(world.home_q, 1.0)
    assert kinds(out) == ["palmar-trigger", "attach"]
    assert all(e.step == 1 and e.block_id == 0 for e in out.events)
    assert out.palmar_triggered
    assert world.state.attached == 0
    assert out.final_aperture == pytest.approx(0.04 / MAX_GAP)
    assert detect_palmar_bump(out.aperture_trace)


def test_grasped_block_moves_rigidly_with_the_hand(world):
    hold_block(world, [0.095, 0.0, 0.0], [0.02, 0.02, 0.02])
    world.step_to(world.home_q, 1.0)
    q = swung(world)
    out = world.step_to(q)
    assert out.events == []
    assert world.state.attached == 0
    pose = world.arm.forward(q)
    block = world.state.blocks[0]
    np.testing.assert_allclose(pose.to_local(block.center), [0.095, 0.0, 0.0], atol=1e-9)
    np.testing.assert_allclose(pose.rotation.T @ block.rotation, np.eye(3), atol=1e-9)


def test_reflex_stop_halts_on_the_trigger_substep(world):
    hold_block(world, [0.095, 0.0, 0.0], [0.01, 0.06, 0.01])
    out = world.step_to(swung(world), 1.0, stop_on_reflex=True)
    assert out.reflex_stop_step == 1
    assert len(out.aperture_trace) == 1
    assert out.palmar_triggered
    assert "attach" not in kinds(out)
    assert world.state.attached is None
    assert out.final_aperture == 0.0
    assert detect_palmar_bump(out.aperture_trace)


def test_block_inside_the_palm_base_is_pushed_out(world):
    hold_block(world, [0.025, 0.0, 0.0], [0.01, 0.01, 0.01])
    before = world.state.blocks[0].center.copy()
    out = world.step_to(world.home_q, 1.0)
    assert kinds(out)[0] == "push"
    assert kinds(out).count("push") == 1
    assert not out.palmar_triggered
    push = out.events[0]
    assert push.displacement[0] > 0.0
    assert push.displacement[1] == pytest.approx(0.0)
    if 0 in world.state.blocks:
        shift = world.state.blocks[0].center - before
        np.testing.assert_allclose(shift[:2], push.displacement, atol=1e-12)
        assert shift[2] == 0.0


def grasped_through_the_table(world):
    """Snapshot of a held, world-aligned block whose bottom is below the table."""
    world.reset_arm(world.home_q, 1.0)
    world.reset_blocks([])
    palm = world.arm.forward(world.home_q).palm_center
    half_z = float(palm[2]) + 0.01
    world.state.blocks[0] = Block(0, palm.copy(), np.eye(3), np.array([0.01, 0.01, half_z]))
    record = world.snapshot()
    record.update(attached=0, palmar_latched=True, aperture=0.2)
    return record


def test_block_driven_into_the_table_slips_and_rests_upright(world):
    record = grasped_through_the_table(world)
    world.table = (-5.0, 5.0, -5.0, 5.0)
    world.restore(record)
    out = world.step_to(world.home_q)
    assert kinds(out)[0] == "detach"
    assert "topple-off" not in kinds(out)
    assert world.state.attached is None
    block = world.state.blocks[0]
    assert block.center[2] == pytest.approx(block.half[2])
    np.testing.assert_allclose(block.rotation[:, 2], [0.0, 0.0, 1.0], atol=1e-12)
    assert block.box().corners()[:, 2].min() == pytest.approx(0.0, abs=1e-12)


def test_block_slipping_off_the_table_is_removed(world):
    record = grasped_through_the_table(world)
    world.table = (2.0, 3.0, 2.0, 3.0)
    world.restore(record)
    out = world.step_to(world.home_q)
    assert kinds(out) == ["detach", "topple-off"]
    assert 0 not in world.state.blocks
    assert world.state.attached is None


def test_resting_block_stays_on_the_table(world):
    world.reset_arm(world.home_q, 1.0)
    [[placement]] = sample_placements(world, 1, rng_stream(3, "placements-test"))
    world.reset_blocks([placement])
    before = world.state.blocks[0].center.copy()
    out = world.step_to(swung(world), 0.5)
    assert out.events == []
    block = world.state.blocks[0]
    np.testing.assert_array_equal(block.center, before)
    assert block.center[2] == block.half[2]


def test_palmar_trigger_is_monotone_in_aperture(base_world):
    flags = []
    for a in (0.0, 0.2, 0.6, 0.8, 1.0):
        world = base_world.copy()
        hold_block(world, [0.095, 0.03, 0.0], [0.005, 0.005, 0.005])
        world.reset_arm(world.home_q, a)
        flags.append(world.step_to(world.home_q, a).palmar_triggered)
    assert flags == sorted(flags)
    assert not flags[0]
    assert flags[-1]


def test_hand_crossing_the_body_is_invalid(world):
    assert world.validity_check(world.home_q, 1.0)
    pose = world.arm.forward(world.home_q)
    world.body = Box(pose.to_world(np.array([0.025, 0.0, 0.0])), pose.rotation, np.array([0.001, 1.0, 1.0]), BACKGROUND)
    corners = np.concatenate([b.corners() for b in world.arm.hand_boxes(pose, 1.0)])
    assert not world.body.contains(corners).any()
    assert not world.validity_check(world.home_q, 1.0)
