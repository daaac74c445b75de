# tests/conftest.py - Shared fixtures: simulator, small babbled graph, synthetic graphs

import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ppslab.percept import Center3, DepthRange, Mask, Vec3Dir
from ppslab.pps_graph import Node, PpsGraph, build_graph, densify
from ppslab.reach_learning import IouClusterer, TargetView
from ppslab.sim_world import SimWorld
from ppslab.utils import rng_stream

settings.register_profile("ci", max_examples=200, deadline=None)
settings.register_profile("dev", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "dev"))

SHAPE = (10, 10)


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch):
    """Keep PPSLAB_* variables of the developer shell out of the tests."""
    for key in list(os.environ):
        if key.startswith("PPSLAB_"):
            monkeypatch.delenv(key, raising=False)


@pytest.fixture(scope="session")
def base_world() -> SimWorld:
    return SimWorld()


@pytest.fixture
def world(base_world) -> SimWorld:
    return base_world.copy()


@pytest.fixture(scope="session")
def small_graph(base_world) -> PpsGraph:
    graph = build_graph(base_world.copy(), 30, rng_stream(3, "babble"))
    graph.seed = 3
    return densify(graph)


@pytest.fixture
def frozen_clusterer() -> IouClusterer:
    clusterer = IouClusterer(values=[0.98, 0.97, 1.0, 0.99, 0.05])
    clusterer.fit()
    clusterer.frozen = True
    return clusterer


def synthetic_node(node_id, q, pixel, depth, center, gripper, home=False) -> Node:
    palm = Mask.from_pixels(SHAPE, [pixel])
    c_p = Center3(*center)
    return Node(
        id=node_id,
        q=np.asarray(q, dtype=float),
        palm=palm,
        hand=palm,
        palm_depth=DepthRange(*depth),
        hand_depth=DepthRange(*depth),
        palm_center=c_p,
        hand_center=c_p.shifted(-np.asarray(gripper, dtype=float)),
        gripper=Vec3Dir(*gripper),
        home=home,
    )


def synthetic_graph(specs) -> PpsGraph:
    """Chain graph over ``(pixel, depth, center, gripper)`` node specs."""
    graph = PpsGraph()
    for i, (pixel, depth, center, gripper) in enumerate(specs):
        q = np.zeros(7)
        q[i % 7] = 0.1 * (i + 1)
        graph.add_node(synthetic_node(i, q, pixel, depth, center, gripper, home=(i == 0)))
        if i > 0:
            graph.add_edge(i - 1, i, chain=True)
    graph._update_mean_chain_length()
    return graph


# home away from the target, two tier-one nodes (parallel and perpendicular grippers), one depth-only node
SYNTHETIC_SPECS = [
    ((0, 0), (50, 60), (0, 0, 55), (1, 1, 0)),
    ((5, 5), (10, 12), (5, 5, 11), (1, 0, 0)),
    ((5, 5), (18, 22), (5, 5, 20), (0, 1, 0)),
    ((9, 9), (20, 40), (9, 9, 30), (0, 0, 1)),
]


@pytest.fixture
def target_view() -> TargetView:
    return TargetView(
        block_id=0,
        mask=Mask.from_pixels(SHAPE, [(5, 5)]),
        depth=DepthRange(5, 30),
        center=Center3(5, 5, 20),
        orientation=Vec3Dir(1, 0, 0),
        axis_length=4.0,
    )


@pytest.fixture
def tier_graph() -> PpsGraph:
    return synthetic_graph(SYNTHETIC_SPECS)


def projected_palm_center(world, q) -> Center3:
    """Palm centre through the camera model, without pixel or disparity rounding."""
    col, row, depth = world.camera.project(world.arm.forward(np.asarray(q, dtype=float)).palm_center)
    return Center3(float(col[0]), float(row[0]), float(world.config.disparity_constant / depth[0]))


def star_graph(world, q0, radius, rng, directions=21) -> PpsGraph:
    """Node 0 at ``q0`` joined to neighbours ``radius`` away along random joint directions."""
    graph = PpsGraph()
    graph.add_node(Node(id=0, q=np.asarray(q0, dtype=float), palm_center=projected_palm_center(world, q0), home=True))
    for _ in range(directions):
        u = rng.normal(size=7)
        q = q0 + radius * u / np.linalg.norm(u)
        node = graph.add_node(Node(id=len(graph), q=q, palm_center=projected_palm_center(world, q)))
        graph.add_edge(0, node.id, chain=True)
    return graph
