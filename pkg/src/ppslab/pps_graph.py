# src/ppslab/pps_graph.py - Peripersonal-space graph: babbling, densification, queries

import logging
from dataclasses import dataclass
from pathlib import Path
from threading import Lock
from typing import Callable, Iterable, Optional

import networkx as nx
import numpy as np
from scipy.spatial import cKDTree
from tenacity import RetryError, retry, retry_if_exception_type, stop_after_attempt

from ppslab.errors import (
    ArchiveError,
    DegenerateVector,
    EmptyMask,
    HandNotVisible,
    InvalidGraphSize,
    NoNeighbors,
    NoPath,
    RejectionLimit,
    WorldNotEmpty,
)
from ppslab.percept import (
    Center3,
    DepthRange,
    PALM,
    Mask,
    Percept,
    Vec3Dir,
    center,
    depth_range,
    extract_hand_masks,
    gripper_vector,
    swept_depth,
    swept_mask,
)
from ppslab.sim_world import SimWorld

logger = logging.getLogger(__name__)

ARCHIVE_FORMAT_VERSION = 1
MAX_REJECTIONS = 1000
BABBLE_SIGMA_FRACTION = 0.1


@dataclass(frozen=True, eq=False)
class Node:
    """Visited arm state with the visual features seen there in an empty world."""

    id: int
    q: np.ndarray
    a: float = 1.0
    palm: Optional[Mask] = None
    hand: Optional[Mask] = None
    palm_depth: Optional[DepthRange] = None
    hand_depth: Optional[DepthRange] = None
    palm_center: Optional[Center3] = None
    hand_center: Optional[Center3] = None
    gripper: Optional[Vec3Dir] = None
    home: bool = False


def node_from_percept(node_id: int, q: np.ndarray, a: float, p: Percept, home: bool = False) -> Node:
    """Derive node features; raises when the palm is not usable."""
    palm, hand = extract_hand_masks(p)
    c_p = center(p, palm)
    c_h = center(p, hand)
    return Node(
        id=node_id,
        q=np.asarray(q, dtype=float).copy(),
        a=a,
        palm=palm,
        hand=hand,
        palm_depth=depth_range(p, palm),
        hand_depth=depth_range(p, hand),
        palm_center=c_p,
        hand_center=c_h,
        gripper=gripper_vector(c_h, c_p),
        home=home,
    )


@dataclass(frozen=True)
class LocalJacobian:
    node_id: int
    J: np.ndarray  # 7x3, image-space change per radian
    J_inv: np.ndarray  # 3x7
    neighbors: int

    @property
    def rank(self) -> int:
        return int(np.linalg.matrix_rank(self.J))

    def predict(self, dq: np.ndarray) -> np.ndarray:
        return np.asarray(dq, dtype=float) @ self.J


class PpsGraph:
    """Nodes of visited configurations joined by presumed-safe motions."""

    def __init__(self, seed: Optional[int] = None):
        self.G = nx.Graph()
        self.nodes: list[Node] = []
        self.mean_chain_length: float = 0.0
        self.home_id: int = 0
        self.seed = seed
        self.frozen = False
        self._swept: dict[tuple[int, int], tuple[Mask, DepthRange]] = {}
        self._jacobians: dict[int, LocalJacobian] = {}
        self._lock = Lock()
        self._stack: Optional[dict[str, np.ndarray]] = None
        self._edge_order: list[tuple[int, int]] = []

    def __len__(self) -> int:
        return len(self.nodes)

    # ----- construction -----

    def add_node(self, node: Node) -> Node:
        if node.id != len(self.nodes):
            raise ValueError(f"node ids must be consecutive, got {node.id} after {len(self.nodes)}")
        self.nodes.append(node)
        self.G.add_node(node.id)
        if node.home:
            self.home_id = node.id
        self._stack = None
        return node

    def add_edge(self, i: int, j: int, chain: bool) -> None:
        length = float(np.linalg.norm(self.nodes[j].q - self.nodes[i].q))
        if length <= 0.0:
            raise ValueError(f"edge ({i}, {j}) has zero length")
        self.G.add_edge(i, j, length=length, chain=chain)
        self._edge_order.append((i, j))

    @classmethod
    def from_configs(cls, configs: Iterable[np.ndarray], **features) -> "PpsGraph":
        """Chain graph over bare configurations (features optional, for analysis and tests)."""
        graph = cls()
        centers = features.get("palm_centers")
        for i, q in enumerate(configs):
            c = None if centers is None else Center3(*map(float, centers[i]))
            graph.add_node(Node(id=i, q=np.asarray(q, dtype=float), palm_center=c, home=(i == 0)))
            if i > 0:
                graph.add_edge(i - 1, i, chain=True)
        graph._update_mean_chain_length()
        return graph

    def _update_mean_chain_length(self) -> None:
        chain = [d["length"] for _, _, d in self.G.edges(data=True) if d["chain"]]
        self.mean_chain_length = float(np.mean(chain)) if chain else 0.0

    # ----- queries -----

    def node(self, i: int) -> Node:
        return self.nodes[i]

    def neighbors(self, i: int) -> list[int]:
        return sorted(self.G.neighbors(i))

    def edge_count(self, chain: Optional[bool] = None) -> int:
        if chain is None:
            return self.G.number_of_edges()
        return sum(1 for _, _, d in self.G.edges(data=True) if d["chain"] == chain)

    def path_length(self, path: list[int]) -> float:
        return float(sum(self.G.edges[a, b]["length"] for a, b in zip(path, path[1:])))

    def swept(self, i: int, j: int) -> tuple[Mask, DepthRange]:
        """Swept hand mask and depth range of the motion between two nodes, cached."""
        key = (min(i, j), max(i, j))
        cached = self._swept.get(key)
        if cached is None:
            a, b = self.nodes[key[0]], self.nodes[key[1]]
            cached = (swept_mask(a.hand, b.hand), swept_depth(a.hand_depth, b.hand_depth))
            with self._lock:
                self._swept[key] = cached
        return cached

    def feature_stack(self) -> dict[str, np.ndarray]:
        """Stacked node features for vectorized scans."""
        if self._stack is None:
            nodes = self.nodes
            self._stack = {
                "palm": np.stack([n.palm.bits for n in nodes]),
                "hand_bbox": np.array([_bbox_or_empty(n.hand) for n in nodes]),
                "palm_depth": np.array([[n.palm_depth.lo, n.palm_depth.hi] for n in nodes]),
                "hand_depth": np.array([[n.hand_depth.lo, n.hand_depth.hi] for n in nodes]),
                "palm_center": np.array([n.palm_center.array() for n in nodes]),
                "q": np.array([n.q for n in nodes]),
            }
        return self._stack


def _bbox_or_empty(m: Mask) -> tuple[int, int, int, int]:
    box = m.bbox()
    return box if box is not None else (1, 0, 1, 0)


# ----- babbling -----


class _Rejected(Exception):
    pass


def babble_step(world: SimWorld, graph: PpsGraph, rng: np.random.Generator) -> Node:
    """Random joint-space step from the newest node, rejection-sampled until valid."""
    prev = graph.nodes[-1]
    sigma = BABBLE_SIGMA_FRACTION * world.arm.ranges
    limits = world.arm.limits

    @retry(stop=stop_after_attempt(MAX_REJECTIONS), retry=retry_if_exception_type(_Rejected))
    def draw() -> Node:
        q = prev.q + rng.normal(0.0, sigma)
        if np.any(q < limits[:, 0]) or np.any(q > limits[:, 1]) or not np.any(q != prev.q):
            raise _Rejected("out of range or zero step")
        percept = world._valid_percept(q, prev.a)
        if percept is None:
            raise _Rejected("invalid configuration")
        if not (percept.labels == PALM).any():
            raise _Rejected("palm not visible")
        try:
            return node_from_percept(len(graph.nodes), q, prev.a, percept)
        except (HandNotVisible, EmptyMask, DegenerateVector) as e:
            raise _Rejected(str(e)) from e

    try:
        node = draw()
    except RetryError as e:
        raise RejectionLimit(
            f"{MAX_REJECTIONS} consecutive babbling samples rejected from node {prev.id}",
            details={"node": prev.id},
        ) from e

    world.step_to(node.q, prev.a)
    graph.add_node(node)
    graph.add_edge(prev.id, node.id, chain=True)
    return node


def build_graph(
    world: SimWorld,
    n_nodes: int,
    rng: np.random.Generator,
    progress: Optional[Callable[[int], None]] = None,
) -> PpsGraph:
    """Babble a chain of ``n_nodes`` nodes starting from the world's home pose."""
    if n_nodes < 1:
        raise InvalidGraphSize(f"graph needs at least one node, got {n_nodes}")
    if world.state.blocks:
        raise WorldNotEmpty("graph must be built in an empty world")

    world.reset_arm(world.home_q, 1.0)
    graph = PpsGraph()
    home_percept = world.render()
    graph.add_node(node_from_percept(0, world.home_q, 1.0, home_percept, home=True))
    for i in range(1, n_nodes):
        babble_step(world, graph, rng)
        if progress is not None:
            progress(i)
        if i % 100 == 0:
            logger.info("Babbled %d/%d nodes", i, n_nodes)
    graph._update_mean_chain_length()
    logger.info("Chain built: %d nodes, mean chain length %.4f", len(graph), graph.mean_chain_length)
    return graph


def densify(graph: PpsGraph) -> PpsGraph:
    """Join every non-adjacent pair closer (strictly) than the mean chain length."""
    if graph.frozen:
        return graph
    graph._update_mean_chain_length()
    threshold = graph.mean_chain_length
    added = 0
    if len(graph) > 1 and threshold > 0:
        Q = np.array([n.q for n in graph.nodes])
        for i, j in sorted(cKDTree(Q).query_pairs(r=threshold)):
            if graph.G.has_edge(i, j):
                continue
            if float(np.linalg.norm(Q[j] - Q[i])) < threshold:
                graph.add_edge(i, j, chain=False)
                added += 1
    graph.frozen = True
    logger.info("Densified: %d edges added (threshold %.4f)", added, threshold)
    return graph


def _edge_key(i: int, j: int) -> tuple[int, int]:
    return (i, j) if i < j else (j, i)


def shortest_path(
    graph: PpsGraph,
    src: int,
    dst: int,
    banned_edges: Optional[set[tuple[int, int]] | Callable[[int, int], bool]] = None,
) -> list[int]:
    """Minimum joint-space length path; ``banned_edges`` is a set or a predicate."""
    if src == dst:
        return [src]
    if banned_edges is None:
        is_banned: Callable[[int, int], bool] = lambda i, j: False  # noqa: E731
    elif callable(banned_edges):
        is_banned = banned_edges
    else:
        keys = {_edge_key(*e) for e in banned_edges}
        is_banned = lambda i, j: _edge_key(i, j) in keys  # noqa: E731

    def weight(i: int, j: int, data: dict) -> Optional[float]:
        return None if is_banned(i, j) else data["length"]

    try:
        return nx.dijkstra_path(graph.G, src, dst, weight=weight)
    except nx.NetworkXNoPath as e:
        raise NoPath(f"no path {src} -> {dst}", details={"src": src, "dst": dst}) from e


def local_jacobian(graph: PpsGraph, i: int) -> LocalJacobian:
    """Least-squares image-space Jacobian from the node's graph neighborhood, cached."""
    cached = graph._jacobians.get(i)
    if cached is not None:
        return cached
    nbrs = graph.neighbors(i)
    if not nbrs:
        raise NoNeighbors(f"node {i} has no neighbors", details={"node": i})
    node = graph.nodes[i]
    dQ = np.array([graph.nodes[n].q - node.q for n in nbrs])
    dC = np.array([graph.nodes[n].palm_center.array() - node.palm_center.array() for n in nbrs])
    J, *_ = np.linalg.lstsq(dQ, dC, rcond=None)
    jac = LocalJacobian(node_id=i, J=J, J_inv=np.linalg.pinv(J), neighbors=len(nbrs))
    with graph._lock:
        graph._jacobians[i] = jac
    return jac


# ----- persistence -----


def save_graph(graph: PpsGraph, path: str | Path) -> Path:
    """Write the graph archive (compressed npz)."""
    path = Path(path)
    if any(n.palm is None for n in graph.nodes):
        raise ArchiveError("only graphs with full node features can be archived")
    shape = graph.nodes[0].palm.shape
    edges = list(graph._edge_order)
    np.savez_compressed(
        path,
        format_version=np.array(ARCHIVE_FORMAT_VERSION),
        shape=np.array(shape),
        q=np.array([n.q for n in graph.nodes]),
        a=np.array([n.a for n in graph.nodes]),
        palm=np.packbits(np.stack([n.palm.bits for n in graph.nodes]), axis=-1),
        hand=np.packbits(np.stack([n.hand.bits for n in graph.nodes]), axis=-1),
        palm_depth=np.array([[n.palm_depth.lo, n.palm_depth.hi] for n in graph.nodes]),
        hand_depth=np.array([[n.hand_depth.lo, n.hand_depth.hi] for n in graph.nodes]),
        palm_center=np.array([n.palm_center.array() for n in graph.nodes]),
        hand_center=np.array([n.hand_center.array() for n in graph.nodes]),
        gripper=np.array([n.gripper.array() for n in graph.nodes]),
        edges=np.array(edges, dtype=np.int64).reshape(-1, 2),
        edge_length=np.array([graph.G.edges[e]["length"] for e in edges]),
        edge_chain=np.array([graph.G.edges[e]["chain"] for e in edges], dtype=bool),
        mean_chain_length=np.array(graph.mean_chain_length),
        home_id=np.array(graph.home_id),
        seed=np.array(-1 if graph.seed is None else graph.seed),
        frozen=np.array(graph.frozen),
    )
    return path if path.suffix == ".npz" else path.with_name(path.name + ".npz")


def load_graph(path: str | Path) -> PpsGraph:
    try:
        data = np.load(Path(path), allow_pickle=False)
    except (OSError, ValueError) as e:
        raise ArchiveError(f"cannot read graph archive {path}: {e}") from e
    version = int(data["format_version"])
    if version != ARCHIVE_FORMAT_VERSION:
        raise ArchiveError(f"unsupported archive version {version}")

    rows, cols = (int(x) for x in data["shape"])
    palm = np.unpackbits(data["palm"], axis=-1, count=cols).astype(bool)
    hand = np.unpackbits(data["hand"], axis=-1, count=cols).astype(bool)
    seed = int(data["seed"])
    graph = PpsGraph(seed=None if seed < 0 else seed)
    home_id = int(data["home_id"])
    for i, q in enumerate(data["q"]):
        graph.add_node(
            Node(
                id=i,
                q=q,
                a=float(data["a"][i]),
                palm=Mask(palm[i]),
                hand=Mask(hand[i]),
                palm_depth=DepthRange(*map(float, data["palm_depth"][i])),
                hand_depth=DepthRange(*map(float, data["hand_depth"][i])),
                palm_center=Center3(*map(float, data["palm_center"][i])),
                hand_center=Center3(*map(float, data["hand_center"][i])),
                gripper=Vec3Dir(*map(float, data["gripper"][i])),
                home=(i == home_id),
            )
        )
    for (i, j), length, chain in zip(data["edges"], data["edge_length"], data["edge_chain"]):
        graph.G.add_edge(int(i), int(j), length=float(length), chain=bool(chain))
        graph._edge_order.append((int(i), int(j)))
    graph.mean_chain_length = float(data["mean_chain_length"])
    graph.home_id = home_id
    graph.frozen = bool(data["frozen"])
    return graph
