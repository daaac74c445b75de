# src/ppslab/sim_world.py - Deterministic arm, table, block and camera simulator

"""Quasi-static stand-in for a 7-joint arm reaching over a table of blocks.

World frame: x forward from the robot, y to its left, z up; the table top is
the plane z = 0. The hand frame has x pointing distally along the fingers,
y across the finger gap and z through the hand's thickness.
"""

import copy
import logging
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import jsonschema
import numpy as np

from ppslab.configuration import WorldConfig
from ppslab.errors import InvalidStart, InvalidTarget, OverlapError
from ppslab.percept import ARM, BACKGROUND, HAND, PALM, CaptureTag, Percept, block_label
from ppslab.state import WORLD_SNAPSHOT_SCHEMA
from ppslab.utils import rng_stream

logger = logging.getLogger(__name__)

N_JOINTS = 7
WRIST_TWIST = 6  # index of the gripper roll joint
MAX_GAP = 0.085  # finger gap at aperture 1
PALM_LATTICE_STEP = 0.002
NEAR_PLANE = 0.05
APERTURE_TOLERANCE = 1e-9

JOINT_NAMES = ["s0", "s1", "e0", "e1", "w0", "w1", "w2"]
JOINT_LIMITS = np.array(
    [
        [-1.2, 1.2],
        [-0.9, 1.1],
        [-1.7, 1.7],
        [-0.2, 2.4],
        [-1.7, 1.7],
        [-1.4, 1.9],
        [-1.6, 1.6],
    ]
)
START_Q = np.array([-0.3, -0.9, 0.0, 1.7, 0.0, -0.3, 0.0])


def _rx(t: float) -> np.ndarray:
    c, s = np.cos(t), np.sin(t)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _ry(t: float) -> np.ndarray:
    c, s = np.cos(t), np.sin(t)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rz(t: float) -> np.ndarray:
    c, s = np.cos(t), np.sin(t)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Box:
    """Oriented box: world center, rotation (columns are box axes), half extents."""

    center: np.ndarray
    rotation: np.ndarray
    half: np.ndarray
    label: int = HAND

    def corners(self) -> np.ndarray:
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=float)
        return self.center + (signs * self.half) @ self.rotation.T

    def local(self, points: np.ndarray) -> np.ndarray:
        return (points - self.center) @ self.rotation

    def contains(self, points: np.ndarray, tol: float = 0.0) -> np.ndarray:
        return np.all(np.abs(self.local(points)) <= self.half + tol, axis=-1)

    def lattice(self, n: int = 3) -> np.ndarray:
        axes = [np.linspace(-h, h, n) for h in self.half]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
        return self.center + grid @ self.rotation.T


@dataclass(frozen=True)
class JointConfig:
    q: np.ndarray
    a: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "q", np.asarray(self.q, dtype=float).copy())
        if self.q.shape != (N_JOINTS,):
            raise ValueError(f"expected {N_JOINTS} joint angles, got shape {self.q.shape}")

    def within_limits(self, limits: np.ndarray = JOINT_LIMITS) -> bool:
        return bool(np.all(self.q >= limits[:, 0]) and np.all(self.q <= limits[:, 1]) and 0.0 <= self.a <= 1.0)


@dataclass(frozen=True)
class HandPose:
    origin: np.ndarray
    rotation: np.ndarray
    links: tuple[tuple[np.ndarray, np.ndarray, np.ndarray], ...]  # (start, end, rotation)

    def to_world(self, local: np.ndarray) -> np.ndarray:
        return self.origin + local @ self.rotation.T

    def to_local(self, world: np.ndarray) -> np.ndarray:
        return (world - self.origin) @ self.rotation

    @property
    def palm_center(self) -> np.ndarray:
        return self.to_world(np.array([0.095, 0.0, 0.0]))


@dataclass
class ArmModel:
    """Serial 7-joint chain with Baxter-like proportions."""

    base: np.ndarray = field(default_factory=lambda: np.array([0.06, 0.26, 0.30]))
    upper_length: float = 0.36
    forearm_length: float = 0.36
    wrist_length: float = 0.10
    link_radii: tuple[float, float, float] = (0.035, 0.03, 0.025)
    limits: np.ndarray = field(default_factory=lambda: JOINT_LIMITS.copy())

    @property
    def ranges(self) -> np.ndarray:
        return self.limits[:, 1] - self.limits[:, 0]

    def forward(self, q: np.ndarray) -> HandPose:
        """Forward kinematics to the gripper frame."""
        r1 = _rz(q[0]) @ _ry(q[1]) @ _rx(q[2])
        elbow = self.base + r1[:, 0] * self.upper_length
        r2 = r1 @ _ry(q[3]) @ _rx(q[4])
        wrist = elbow + r2[:, 0] * self.forearm_length
        r3 = r2 @ _ry(q[5]) @ _rx(q[6])
        origin = wrist + r3[:, 0] * self.wrist_length
        links = ((self.base, elbow, r1), (elbow, wrist, r2), (wrist, origin, r3))
        return HandPose(origin=origin, rotation=r3, links=links)

    def link_boxes(self, pose: HandPose) -> list[Box]:
        boxes = []
        for (start, end, rot), radius in zip(pose.links, self.link_radii):
            length = float(np.linalg.norm(end - start))
            boxes.append(Box((start + end) / 2.0, rot, np.array([length / 2.0, radius, radius]), ARM))
        return boxes

    @staticmethod
    def hand_boxes(pose: HandPose, a: float) -> list[Box]:
        """Palm base and the two fingers."""
        gap = a * MAX_GAP
        r = pose.rotation
        base = Box(pose.to_world(np.array([0.025, 0.0, 0.0])), r, np.array([0.025, 0.05, 0.025]), HAND)
        fingers = [
            Box(pose.to_world(np.array([0.095, side * (gap / 2.0 + 0.006), 0.0])), r, np.array([0.045, 0.006, 0.012]), HAND)
            for side in (1.0, -1.0)
        ]
        return [base, *fingers]

    @staticmethod
    def palm_marker(pose: HandPose, a: float) -> Optional[Box]:
        """Rendered palm region; slightly thicker than the fingers so it shows from above."""
        gap = a * MAX_GAP
        if gap <= 1e-9:
            return None
        return Box(pose.palm_center, pose.rotation, np.array([0.04, gap / 2.0, 0.016]), PALM)

    @staticmethod
    def palm_slab(pose: HandPose, a: float) -> Box:
        """Break-beam region between the fingers."""
        gap = a * MAX_GAP
        return Box(pose.palm_center, pose.rotation, np.array([0.04, gap / 2.0, 0.012]), PALM)

    @staticmethod
    def palm_lattice(pose: HandPose, a: float) -> np.ndarray:
        """Sample points of the palm slab on a fixed 2 mm lateral pitch.

        The lattice for a larger aperture is a superset of the lattice for a
        smaller one, which keeps the Palmar trigger monotone in aperture.
        """
        half_gap = a * MAX_GAP / 2.0
        k = int(np.floor(half_gap / PALM_LATTICE_STEP + 1e-9))
        ys = PALM_LATTICE_STEP * np.arange(-k, k + 1)
        xs = 0.095 + np.linspace(-0.04, 0.04, 9)
        zs = np.linspace(-0.012, 0.012, 5)
        grid = np.stack(np.meshgrid(xs, ys, zs, indexing="ij"), axis=-1).reshape(-1, 3)
        return pose.to_world(grid)


@dataclass
class CameraModel:
    """Fixed pinhole camera producing depth along the optical axis."""

    position: np.ndarray
    target: np.ndarray
    rows: int = 120
    cols: int = 160
    focal: float = 170.0
    disparity_constant: float = 140.0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)
        self.target = np.asarray(self.target, dtype=float)
        forward = self.target - self.position
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.array([0.0, 0.0, 1.0]))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        self.basis = np.stack([right, down, forward])  # rows: camera x, y, z in world
        self.cx = (self.cols - 1) / 2.0
        self.cy = (self.rows - 1) / 2.0
        rr, cc = np.meshgrid(np.arange(self.rows), np.arange(self.cols), indexing="ij")
        cam = np.stack(
            [(cc.ravel() - self.cx) / self.focal, (rr.ravel() - self.cy) / self.focal, np.ones(rr.size)],
            axis=1,
        )
        self.rays = cam @ self.basis  # scaled so that t is optical-axis depth

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """World points to (col, row, depth)."""
        cam = (np.atleast_2d(points) - self.position) @ self.basis.T
        z = cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            col = self.cx + self.focal * cam[:, 0] / z
            row = self.cy + self.focal * cam[:, 1] / z
        return col, row, z

    def in_view(self, points: np.ndarray) -> bool:
        col, row, z = self.project(points)
        return bool(
            np.all(z > NEAR_PLANE)
            and np.all((col >= -0.5) & (col <= self.cols - 0.5))
            and np.all((row >= -0.5) & (row <= self.rows - 0.5))
        )

    def disparity(self, depth: float | np.ndarray) -> np.ndarray:
        with np.errstate(divide="ignore"):
            d = np.rint(self.disparity_constant / np.asarray(depth, dtype=float))
        return np.clip(np.nan_to_num(d, posinf=0.0), 0, 255)


@dataclass
class Block:
    block_id: int
    center: np.ndarray
    rotation: np.ndarray
    half: np.ndarray

    @classmethod
    def upright(cls, block_id: int, x: float, y: float, yaw: float, dims: Sequence[float]) -> "Block":
        half = np.asarray(dims, dtype=float) / 2.0
        return cls(block_id, np.array([x, y, half[2]]), _rz(yaw), half)

    @property
    def label(self) -> int:
        return block_label(self.block_id)

    def box(self) -> Box:
        return Box(self.center, self.rotation, self.half, self.label)

    def placement(self) -> tuple[float, float, float]:
        return float(self.center[0]), float(self.center[1]), float(np.arctan2(self.rotation[1, 0], self.rotation[0, 0]))


@dataclass(frozen=True)
class Placement:
    x: float
    y: float
    yaw: float

    def as_list(self) -> list[float]:
        return [self.x, self.y, self.yaw]


@dataclass(frozen=True)
class MotionEvent:
    step: int
    kind: str  # push | topple-off | palmar-trigger | attach | detach
    block_id: Optional[int] = None
    displacement: Optional[tuple[float, float]] = None


@dataclass
class MotionOutcome:
    events: list[MotionEvent]
    final_q: np.ndarray
    final_aperture: float
    palmar_triggered: bool
    reflex_stop_step: Optional[int]
    aperture_trace: list[tuple[float, float]]  # (commanded, actual) per substep

    def contacts(self, block_id: int) -> bool:
        """Any push, Palmar trigger or attachment involving the block."""
        return any(e.block_id == block_id and e.kind in ("push", "palmar-trigger", "attach", "topple-off") for e in self.events)


def detect_palmar_bump(trace: Sequence[tuple[float, float]], eps: float = APERTURE_TOLERANCE) -> bool:
    """Proprioceptive Palmar detection from (commanded, actual) aperture pairs.

    True iff at some substep the actual aperture falls below a positive command
    and then holds that value for the rest of the motion.
    """
    for i, (commanded, actual) in enumerate(trace):
        if commanded > eps and actual < commanded - eps:
            rest = np.array([a for _, a in trace[i:]], dtype=float)
            return bool(np.all(np.abs(rest - actual) <= eps))
    return False


@dataclass
class WorldState:
    q: np.ndarray
    aperture: float = 1.0
    blocks: dict[int, Block] = field(default_factory=dict)
    attached: Optional[int] = None
    palmar_latched: bool = False
    attach_pose: Optional[tuple[np.ndarray, np.ndarray]] = None  # block rotation and center in hand frame


class SimWorld:
    """Table, blocks, arm and camera with quasi-static contact."""

    def __init__(self, config: Optional[WorldConfig] = None, arm: Optional[ArmModel] = None):
        self.config = config or WorldConfig()
        self.arm = arm or ArmModel()
        self.camera = CameraModel(
            position=np.array(self.config.camera_position),
            target=np.array(self.config.camera_target),
            rows=self.config.image_rows,
            cols=self.config.image_cols,
            focal=self.config.focal_length,
            disparity_constant=self.config.disparity_constant,
        )
        self.table = tuple(self.config.table_bounds)
        self.body = Box(np.array([-0.125, 0.0, 0.2]), np.eye(3), np.array([0.225, 0.25, 0.8]), BACKGROUND)
        self.noise_rng = rng_stream(self.config.noise_seed, "disparity-noise")
        self.home_q = self.find_home()
        self.state = WorldState(q=self.home_q.copy())
        self._next_block_id = 0

    # ----- geometry helpers -----

    def _hand_volume(self, q: np.ndarray, a: float) -> tuple[HandPose, list[Box]]:
        pose = self.arm.forward(q)
        return pose, self.arm.hand_boxes(pose, a)

    def _scene_boxes(self, q: np.ndarray, a: float, include_blocks: bool = True) -> list[Box]:
        pose, hand = self._hand_volume(q, a)
        boxes = self.arm.link_boxes(pose) + hand
        marker = self.arm.palm_marker(pose, a)
        # a held block covers the palm
        if marker is not None and not (include_blocks and self.state.attached is not None):
            boxes.append(marker)
        if include_blocks:
            boxes.extend(b.box() for b in self.state.blocks.values())
        return boxes

    def on_table(self, xy: np.ndarray) -> bool:
        x0, x1, y0, y1 = self.table
        return bool(x0 <= xy[0] <= x1 and y0 <= xy[1] <= y1)

    # ----- operations -----

    def validity_check(self, q: np.ndarray | JointConfig, a: Optional[float] = None) -> bool:
        """True iff the hand is fully in view, above the table and clear of the body."""
        return self._valid_percept(q, a) is not None

    def _valid_percept(self, q: np.ndarray | JointConfig, a: Optional[float] = None) -> Optional[Percept]:
        if isinstance(q, JointConfig):
            q, a = q.q, q.a if a is None else a
        q = np.asarray(q, dtype=float)
        a = self.state.aperture if a is None else a
        if not np.all(np.isfinite(q)):
            return None
        if np.any(q < self.arm.limits[:, 0]) or np.any(q > self.arm.limits[:, 1]):
            return None
        _, hand = self._hand_volume(q, a)
        corners = np.concatenate([b.corners() for b in hand])
        if np.any(corners[:, 2] <= 0.0):
            return None
        if any(_boxes_overlap(b, self.body) for b in hand):
            return None
        if not self.camera.in_view(corners):
            return None
        percept = self.render(q=q, a=a)
        if not np.isin(percept.labels, (HAND, PALM)).any():
            return None
        return percept

    def render(
        self,
        q: Optional[np.ndarray] = None,
        a: Optional[float] = None,
        include_blocks: bool = True,
        tag: CaptureTag = CaptureTag(),
    ) -> Percept:
        """Z-buffer render of arm, hand, palm marker, blocks and table."""
        q = self.state.q if q is None else np.asarray(q, dtype=float)
        a = self.state.aperture if a is None else a
        cam = self.camera
        labels, depth = self._raycast(self._scene_boxes(q, a, include_blocks), with_table=True)

        finite = np.isfinite(depth)
        disparity = np.where(finite, cam.disparity(np.where(finite, depth, 1.0)), 0)
        if self.config.disparity_noise > 0:
            jitter = self.noise_rng.integers(-self.config.disparity_noise, self.config.disparity_noise + 1, size=depth.size)
            disparity = np.where(finite, np.clip(disparity + jitter, 0, 255), 0)
        return Percept(
            labels.reshape(cam.rows, cam.cols),
            disparity.astype(np.uint8).reshape(cam.rows, cam.cols),
            tag,
        )

    def _raycast(self, boxes: Iterable[Box], with_table: bool) -> tuple[np.ndarray, np.ndarray]:
        """Per-pixel slab intersection keeping the nearest hit; returns flat labels and depth."""
        cam = self.camera
        n = cam.rows * cam.cols
        depth = np.full(n, np.inf)
        labels = np.zeros(n, dtype=np.uint8)
        rays = cam.rays

        if with_table:
            dz = rays[:, 2]
            with np.errstate(divide="ignore", invalid="ignore"):
                t_table = -cam.position[2] / dz
            hit_pt = cam.position + rays * t_table[:, None]
            x0, x1, y0, y1 = self.table
            on_table = (dz < 0) & (hit_pt[:, 0] >= x0) & (hit_pt[:, 0] <= x1) & (hit_pt[:, 1] >= y0) & (hit_pt[:, 1] <= y1)
            depth[on_table] = t_table[on_table]

        for box in boxes:
            idx = self._candidate_pixels(box)
            if idx is not None and idx.size == 0:
                continue
            target = np.arange(n) if idx is None else idx
            o = (cam.position - box.center) @ box.rotation
            d = rays[target] @ box.rotation
            with np.errstate(divide="ignore", invalid="ignore"):
                inv = 1.0 / d
                t1 = (-box.half - o) * inv
                t2 = (box.half - o) * inv
            t_near = np.nanmax(np.minimum(t1, t2), axis=1)
            t_far = np.nanmin(np.maximum(t1, t2), axis=1)
            hit = (t_near <= t_far) & (t_near > NEAR_PLANE) & (t_near < depth[target])
            depth[target[hit]] = t_near[hit]
            labels[target[hit]] = box.label
        return labels, depth

    def _candidate_pixels(self, box: Box) -> Optional[np.ndarray]:
        """Pixel indices inside the box's projected bounding rectangle, None for all."""
        col, row, z = self.camera.project(box.corners())
        if np.any(z <= NEAR_PLANE):
            return None
        c0 = max(int(np.floor(col.min())), 0)
        c1 = min(int(np.ceil(col.max())), self.camera.cols - 1)
        r0 = max(int(np.floor(row.min())), 0)
        r1 = min(int(np.ceil(row.max())), self.camera.rows - 1)
        if c0 > c1 or r0 > r1:
            return np.empty(0, dtype=int)
        rr, cc = np.meshgrid(np.arange(r0, r1 + 1), np.arange(c0, c1 + 1), indexing="ij")
        return (rr * self.camera.cols + cc).ravel()

    def step_to(
        self,
        q_target: np.ndarray | JointConfig,
        a_target: Optional[float] = None,
        stop_on_reflex: bool = False,
    ) -> MotionOutcome:
        """Interpolate to the target in fixed substeps, resolving contact at each."""
        if isinstance(q_target, JointConfig):
            q_target, a_target = q_target.q, q_target.a if a_target is None else a_target
        q_target = np.asarray(q_target, dtype=float)
        a_target = self.state.aperture if a_target is None else float(a_target)
        if (
            q_target.shape != (N_JOINTS,)
            or np.any(q_target < self.arm.limits[:, 0])
            or np.any(q_target > self.arm.limits[:, 1])
            or not 0.0 <= a_target <= 1.0
        ):
            raise InvalidTarget("joint target outside declared ranges", details={"q": q_target.tolist(), "a": a_target})

        st = self.state
        q0, a0 = st.q.copy(), st.aperture
        n = self.config.substeps
        events: list[MotionEvent] = []
        trace: list[tuple[float, float]] = []
        reflex_step: Optional[int] = None
        prev_palm = self.arm.forward(q0).palm_center

        for s in range(1, n + 1):
            frac = s / n
            st.q = q0 + (q_target - q0) * frac
            commanded = a0 + (a_target - a0) * frac
            if not st.palmar_latched:
                st.aperture = commanded
            pose = self.arm.forward(st.q)

            self._carry_attached(pose)
            self._check_slip(s, events)
            latched_now = False
            if not st.palmar_latched and st.aperture > self.config.palmar_min_aperture:
                latched_now = self._check_palmar(s, pose, events)
            self._resolve_pushes(s, pose, prev_palm, events)
            prev_palm = pose.palm_center
            trace.append((commanded, st.aperture))

            if stop_on_reflex and latched_now:
                reflex_step = s
                break

        return MotionOutcome(
            events=events,
            final_q=st.q.copy(),
            final_aperture=st.aperture,
            palmar_triggered=any(e.kind == "palmar-trigger" for e in events),
            reflex_stop_step=reflex_step,
            aperture_trace=trace,
        )

    def _carry_attached(self, pose: HandPose) -> None:
        st = self.state
        if st.attached is None or st.attach_pose is None:
            return
        block = st.blocks[st.attached]
        rel_rot, rel_center = st.attach_pose
        block.rotation = pose.rotation @ rel_rot
        block.center = pose.to_world(rel_center)

    def _check_slip(self, step: int, events: list[MotionEvent]) -> None:
        """An attached block driven into the table slips out of the grasp."""
        st = self.state
        if st.attached is None:
            return
        block = st.blocks[st.attached]
        if block.box().corners()[:, 2].min() >= 0.0:
            return
        x_axis = block.rotation[:, 0]
        yaw = float(np.arctan2(x_axis[1], x_axis[0]))
        settled = Block.upright(block.block_id, block.center[0], block.center[1], yaw, block.half * 2.0)
        st.attached, st.attach_pose = None, None
        events.append(MotionEvent(step, "detach", block.block_id))
        if self.on_table(settled.center):
            st.blocks[block.block_id] = settled
        else:
            del st.blocks[block.block_id]
            events.append(MotionEvent(step, "topple-off", block.block_id))

    def _check_palmar(self, step: int, pose: HandPose, events: list[MotionEvent]) -> bool:
        st = self.state
        slab = self.arm.palm_slab(pose, st.aperture)
        lattice = self.arm.palm_lattice(pose, st.aperture)
        for block_id in sorted(st.blocks):
            block = st.blocks[block_id]
            box = block.box()
            corners = box.corners()
            if not (box.contains(lattice).any() or slab.contains(corners).any()):
                continue
            st.palmar_latched = True
            events.append(MotionEvent(step, "palmar-trigger", block_id))
            y = pose.to_local(corners)[:, 1]
            gap = st.aperture * MAX_GAP
            if y.min() >= -gap / 2.0 - 1e-9 and y.max() <= gap / 2.0 + 1e-9:
                width = float(y.max() - y.min())
                block.center = block.center - pose.rotation[:, 1] * float((y.max() + y.min()) / 2.0)
                st.aperture = width / MAX_GAP
                st.attached = block_id
                st.attach_pose = (pose.rotation.T @ block.rotation, pose.to_local(block.center))
                events.append(MotionEvent(step, "attach", block_id))
            else:
                st.aperture = 0.0
            return True
        return False

    def _resolve_pushes(self, step: int, pose: HandPose, prev_palm: np.ndarray, events: list[MotionEvent]) -> None:
        st = self.state
        points = np.concatenate([b.lattice(3) for b in self.arm.hand_boxes(pose, st.aperture)])
        motion = pose.palm_center - prev_palm
        motion[2] = 0.0
        for block_id in sorted(st.blocks):
            if block_id == st.attached:
                continue
            block = st.blocks[block_id]
            box = block.box()
            inside = points[box.contains(points)]
            if inside.size == 0:
                continue
            direction = motion.copy()
            if np.linalg.norm(direction) < 1e-9:
                direction = block.center - inside.mean(axis=0)
                direction[2] = 0.0
            if np.linalg.norm(direction) < 1e-9:
                direction = np.array([1.0, 0.0, 0.0])
            direction /= np.linalg.norm(direction)
            distance = _exit_distance(box, inside, direction) + 1e-4
            shift = direction * distance
            block.center = block.center + shift
            events.append(MotionEvent(step, "push", block_id, (float(shift[0]), float(shift[1]))))
            if not self.on_table(block.center):
                del st.blocks[block_id]
                events.append(MotionEvent(step, "topple-off", block_id))

    # ----- blocks -----

    def place_block(self, pose: Placement | tuple[float, float, float], dims: Optional[Sequence[float]] = None) -> int:
        """Add an upright block; returns its id."""
        x, y, yaw = (pose.x, pose.y, pose.yaw) if isinstance(pose, Placement) else pose
        dims = self.config.block_dims if dims is None else dims
        block = Block.upright(self._next_block_id, x, y, yaw, dims)
        for other in self.state.blocks.values():
            if _boxes_overlap(block.box(), other.box()):
                raise OverlapError(
                    f"block at ({x:.3f}, {y:.3f}) overlaps block {other.block_id}",
                    details={"other": other.block_id},
                )
        self.state.blocks[block.block_id] = block
        self.state.attached, self.state.attach_pose, self.state.palmar_latched = None, None, False
        self._next_block_id += 1
        return block.block_id

    def reset_blocks(self, placements: Iterable[Placement | tuple[float, float, float]]) -> list[int]:
        """Replace every block; ids restart at zero."""
        self.state.blocks = {}
        self._next_block_id = 0
        self.state.attached, self.state.attach_pose, self.state.palmar_latched = None, None, False
        return [self.place_block(p) for p in placements]

    def reset_arm(self, q: Optional[np.ndarray] = None, a: float = 1.0) -> None:
        """Teleport the arm; used between trials, never mid-trajectory."""
        self.state.q = (self.home_q if q is None else np.asarray(q, dtype=float)).copy()
        self.state.aperture = float(a)
        self.state.palmar_latched = False
        self.state.attached, self.state.attach_pose = None, None

    def find_home(self) -> np.ndarray:
        """Deterministic resting pose with the palm in view and the hand above block height."""
        clearance = self.config.block_dims[2] + 0.01
        rng = rng_stream(0, "home-search")
        candidate = START_Q.copy()
        for _ in range(5000):
            if self._home_ok(candidate, clearance):
                return candidate
            candidate = np.clip(START_Q + rng.normal(0.0, 0.1 * self.arm.ranges), self.arm.limits[:, 0], self.arm.limits[:, 1])
        raise InvalidStart("no valid home configuration found")

    def _home_ok(self, q: np.ndarray, clearance: float) -> bool:
        saved = getattr(self, "state", None)
        self.state = WorldState(q=q.copy())
        try:
            percept = self._valid_percept(q, 1.0)
        finally:
            if saved is not None:
                self.state = saved
        if percept is None or not (percept.labels == PALM).any():
            return False
        _, hand = self._hand_volume(q, 1.0)
        return float(np.concatenate([b.corners() for b in hand])[:, 2].min()) >= clearance

    def copy(self) -> "SimWorld":
        return copy.deepcopy(self)

    # ----- snapshots -----

    def snapshot(self) -> dict:
        st = self.state
        record = {
            "schema_version": 1,
            "q": st.q.tolist(),
            "aperture": float(st.aperture),
            "attached": st.attached,
            "palmar_latched": st.palmar_latched,
            "blocks": [
                {"block_id": b.block_id, "center": b.center.tolist(), "rotation": b.rotation.tolist(), "half": b.half.tolist()}
                for b in st.blocks.values()
            ],
        }
        jsonschema.validate(record, WORLD_SNAPSHOT_SCHEMA)
        return record

    def restore(self, record: dict) -> None:
        jsonschema.validate(record, WORLD_SNAPSHOT_SCHEMA)
        blocks = {
            b["block_id"]: Block(b["block_id"], np.array(b["center"]), np.array(b["rotation"]), np.array(b["half"]))
            for b in record["blocks"]
        }
        self.state = WorldState(
            q=np.array(record["q"]),
            aperture=record["aperture"],
            blocks=blocks,
            attached=record.get("attached"),
            palmar_latched=record.get("palmar_latched", False),
        )
        if self.state.attached is not None:
            block = blocks[self.state.attached]
            pose = self.arm.forward(self.state.q)
            self.state.attach_pose = (pose.rotation.T @ block.rotation, pose.to_local(block.center))
        self._next_block_id = max(blocks, default=-1) + 1


def _exit_distance(box: Box, points: np.ndarray, direction: np.ndarray) -> float:
    """Largest distance the box must travel along ``direction`` to clear every point."""
    local = box.local(points)
    e = direction @ box.rotation
    best = np.full(len(points), np.inf)
    for axis in range(3):
        if abs(e[axis]) < 1e-12:
            continue
        if e[axis] > 0:
            s = (local[:, axis] + box.half[axis]) / e[axis]
        else:
            s = (local[:, axis] - box.half[axis]) / e[axis]
        best = np.minimum(best, s)
    return float(best.max())


def _boxes_overlap(a: Box, b: Box) -> bool:
    """Separating-axis test for two oriented boxes."""
    axes = [a.rotation[:, i] for i in range(3)] + [b.rotation[:, i] for i in range(3)]
    axes += [np.cross(a.rotation[:, i], b.rotation[:, j]) for i in range(3) for j in range(3)]
    offset = b.center - a.center
    for axis in axes:
        norm = np.linalg.norm(axis)
        if norm < 1e-9:
            continue
        axis = axis / norm
        ra = np.sum(a.half * np.abs(axis @ a.rotation))
        rb = np.sum(b.half * np.abs(axis @ b.rotation))
        if abs(offset @ axis) > ra + rb:
            return False
    return True


def sample_placements(
    world: SimWorld,
    count: int,
    rng: np.random.Generator,
    per_set: int = 1,
    min_visible: float = 0.9,
    max_attempts: int = 10000,
) -> list[list[Placement]]:
    """Uniform random placements that are visible and unoccluded at the home percept.

    Returns ``count`` sets of ``per_set`` non-overlapping blocks each.
    """
    x0, x1, y0, y1 = world.config.placement_bounds
    scratch = world.copy()
    sets: list[list[Placement]] = []
    attempts = 0
    while len(sets) < count:
        chosen: list[Placement] = []
        while len(chosen) < per_set:
            attempts += 1
            if attempts > max_attempts:
                raise InvalidStart(f"could not sample {count} placement sets in {max_attempts} attempts")
            candidate = Placement(float(rng.uniform(x0, x1)), float(rng.uniform(y0, y1)), float(rng.uniform(0.0, np.pi / 2)))
            scratch.reset_arm(world.home_q, 1.0)
            try:
                scratch.reset_blocks([*chosen, candidate])
            except OverlapError:
                continue
            if _placements_visible(scratch, len(chosen) + 1, min_visible):
                chosen.append(candidate)
        sets.append(chosen)
    return sets


def _placements_visible(world: SimWorld, n_blocks: int, min_visible: float) -> bool:
    """Every block clear of the hand, inside the image and at most lightly occluded at home."""
    seen = world.render()
    _, hand = world._hand_volume(world.state.q, world.state.aperture)
    for block_id in range(n_blocks):
        box = world.state.blocks[block_id].box()
        if any(_boxes_overlap(box, h) for h in hand):
            return False
        if not world.camera.in_view(box.corners()):
            return False
        alone, _ = world._raycast([box], with_table=False)
        total = int((alone == box.label).sum())
        visible = int((seen.labels == box.label).sum())
        if total == 0 or visible < min_visible * total:
            return False
    return True
