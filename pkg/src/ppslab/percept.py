# src/ppslab/percept.py - Mask and depth geometry derived from percepts

"""Percepts are a label image and a registered disparity image.

Image coordinates follow the convention used by every feature in the package:
``u`` is the column index (growing right) and ``v`` is ``rows - 1 - row``
(growing up), so a negative ``Δv`` moves down in the image.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from ppslab.errors import (
    BlockNotVisible,
    BothEmpty,
    DegenerateMask,
    DegenerateVector,
    EmptyMask,
    HandNotVisible,
)

logger = logging.getLogger(__name__)

# Label image values
BACKGROUND = 0
ARM = 1
HAND = 2
PALM = 3
BLOCK_BASE = 10


def block_label(block_id: int) -> int:
    return BLOCK_BASE + block_id


@dataclass(frozen=True)
class CaptureTag:
    """When a percept was taken: ``P`` at node creation, ``P1`` forward, ``P2`` return."""

    kind: str = "P"
    node: Optional[int] = None


@dataclass(frozen=True, eq=False)
class Percept:
    labels: np.ndarray  # (rows, cols) uint8
    disparity: np.ndarray  # (rows, cols) uint8
    tag: CaptureTag = CaptureTag()

    def __post_init__(self):
        if self.labels.shape != self.disparity.shape:
            raise ValueError("label and disparity images must share a shape")

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape  # type: ignore[return-value]

    def same_images(self, other: "Percept") -> bool:
        return bool(
            np.array_equal(self.labels, other.labels)
            and np.array_equal(self.disparity, other.disparity)
        )


@dataclass(frozen=True, eq=False)
class Mask:
    """Binary bitmap in image layout (row 0 at the top)."""

    bits: np.ndarray

    @classmethod
    def empty(cls, shape: tuple[int, int]) -> "Mask":
        return cls(np.zeros(shape, dtype=bool))

    @classmethod
    def from_pixels(cls, shape: tuple[int, int], pixels: Iterable[tuple[int, int]]) -> "Mask":
        """Build a mask from ``(u, v)`` image coordinates."""
        bits = np.zeros(shape, dtype=bool)
        for u, v in pixels:
            bits[shape[0] - 1 - int(v), int(u)] = True
        return cls(bits)

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape  # type: ignore[return-value]

    @property
    def count(self) -> int:
        return int(self.bits.sum())

    def __bool__(self) -> bool:
        return bool(self.bits.any())

    def __and__(self, other: "Mask") -> "Mask":
        return Mask(self.bits & other.bits)

    def __or__(self, other: "Mask") -> "Mask":
        return Mask(self.bits | other.bits)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Mask) and np.array_equal(self.bits, other.bits)

    __hash__ = None  # type: ignore[assignment]

    def intersects(self, other: "Mask") -> bool:
        return bool(np.logical_and(self.bits, other.bits).any())

    def issubset(self, other: "Mask") -> bool:
        return not bool((self.bits & ~other.bits).any())

    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Pixel coordinates ``(u, v)`` as float arrays."""
        rows, cols = np.nonzero(self.bits)
        return cols.astype(float), (self.bits.shape[0] - 1 - rows).astype(float)

    def bbox(self) -> Optional[tuple[int, int, int, int]]:
        """``(row0, row1, col0, col1)`` inclusive, or None when empty."""
        rows = np.flatnonzero(self.bits.any(axis=1))
        if rows.size == 0:
            return None
        cols = np.flatnonzero(self.bits.any(axis=0))
        return int(rows[0]), int(rows[-1]), int(cols[0]), int(cols[-1])


@dataclass(frozen=True)
class DepthRange:
    lo: float
    hi: float

    def __post_init__(self):
        if self.lo > self.hi:
            raise ValueError(f"depth range lo {self.lo} > hi {self.hi}")

    def intersects(self, other: "DepthRange") -> bool:
        return not (self.hi < other.lo or other.hi < self.lo)

    def union(self, other: "DepthRange") -> "DepthRange":
        return DepthRange(min(self.lo, other.lo), max(self.hi, other.hi))


@dataclass(frozen=True)
class Vec3Dir:
    """Image-space direction ``(Δu, Δv, Δd)``."""

    du: float
    dv: float
    dd: float

    def array(self) -> np.ndarray:
        return np.array([self.du, self.dv, self.dd], dtype=float)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.array()))

    def unit(self) -> np.ndarray:
        n = self.norm
        if n == 0.0:
            raise DegenerateVector("zero-length vector has no direction")
        return self.array() / n

    def cosine(self, other: "Vec3Dir") -> float:
        return cosine(self.array(), other.array())


@dataclass(frozen=True)
class Center3:
    u: float
    v: float
    d: float

    def array(self) -> np.ndarray:
        return np.array([self.u, self.v, self.d], dtype=float)

    def to(self, other: "Center3") -> Vec3Dir:
        """Vector from this center to ``other``."""
        delta = other.array() - self.array()
        return Vec3Dir(float(delta[0]), float(delta[1]), float(delta[2]))

    def distance(self, other: "Center3") -> float:
        return float(np.linalg.norm(other.array() - self.array()))

    def shifted(self, delta: Iterable[float]) -> "Center3":
        du, dv, dd = delta
        return Center3(self.u + du, self.v + dv, self.d + dd)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity; raises DegenerateVector for a zero vector."""
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise DegenerateVector("cosine similarity of a zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def extract_hand_masks(p: Percept) -> tuple[Mask, Mask]:
    """Return ``(palm, hand)``; the hand mask includes the palm."""
    palm = p.labels == PALM
    hand = palm | (p.labels == HAND)
    if not hand.any():
        raise HandNotVisible("no hand pixels in percept", details={"tag": p.tag.kind})
    return Mask(palm), Mask(hand)


def depth_range(p: Percept, m: Mask) -> DepthRange:
    if not m:
        raise EmptyMask("depth range of an empty mask")
    values = p.disparity[m.bits]
    return DepthRange(float(values.min()), float(values.max()))


def center(p: Percept, m: Mask) -> Center3:
    """Mean pixel position and mean disparity over the mask."""
    if not m:
        raise EmptyMask("center of an empty mask")
    u, v = m.coords()
    return Center3(float(u.mean()), float(v.mean()), float(p.disparity[m.bits].astype(float).mean()))


def gripper_vector(c_h: Center3, c_p: Center3) -> Vec3Dir:
    """Direction from the hand center through the palm center."""
    if c_h == c_p:
        raise DegenerateVector("hand and palm centers coincide")
    return c_h.to(c_p)


def target_mask(p: Percept, block_id: int) -> Mask:
    bits = p.labels == block_label(block_id)
    if not bits.any():
        raise BlockNotVisible(f"block {block_id} not visible", details={"block_id": block_id})
    return Mask(bits)


def visible_block_mask(p: Percept, block_id: int) -> Mask:
    """Like ``target_mask`` but returns an empty mask for an absent block."""
    return Mask(p.labels == block_label(block_id))


def _principal_axis(m: Mask) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if m.count < 2:
        raise DegenerateMask("principal axis needs at least two pixels", details={"count": m.count})
    u, v = m.coords()
    pts = np.column_stack([u - u.mean(), v - v.mean()])
    cov = pts.T @ pts / len(pts)
    _, vecs = np.linalg.eigh(cov)
    axis = vecs[:, -1]
    if axis[1] < 0 or (axis[1] == 0 and axis[0] < 0):
        axis = -axis
    return axis, pts, pts @ axis


def target_orientation(p: Percept, t: Mask) -> Vec3Dir:
    """Major axis of ``t`` with the disparity slope along it."""
    axis, _, s = _principal_axis(t)
    d = p.disparity[t.bits].astype(float)
    # pixel order of coords() and of boolean indexing agree (row-major)
    ss = float(s @ s)
    slope = float(s @ (d - d.mean()) / ss) if ss > 0 else 0.0
    return Vec3Dir(float(axis[0]), float(axis[1]), slope)


def major_axis_length(t: Mask) -> float:
    """Extent of the mask along its principal axis, in pixels."""
    _, _, s = _principal_axis(t)
    return float(s.max() - s.min() + 1.0)


def iou(a: Mask, b: Mask) -> float:
    union = int(np.logical_or(a.bits, b.bits).sum())
    if union == 0:
        raise BothEmpty("IOU of two empty masks")
    return int(np.logical_and(a.bits, b.bits).sum()) / union


def changed_fraction(initial: Mask, p: Percept, block_id: int) -> float:
    """Fraction of the initial mask's pixels whose label is no longer the block."""
    if not initial:
        return 0.0
    still = p.labels[initial.bits] == block_label(block_id)
    return float(1.0 - still.mean())


def swept_mask(h_i: Mask, h_j: Mask) -> Mask:
    """Filled convex hull of the union of two hand masks; boundary pixels included."""
    if not h_i or not h_j:
        raise EmptyMask("swept mask needs two nonempty masks")
    union = h_i | h_j
    u, v = union.coords()
    pts = np.unique(np.column_stack([u, v]), axis=0)
    rows = union.shape[0]
    bits = union.bits.copy()

    if len(pts) == 1:
        return Mask(bits)
    try:
        hull = ConvexHull(pts)
    except QhullError:
        # collinear pixels: rasterize the segment between the extreme points
        direction = pts[-1] - pts[0]
        s = pts @ direction
        a, b = pts[np.argmin(s)], pts[np.argmax(s)]
        n = int(max(abs(b[0] - a[0]), abs(b[1] - a[1]))) + 1
        line = np.rint(np.linspace(a, b, n)).astype(int)
        bits[rows - 1 - line[:, 1], line[:, 0]] = True
        return Mask(bits)

    u0, u1 = int(u.min()), int(u.max())
    v0, v1 = int(v.min()), int(v.max())
    gu, gv = np.meshgrid(np.arange(u0, u1 + 1), np.arange(v0, v1 + 1))
    grid = np.column_stack([gu.ravel(), gv.ravel()]).astype(float)
    inside = np.all(grid @ hull.equations[:, :2].T + hull.equations[:, 2] <= 1e-9, axis=1)
    hit = grid[inside].astype(int)
    bits[rows - 1 - hit[:, 1], hit[:, 0]] = True
    return Mask(bits)


def swept_depth(d_i: DepthRange, d_j: DepthRange) -> DepthRange:
    return d_i.union(d_j)


def save_percept(p: Percept, stem: str | Path) -> tuple[Path, Path]:
    """Write a plain PGM label image and a CSV disparity image."""
    stem = Path(stem)
    pgm, csv = stem.with_suffix(".pgm"), stem.with_suffix(".csv")
    rows, cols = p.shape
    with open(pgm, "w", encoding="ascii") as fh:
        fh.write(f"P2\n# tag={p.tag.kind}:{'' if p.tag.node is None else p.tag.node}\n{cols} {rows}\n255\n")
        np.savetxt(fh, p.labels, fmt="%d")
    np.savetxt(csv, p.disparity, fmt="%d", delimiter=",")
    return pgm, csv


def load_percept(stem: str | Path) -> Percept:
    stem = Path(stem)
    with open(stem.with_suffix(".pgm"), encoding="ascii") as fh:
        magic = fh.readline().strip()
        if magic != "P2":
            raise ValueError(f"not a plain PGM: {magic!r}")
        tag_line = fh.readline().strip()
        cols, rows = (int(x) for x in fh.readline().split())
        fh.readline()
        labels = np.loadtxt(fh, dtype=np.uint8, ndmin=2).reshape(rows, cols)
    kind, _, node = tag_line.removeprefix("# tag=").partition(":")
    disparity = np.loadtxt(stem.with_suffix(".csv"), dtype=np.uint8, delimiter=",", ndmin=2)
    return Percept(labels, disparity, CaptureTag(kind or "P", int(node) if node else None))
