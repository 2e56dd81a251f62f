"""Oriented 3D boxes and the 2D computational geometry behind them.

Everything here is a pure function over immutable values: anchor-relative
box encoding/decoding, rotated-rectangle IoU in the ground plane, full 3D
IoU, convex hulls and point-in-polygon tests used by the occlusion
augmentation and the box-voting post-processing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, DomainError

# Absolute area below which a clipped intersection is treated as empty.
AREA_EPS = 1e-12


def wrap_angle(r: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    r = float(r)
    r = r - 2.0 * math.pi * math.floor((r + math.pi) / (2.0 * math.pi))
    if r <= -math.pi:
        r = math.pi
    return r


@dataclass(frozen=True)
class OrientedBox:
    """7-parameter 3D box: center, size, yaw about the vertical axis."""

    cx: float
    cy: float
    cz: float
    w: float
    l: float
    h: float
    r: float

    def __post_init__(self):
        if not (self.w > 0 and self.l > 0 and self.h > 0):
            raise DomainError(f"box sizes must be positive, got w={self.w}, l={self.l}, h={self.h}")
        object.__setattr__(self, "r", wrap_angle(self.r))

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz, self.w, self.l, self.h, self.r], dtype=np.float64)

    @staticmethod
    def from_array(a) -> "OrientedBox":
        a = np.asarray(a, dtype=np.float64).reshape(7)
        return OrientedBox(*(float(v) for v in a))

    def volume(self) -> float:
        return self.w * self.l * self.h

    def footprint(self) -> np.ndarray:
        """Corners of the yaw-rotated footprint rectangle, CCW, shape (4, 2).

        Length runs along the heading axis, width across it.
        """
        c, s = math.cos(self.r), math.sin(self.r)
        hl, hw = 0.5 * self.l, 0.5 * self.w
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]], dtype=np.float64)
        rot = np.array([[c, -s], [s, c]], dtype=np.float64)
        return local @ rot.T + np.array([self.cx, self.cy])

    def z_interval(self) -> tuple[float, float]:
        return self.cz - 0.5 * self.h, self.cz + 0.5 * self.h


@dataclass(frozen=True)
class Anchor:
    """Predefined box size; the implicit anchor center is the local origin."""

    wa: float
    la: float
    ha: float

    def __post_init__(self):
        if not (self.wa > 0 and self.la > 0 and self.ha > 0):
            raise DomainError("anchor sizes must be positive")

    @property
    def diagonal(self) -> float:
        return math.hypot(self.la, self.wa)


@dataclass(frozen=True)
class BoxEncoding:
    """Anchor-relative regression offsets plus the heading half-plane bit."""

    t_cx: float
    t_cy: float
    t_cz: float
    t_w: float
    t_l: float
    t_h: float
    t_r: float
    dir_bit: int

    def offsets(self) -> np.ndarray:
        return np.array(
            [self.t_cx, self.t_cy, self.t_cz, self.t_w, self.t_l, self.t_h, self.t_r],
            dtype=np.float64,
        )

    @staticmethod
    def from_offsets(t, dir_bit: int) -> "BoxEncoding":
        t = np.asarray(t, dtype=np.float64).reshape(7)
        return BoxEncoding(*(float(v) for v in t), dir_bit=int(dir_bit))


def encode_box(box: OrientedBox, anchor: Anchor) -> BoxEncoding:
    """Express a box as normalized offsets relative to a centered anchor.

    Centers are scaled by the anchor footprint diagonal (height by the
    anchor height), sizes become log-ratios, and yaw is encoded as its sine
    with ``dir_bit`` marking the upper half-plane (yaw in [0, pi)).
    """
    d = anchor.diagonal
    return BoxEncoding(
        t_cx=box.cx / d,
        t_cy=box.cy / d,
        t_cz=box.cz / anchor.ha,
        t_w=math.log(box.w / anchor.wa),
        t_l=math.log(box.l / anchor.la),
        t_h=math.log(box.h / anchor.ha),
        t_r=math.sin(box.r),
        dir_bit=1 if 0.0 <= box.r < math.pi else 0,
    )


def decode_box(enc: BoxEncoding, anchor: Anchor) -> OrientedBox:
    """Invert :func:`encode_box`.

    Yaw is recovered on the principal arcsine branch and placed in the
    half-plane selected by ``dir_bit``; boxes whose yaw lies beyond the
    principal branch decode to the equal-sine representative of the same
    half-plane. Exact left-inverse for yaw in [-pi/2, pi/2] and pi.
    """
    if abs(enc.t_r) > 1.0:
        raise DomainError(f"t_r must lie in [-1, 1], got {enc.t_r}")
    d = anchor.diagonal
    theta = math.asin(enc.t_r)
    if enc.dir_bit == 1:
        r = theta if theta >= 0.0 else wrap_angle(math.pi - theta)
    else:
        r = theta if theta < 0.0 else wrap_angle(math.pi - theta)
    return OrientedBox(
        cx=enc.t_cx * d,
        cy=enc.t_cy * d,
        cz=enc.t_cz * anchor.ha,
        w=anchor.wa * math.exp(enc.t_w),
        l=anchor.la * math.exp(enc.t_l),
        h=anchor.ha * math.exp(enc.t_h),
        r=r,
    )


# ---------------------------------------------------------------------------
# 2D polygon machinery
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Polygon2D:
    """Ordered planar vertex loop; hulls produced here are CCW and strictly convex."""

    vertices: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if len(self.vertices) < 3:
            raise DegenerateInputError("polygon needs at least 3 vertices")

    def as_array(self) -> np.ndarray:
        return np.asarray(self.vertices, dtype=np.float64)

    def area(self) -> float:
        return polygon_area(self.as_array())


def polygon_area(verts: np.ndarray) -> float:
    """Shoelace area of a CCW vertex loop (signed; CCW positive)."""
    v = np.asarray(verts, dtype=np.float64)
    if len(v) < 3:
        return 0.0
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_polygon(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of ``subject`` by convex CCW ``clipper``.

    Returns the vertex array of the intersection polygon (possibly empty).
    """
    output = [tuple(p) for p in np.asarray(subject, dtype=np.float64)]
    clipper = np.asarray(clipper, dtype=np.float64)
    n = len(clipper)
    for i in range(n):
        if not output:
            break
        a = clipper[i]
        b = clipper[(i + 1) % n]
        ex, ey = b[0] - a[0], b[1] - a[1]
        inputs = output
        output = []

        def side(p):
            return ex * (p[1] - a[1]) - ey * (p[0] - a[0])

        prev = inputs[-1]
        prev_side = side(prev)
        for cur in inputs:
            cur_side = side(cur)
            if cur_side >= 0.0:
                if prev_side < 0.0:
                    output.append(_edge_intersection(prev, cur, a, b))
                output.append(cur)
            elif prev_side >= 0.0:
                output.append(_edge_intersection(prev, cur, a, b))
            prev, prev_side = cur, cur_side
    return np.asarray(output, dtype=np.float64).reshape(-1, 2)


def _edge_intersection(p, q, a, b):
    """Intersection of segment pq with the infinite line through ab."""
    r = (q[0] - p[0], q[1] - p[1])
    s = (b[0] - a[0], b[1] - a[1])
    denom = r[0] * s[1] - r[1] * s[0]
    t = ((a[0] - p[0]) * s[1] - (a[1] - p[1]) * s[0]) / denom
    return (p[0] + t * r[0], p[1] + t * r[1])


def intersection_area(poly_a: np.ndarray, poly_b: np.ndarray) -> float:
    """Area of the intersection of two convex CCW polygons."""
    inter = clip_polygon(poly_a, poly_b)
    if len(inter) < 3:
        return 0.0
    area = polygon_area(inter)
    return area if area > AREA_EPS else 0.0


def iou_bev(a: OrientedBox, b: OrientedBox) -> float:
    """Rotated-rectangle IoU of the two box footprints in the ground plane."""
    inter = intersection_area(a.footprint(), b.footprint())
    union = a.w * a.l + b.w * b.l - inter
    if union <= 0.0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def iou_3d(a: OrientedBox, b: OrientedBox) -> float:
    """Volumetric IoU: footprint intersection times vertical overlap."""
    inter_area = intersection_area(a.footprint(), b.footprint())
    if inter_area <= 0.0:
        return 0.0
    alo, ahi = a.z_interval()
    blo, bhi = b.z_interval()
    dz = min(ahi, bhi) - max(alo, blo)
    if dz <= 0.0:
        return 0.0
    inter = inter_area * dz
    union = a.volume() + b.volume() - inter
    if union <= 0.0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def convex_hull_2d(points) -> Polygon2D:
    """Counter-clockwise convex hull of a planar point set (monotone chain).

    Collinear points on the hull boundary are dropped, so the result is
    strictly convex. Raises DegenerateInputError for fewer than 3 points or
    an all-collinear set.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 3:
        raise DegenerateInputError("convex hull needs at least 3 points")
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    pts = pts[order]
    # Deduplicate exactly equal points to keep the turn test clean.
    keep = np.ones(len(pts), dtype=bool)
    keep[1:] = np.any(np.diff(pts, axis=0) != 0.0, axis=1)
    pts = pts[keep]
    if len(pts) < 3:
        raise DegenerateInputError("convex hull needs 3 distinct points")
    # Plain float tuples: the stack loop below touches every point a few
    # times, and scalar arithmetic is severalfold faster than 0-d arrays.
    coords = [(float(x), float(y)) for x, y in pts]

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list[tuple[float, float]] = []
    for p in coords:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0.0:
            lower.pop()
        lower.append(p)
    upper: list[tuple[float, float]] = []
    for p in reversed(coords):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0.0:
            upper.pop()
        upper.append(p)
    hull = lower[:-1] + upper[:-1]
    if len(hull) < 3:
        raise DegenerateInputError("points are collinear; hull is degenerate")
    return Polygon2D(tuple(hull))


def point_in_polygon(p, poly: Polygon2D, eps: float = 1e-12) -> bool:
    """Even-odd containment test; points on the boundary count as inside."""
    px, py = float(p[0]), float(p[1])
    verts = poly.as_array()
    n = len(verts)
    inside = False
    for i in range(n):
        ax, ay = verts[i]
        bx, by = verts[(i + 1) % n]
        # Boundary: p collinear with the edge and inside its bounding range.
        cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
        if abs(cross) <= eps * max(1.0, abs(bx - ax) + abs(by - ay)):
            if min(ax, bx) - eps <= px <= max(ax, bx) + eps and min(ay, by) - eps <= py <= max(ay, by) + eps:
                return True
        if (ay > py) != (by > py):
            x_at = ax + (py - ay) * (bx - ax) / (by - ay)
            if px < x_at:
                inside = not inside
    return inside


def points_in_polygon(points: np.ndarray, poly: Polygon2D) -> np.ndarray:
    """Vectorized convex-polygon containment for a CCW polygon.

    Boundary counts as inside. Intended for hulls from convex_hull_2d.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    verts = poly.as_array()
    a = verts
    b = np.roll(verts, -1, axis=0)
    # side[i, j] >= 0 iff point i is on the inner side of edge j
    side = (b[:, 0] - a[:, 0])[None, :] * (pts[:, 1:2] - a[:, 1][None, :]) - (
        b[:, 1] - a[:, 1]
    )[None, :] * (pts[:, 0:1] - a[:, 0][None, :])
    return np.all(side >= -1e-12, axis=1)
