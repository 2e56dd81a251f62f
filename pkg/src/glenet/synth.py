"""Synthetic LiDAR objects with controlled occlusion and label diversity.

A stand-in for a real driving dataset at desk scale. Objects are boxes
ray-cast from a sensor at the origin over an azimuth/elevation grid, so only
sensor-facing surfaces receive points and point counts fall off with the
square of distance. The generator deliberately produces *one-to-many*
families — identical partial clouds annotated with different box lengths —
because that ambiguity is exactly what the uncertainty model must learn.

Also implements the occlusion-driven augmentation: a sampled occluder is
placed between sensor and object, both are projected to a range image, and
the points falling inside the (jittered) occluder hull are deleted while the
annotation stays untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import DataError, DegenerateInputError, DomainError
from .geom import OrientedBox, Polygon2D, clip_polygon, convex_hull_2d, points_in_polygon, wrap_angle

AREA_EPS = 1e-12


@dataclass(eq=False)
class ObjectSample:
    """One annotated object: its observed points and the label that was drawn.

    ``n_original`` is the point count of the complete (unoccluded) cast;
    ``occlusion_fraction`` is kept exactly equal to
    ``1 - len(points) / n_original``. ``family`` groups samples that share an
    identical point multiset under different annotations (-1 for singles).
    """

    points: np.ndarray
    box: OrientedBox
    occlusion_fraction: float
    distance: float
    seed: int
    n_original: int
    family: int = -1

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(self.points) < 1:
            raise DegenerateInputError("object sample needs at least one point")
        if not 0.0 <= self.occlusion_fraction <= 1.0:
            raise DomainError(f"occlusion_fraction out of range: {self.occlusion_fraction}")
        if self.n_original < len(self.points):
            raise DomainError("n_original cannot be smaller than the surviving point count")
        center = np.array([self.box.cx, self.box.cy, self.box.cz])
        diag = math.sqrt(self.box.w**2 + self.box.l**2 + self.box.h**2)
        dist = np.linalg.norm(self.points - center, axis=1)
        if dist.max() > 1.5 * diag:
            raise DomainError("points stray beyond 1.5 box diagonals from the box center")


@dataclass(frozen=True)
class RangeImage:
    """Angular grid a point cloud projects onto (azimuth x elevation, radians)."""

    az_min: float
    az_max: float
    el_min: float
    el_max: float
    res: float
    depth: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.res <= 0:
            raise DomainError("range-image resolution must be positive")
        if not (self.az_max > self.az_min and self.el_max > self.el_min):
            raise DomainError("range-image extents are empty")

    def to_pixels(self, points: np.ndarray) -> np.ndarray:
        """Continuous pixel coordinates (az_px, el_px) of 3D points."""
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        az = np.arctan2(p[:, 1], p[:, 0])
        el = np.arctan2(p[:, 2], np.hypot(p[:, 0], p[:, 1]))
        return np.column_stack(((az - self.az_min) / self.res, (el - self.el_min) / self.res))


def range_image_for(points_list, res_deg: float) -> RangeImage:
    """A grid whose extents cover every given cloud, padded by one pixel."""
    res = math.radians(res_deg)
    all_pts = np.vstack([np.asarray(p).reshape(-1, 3) for p in points_list])
    az = np.arctan2(all_pts[:, 1], all_pts[:, 0])
    el = np.arctan2(all_pts[:, 2], np.hypot(all_pts[:, 0], all_pts[:, 1]))
    return RangeImage(
        az_min=float(az.min() - res),
        az_max=float(az.max() + res),
        el_min=float(el.min() - res),
        el_max=float(el.max() + res),
        res=res,
    )


# ---------------------------------------------------------------------------
# Ray casting
# ---------------------------------------------------------------------------


def cast_box_points(
    box: OrientedBox,
    res_deg: float,
    origin=(0.0, 0.0, 0.0),
    rng: Optional[np.random.Generator] = None,
    noise: float = 0.0,
) -> np.ndarray:
    """First-hit points of an angular ray grid against an oriented box.

    The grid is anchored to global angle multiples of the resolution, so the
    ray count through a fixed solid angle does not depend on the target. Only
    the nearest intersection per ray is kept, which restricts points to
    sensor-facing faces and makes the per-object count fall off as 1/d^2.
    """
    if res_deg <= 0:
        raise DomainError("angular resolution must be positive")
    origin = np.asarray(origin, dtype=np.float64)
    res = math.radians(res_deg)
    corners = _box_corners(box) - origin
    az = np.arctan2(corners[:, 1], corners[:, 0])
    if az.max() - az.min() > math.pi:
        raise DomainError("object spans the azimuth wrap; keep objects in the forward cone")
    el = np.arctan2(corners[:, 2], np.hypot(corners[:, 0], corners[:, 1]))
    az_bins = np.arange(math.floor(az.min() / res), math.ceil(az.max() / res) + 1) * res
    el_bins = np.arange(math.floor(el.min() / res), math.ceil(el.max() / res) + 1) * res
    az_g, el_g = np.meshgrid(az_bins, el_bins, indexing="ij")
    az_g, el_g = az_g.ravel(), el_g.ravel()
    dirs = np.column_stack(
        (np.cos(el_g) * np.cos(az_g), np.cos(el_g) * np.sin(az_g), np.sin(el_g))
    )

    # Slab test in the box frame (yaw-only rotation).
    c, s = math.cos(-box.r), math.sin(-box.r)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    o_local = rot @ (origin - np.array([box.cx, box.cy, box.cz]))
    d_local = dirs @ rot.T
    half = np.array([0.5 * box.l, 0.5 * box.w, 0.5 * box.h])
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d_local
        t1 = (-half - o_local) * inv
        t2 = (half - o_local) * inv
    t_near = np.nanmax(np.minimum(t1, t2), axis=1)
    t_far = np.nanmin(np.maximum(t1, t2), axis=1)
    hit = (t_far >= t_near) & (t_near > 0.0)
    pts = origin + t_near[hit, None] * dirs[hit]
    if noise > 0.0 and rng is not None and len(pts):
        pts = pts + rng.normal(0.0, noise, size=len(pts))[:, None] * dirs[hit]
    return pts


def _box_corners(box: OrientedBox) -> np.ndarray:
    foot = box.footprint()
    lo, hi = box.z_interval()
    top = np.column_stack((foot, np.full(4, hi)))
    bot = np.column_stack((foot, np.full(4, lo)))
    return np.vstack((bot, top))


# ---------------------------------------------------------------------------
# Corpus generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the synthetic corpus.

    Sizes are car-like by default. ``family_fraction`` of the corpus is
    emitted as one-to-many families: groups of ``family_size`` samples that
    share one rear-face point cloud but carry annotations whose lengths span
    ``±family_length_spread`` around the base length.
    """

    n_objects: int = 500
    distance_range: tuple[float, float] = (8.0, 28.0)
    azimuth_range_deg: tuple[float, float] = (-45.0, 45.0)
    width_range: tuple[float, float] = (1.5, 2.0)
    length_range: tuple[float, float] = (3.4, 4.8)
    height_range: tuple[float, float] = (1.4, 1.8)
    z_range: tuple[float, float] = (-0.4, 0.4)
    angular_res_deg: float = 0.2
    surface_noise: float = 0.008
    family_fraction: float = 0.3
    family_size: int = 5
    family_length_spread: float = 0.4
    rear_slab_depth: float = 0.25
    occluded_fraction: float = 0.5
    max_occlusion: float = 0.8
    label_noise: float = 0.5
    min_points: int = 12

    def __post_init__(self):
        if self.n_objects < 1:
            raise DomainError("n_objects must be positive")
        if self.family_size < 2:
            raise DomainError("family_size must be at least 2")
        if not 0.0 <= self.family_fraction <= 1.0:
            raise DomainError("family_fraction must lie in [0, 1]")
        if not 0.0 <= self.max_occlusion < 1.0:
            raise DomainError("max_occlusion must lie in [0, 1)")


def generate_scene_objects(config: SynthConfig, rng: np.random.Generator) -> list[ObjectSample]:
    """Draw a full corpus: one-to-many families first, then graded singles."""
    out: list[ObjectSample] = []
    n_groups = int(round(config.n_objects * config.family_fraction / config.family_size))
    n_singles = config.n_objects - n_groups * config.family_size
    if n_singles < 0:
        raise DomainError("family settings exceed the corpus size")
    for g in range(n_groups):
        out.extend(_generate_family(config, rng, family_id=g))
    for _ in range(n_singles):
        out.append(_generate_single(config, rng))
    return out


def _draw_box(config: SynthConfig, rng: np.random.Generator, yaw: Optional[float] = None):
    d = rng.uniform(*config.distance_range)
    az = math.radians(rng.uniform(*config.azimuth_range_deg))
    cx, cy = d * math.cos(az), d * math.sin(az)
    box = OrientedBox(
        cx=cx,
        cy=cy,
        cz=rng.uniform(*config.z_range),
        w=rng.uniform(*config.width_range),
        l=rng.uniform(*config.length_range),
        h=rng.uniform(*config.height_range),
        r=rng.uniform(-math.pi, math.pi) if yaw is None else yaw,
    )
    return box, az, d


def _generate_family(config: SynthConfig, rng: np.random.Generator, family_id: int) -> list[ObjectSample]:
    """One tail-slab cloud, several annotated lengths.

    The box is cast side-on so the sensor sees its whole flank, then the
    cloud is cropped to a thin slab at the tail end — as if an occluder hid
    everything else. The slab carries no length information, and the crop
    is real point deletion, so the recorded occlusion fraction is exactly
    the removed share of the cast. Annotation variants keep the tail fixed
    and move the center forward as the length changes.
    """
    for _ in range(200):
        box, _az, _d = _draw_box(config, rng, yaw=0.0)
        # Side-on with a small wobble: the flank faces the sensor.
        az = math.atan2(box.cy, box.cx)
        flip = math.pi if rng.uniform() < 0.5 else 0.0
        heading = wrap_angle(az + 0.5 * math.pi + flip + az_jitter(rng))
        box = OrientedBox(box.cx, box.cy, box.cz, box.w, box.l, box.h, heading)
        full = cast_box_points(box, config.angular_res_deg, rng=rng, noise=config.surface_noise)
        if len(full) < config.min_points:
            continue
        # Tail slab in the box frame: keep only points near the local -x face.
        local_x = _local_x(full, box)
        slab = full[local_x <= -0.5 * box.l + config.rear_slab_depth]
        if len(slab) < config.min_points or len(slab) == len(full):
            continue
        frac = 1.0 - len(slab) / len(full)
        hdir = np.array([math.cos(box.r), math.sin(box.r), 0.0])
        tail = np.array([box.cx, box.cy, box.cz]) - hdir * (0.5 * box.l)
        s = config.family_length_spread
        lengths = box.l * np.linspace(1.0 - s, 1.0 + s, config.family_size)
        members = []
        for li in lengths:
            center_i = tail + hdir * (0.5 * li)
            box_i = OrientedBox(center_i[0], center_i[1], center_i[2], box.w, float(li), box.h, box.r)
            members.append(
                ObjectSample(
                    points=slab.copy(),
                    box=box_i,
                    occlusion_fraction=frac,
                    distance=float(np.linalg.norm(center_i[:2])),
                    seed=int(rng.integers(2**31)),
                    n_original=len(full),
                    family=family_id,
                )
            )
        return members
    raise DataError("could not cast a viable family after 200 attempts")


def _generate_single(config: SynthConfig, rng: np.random.Generator) -> ObjectSample:
    """A lone object; optionally sector-occluded with label jitter to match."""
    for _ in range(200):
        box, _az, _d = _draw_box(config, rng)
        full = cast_box_points(box, config.angular_res_deg, rng=rng, noise=config.surface_noise)
        if len(full) < config.min_points:
            continue
        n_full = len(full)
        points = full
        frac = 0.0
        if rng.uniform() < config.occluded_fraction:
            target = rng.uniform(0.05, config.max_occlusion)
            k = int(round(target * n_full))
            k = min(k, n_full - max(config.min_points // 2, 5))
            if k > 0:
                # Delete a contiguous azimuth sector, like a real occluder.
                order = np.argsort(np.arctan2(full[:, 1], full[:, 0]), kind="stable")
                side = order[k:] if rng.uniform() < 0.5 else order[: n_full - k]
                points = full[np.sort(side)]
                frac = 1.0 - len(points) / n_full
        ann = _jitter_annotation(box, frac, config, rng)
        try:
            return ObjectSample(
                points=points,
                box=ann,
                occlusion_fraction=frac,
                distance=float(math.hypot(ann.cx, ann.cy)),
                seed=int(rng.integers(2**31)),
                n_original=n_full,
            )
        except DomainError:
            continue  # annotation jitter pushed points outside the tether
    raise DataError("could not cast a viable object after 200 attempts")


def _jitter_annotation(
    box: OrientedBox, frac: float, config: SynthConfig, rng: np.random.Generator
) -> OrientedBox:
    """Simulated annotator disagreement: grows with the hidden fraction."""
    if frac <= 0.0 or config.label_noise <= 0.0:
        return box
    sigma = config.label_noise * frac
    u = float(np.clip(rng.normal(0.0, sigma), -0.4, 0.4))  # log-length jitter
    t = float(np.clip(rng.normal(0.0, 0.5 * sigma * box.l), -0.5 * box.l, 0.5 * box.l))
    hdir = np.array([math.cos(box.r), math.sin(box.r)])
    return OrientedBox(
        cx=box.cx + t * hdir[0],
        cy=box.cy + t * hdir[1],
        cz=box.cz,
        w=box.w,
        l=box.l * math.exp(u),
        h=box.h,
        r=box.r,
    )


def az_jitter(rng: np.random.Generator, limit_deg: float = 6.0) -> float:
    return math.radians(rng.uniform(-limit_deg, limit_deg))


def _local_x(points: np.ndarray, box: OrientedBox) -> np.ndarray:
    c, s = math.cos(-box.r), math.sin(-box.r)
    dx = points[:, 0] - box.cx
    dy = points[:, 1] - box.cy
    return c * dx - s * dy


# ---------------------------------------------------------------------------
# Augmentations
# ---------------------------------------------------------------------------


def occlusion_augment(
    sample: ObjectSample,
    rng: np.random.Generator,
    occluder_points: Optional[np.ndarray] = None,
    res_deg: float = 0.2,
    jitter_px: float = 2.0,
    min_survivors: int = 5,
) -> ObjectSample:
    """Delete the points hidden behind a simulated occluder.

    The occluder cloud (synthesized between sensor and object when not
    supplied) and the object are projected onto a shared range image; the
    convex hull of the occluder's projection is vertex-jittered, intersected
    with the object's hull, and every object point projecting inside that
    occluded area is removed. The annotation box is never touched. If fewer
    than ``min_survivors`` points would remain — or the hulls do not overlap
    — the sample is returned unchanged.
    """
    pts = sample.points
    if len(pts) < 8:
        raise DegenerateInputError("occlusion augmentation needs at least 8 points")
    if occluder_points is None:
        occluder_points = _synthesize_occluder(sample, rng, res_deg)
        if occluder_points is None:
            return sample
    occluder_points = np.asarray(occluder_points, dtype=np.float64).reshape(-1, 3)
    if len(occluder_points) < 3:
        return sample
    grid = range_image_for([pts, occluder_points], res_deg)
    obj_px = grid.to_pixels(pts)
    occ_px = grid.to_pixels(occluder_points)
    try:
        occ_hull = convex_hull_2d(occ_px)
        jittered = occ_hull.as_array() + rng.uniform(-jitter_px, jitter_px, size=(len(occ_hull.vertices), 2))
        occ_hull = convex_hull_2d(jittered)  # re-hull: jitter may break convexity
        obj_hull = convex_hull_2d(obj_px)
    except DegenerateInputError:
        return sample
    occluded = clip_polygon(obj_hull.as_array(), occ_hull.as_array())
    if len(occluded) < 3 or abs(_poly_area(occluded)) <= AREA_EPS:
        return sample
    inside = points_in_polygon(obj_px, Polygon2D(tuple(map(tuple, occluded))))
    survivors = pts[~inside]
    if len(survivors) < min_survivors:
        return sample
    frac = 1.0 - len(survivors) / sample.n_original
    return replace(sample, points=survivors, occlusion_fraction=frac)


def _poly_area(verts: np.ndarray) -> float:
    x, y = verts[:, 0], verts[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _synthesize_occluder(
    sample: ObjectSample, rng: np.random.Generator, res_deg: float
) -> Optional[np.ndarray]:
    """A small box part-way to the object, sized to 30-70% of its azimuth span."""
    az_pts = np.arctan2(sample.points[:, 1], sample.points[:, 0])
    span = float(az_pts.max() - az_pts.min())
    if span <= 0.0:
        return None
    center_az = float(az_pts.mean() + rng.uniform(-0.5, 0.5) * span)
    dist = sample.distance * rng.uniform(0.45, 0.7)
    frac = rng.uniform(0.3, 0.7)
    width = max(2.0 * dist * math.tan(0.5 * frac * span), 0.2)
    z_span = sample.points[:, 2].max() - sample.points[:, 2].min()
    occ = OrientedBox(
        cx=dist * math.cos(center_az),
        cy=dist * math.sin(center_az),
        cz=float(sample.points[:, 2].mean()),
        w=width,
        l=max(0.4, 0.3 * width),
        h=max(0.3, float(z_span) * rng.uniform(0.8, 1.4)),
        r=wrap_angle(center_az + math.pi / 2.0),
    )
    pts = cast_box_points(occ, res_deg)
    return pts if len(pts) >= 3 else None


def standard_augment(
    sample: ObjectSample,
    rng: np.random.Generator,
    flip: Optional[bool] = None,
    scale: Optional[float] = None,
    rotation: Optional[float] = None,
) -> ObjectSample:
    """Random flip across the forward axis, global scale, global yaw.

    Points and box transform together, so containment relations are exactly
    preserved. Pass explicit ``flip``/``scale``/``rotation`` to pin any of
    the three draws (the remaining ones still consume the stream).
    """
    do_flip = bool(rng.uniform() < 0.5) if flip is None else bool(flip)
    s = float(rng.uniform(0.95, 1.05)) if scale is None else float(scale)
    rho = float(rng.uniform(-math.pi / 4.0, math.pi / 4.0)) if rotation is None else float(rotation)
    if s <= 0:
        raise DomainError("scale must be positive")
    pts = sample.points.copy()
    b = sample.box
    cx, cy, cz, r = b.cx, b.cy, b.cz, b.r
    if do_flip:
        pts[:, 1] = -pts[:, 1]
        cy, r = -cy, wrap_angle(-r)
    pts *= s
    cx, cy, cz = cx * s, cy * s, cz * s
    w, l, h = b.w * s, b.l * s, b.h * s
    cr, sr = math.cos(rho), math.sin(rho)
    px = cr * pts[:, 0] - sr * pts[:, 1]
    py = sr * pts[:, 0] + cr * pts[:, 1]
    pts = np.column_stack((px, py, pts[:, 2]))
    cx, cy = cr * cx - sr * cy, sr * cx + cr * cy
    r = wrap_angle(r + rho)
    box = OrientedBox(cx, cy, cz, w, l, h, r)
    return replace(
        sample,
        points=pts,
        box=box,
        distance=float(math.hypot(cx, cy)),
    )
