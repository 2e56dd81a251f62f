"""Uncertainty-aware post-processing of box detections.

Variance voting merges overlapping detections into one box per cluster,
weighting each member by how close it sits to the cluster seed and how
confident (low-variance) its coordinates are.  A plain score-only greedy
NMS is included as the baseline it replaces.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .errors import DomainError, ShapeError, UnsupportedModeError
from .geom import OrientedBox, iou_3d, iou_bev, wrap_angle

__all__ = [
    "Detection",
    "VotingConfig",
    "variance_voting",
    "variance_voting_scored",
    "nms",
]

BOX_DIM = 7


def _validated_variance(variance) -> Optional[Union[float, np.ndarray]]:
    if variance is None:
        return None
    if np.isscalar(variance) or getattr(variance, "ndim", None) == 0:
        v = float(variance)
        if not math.isfinite(v) or v <= 0.0:
            raise DomainError(f"variance must be finite and strictly positive, got {v}")
        return v
    arr = np.asarray(variance, dtype=np.float64)
    if arr.shape != (BOX_DIM,):
        raise ShapeError(f"variance must be a scalar or shape ({BOX_DIM},), got {arr.shape}")
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0.0):
        raise DomainError("variance must be finite and strictly positive in every dimension")
    return arr


@dataclass(frozen=True)
class Detection:
    """One scored box, optionally with a per-dimension coordinate variance.

    ``variance`` may be a 7-vector, a scalar (applied to every dimension),
    or None for detectors that do not estimate one — such detections can
    pass through :func:`nms` but not through voting.
    """

    box: OrientedBox
    score: float
    variance: Optional[Union[float, np.ndarray]] = None

    def __post_init__(self):
        score = float(self.score)
        if not 0.0 <= score <= 1.0:
            raise DomainError(f"score must lie in [0, 1], got {score}")
        object.__setattr__(self, "score", score)
        object.__setattr__(self, "variance", _validated_variance(self.variance))

    def variance_vector(self) -> np.ndarray:
        if self.variance is None:
            raise UnsupportedModeError(
                "this detection carries no variance; it cannot join variance voting")
        return np.broadcast_to(np.asarray(self.variance, dtype=np.float64), (BOX_DIM,))


@dataclass(frozen=True)
class VotingConfig:
    """Voting parameters: locality bandwidth and cluster membership threshold."""

    sigma_t: float = 0.05
    mu: float = 0.01
    use_3d_iou: bool = False

    def __post_init__(self):
        if not (math.isfinite(self.sigma_t) and self.sigma_t > 0.0):
            raise DomainError(f"sigma_t must be finite and positive, got {self.sigma_t}")
        if not 0.0 <= self.mu <= 1.0:
            raise DomainError(f"mu must lie in [0, 1], got {self.mu}")

    def iou(self, a: OrientedBox, b: OrientedBox) -> float:
        return iou_3d(a, b) if self.use_3d_iou else iou_bev(a, b)


def variance_voting_scored(
    dets: Sequence[Detection], cfg: VotingConfig = VotingConfig()
) -> list[tuple[OrientedBox, float]]:
    """Cluster-merge detections; one (merged box, seed score) per cluster.

    Repeatedly seeds on the highest-scored remaining detection (lowest index
    on ties), gathers every remaining detection overlapping it above ``mu``,
    and emits the per-dimension weighted mean of the cluster with weights
    ``exp(-(1 - IoU)^2 / sigma_t) / variance``.  A member whose yaw differs
    from the seed's by more than 45 degrees (in the |sin| > |cos| sense)
    keeps its weight in every dimension except yaw.  Yaws are averaged as
    offsets from the seed's yaw so clusters straddling the +-pi seam merge
    onto the correct side.  The merged box keeps the seed's score; voters
    are consumed, and the loop continues until the pool is empty.
    """
    variances = [d.variance_vector() for d in dets]  # validates before any work
    remaining = list(range(len(dets)))
    out: list[tuple[OrientedBox, float]] = []
    while remaining:
        seed = max(remaining, key=lambda i: (dets[i].score, -i))
        seed_box = dets[seed].box
        seed_arr = seed_box.as_array()
        ious = {i: cfg.iou(dets[i].box, seed_box) for i in remaining}
        # The seed always belongs to its own cluster: its self-IoU of 1
        # clears every threshold below 1, and at the degenerate mu = 1 the
        # seed must still be consumed for the loop to terminate.
        voters = [i for i in remaining if i == seed or ious[i] > cfg.mu]
        num = np.zeros(BOX_DIM)
        den = np.zeros(BOX_DIM)
        for i in voters:
            p = math.exp(-((1.0 - ious[i]) ** 2) / cfg.sigma_t)
            w = p / variances[i]
            b = dets[i].box.as_array()
            d_yaw = b[6] - seed_arr[6]
            b[6] = seed_arr[6] + wrap_angle(d_yaw)
            if abs(math.sin(d_yaw)) > abs(math.cos(d_yaw)):
                w[6] = 0.0
            num += w * b
            den += w
        merged = num / den
        merged[6] = wrap_angle(merged[6])
        out.append((OrientedBox.from_array(merged), dets[seed].score))
        voters_set = set(voters)
        remaining = [i for i in remaining if i not in voters_set]
    return out


def variance_voting(
    dets: Sequence[Detection], cfg: VotingConfig = VotingConfig()
) -> list[OrientedBox]:
    """The merged boxes of :func:`variance_voting_scored`, in emission order."""
    return [box for box, _ in variance_voting_scored(dets, cfg)]


def nms(
    dets: Sequence[Detection], iou_threshold: float, use_3d_iou: bool = False
) -> list[Detection]:
    """Greedy score-ordered suppression: drop anything overlapping a kept box.

    Detections are visited by descending score (input order on ties) and
    kept unless they overlap an already kept detection strictly above the
    threshold.  Returns the kept detections in visit order.
    """
    iou_fn = iou_3d if use_3d_iou else iou_bev
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    kept: list[int] = []
    for i in order:
        if all(iou_fn(dets[i].box, dets[j].box) <= iou_threshold for j in kept):
            kept.append(i)
    return [dets[i] for i in kept]
