"""Probabilistic box regression and quality estimation.

A regression head that outputs a Gaussian over the encoded box offsets can
be trained against labels that are themselves uncertain.  This module holds
the pieces of that story: the Gaussian/label distribution types, the
KL-based regression loss with its zero-label-variance degenerate case, the
closed-form gradients of that loss, a small point-cloud regressor for
comparing loss modes on equal footing, and a learned coefficient head that
calibrates IoU-quality estimates from predicted variance.

All quantities live in encoded-offset space (see :mod:`glenet.geom`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DomainError, ShapeError, UnsupportedModeError
from .geom import Anchor, BoxEncoding, OrientedBox, decode_box, iou_3d
from .model import (
    DEFAULT_ANCHOR,
    LabelUncertainty,
    N_POINTS,
    OFFSET_DIM,
    encoded_target,
    kfold_partition,
    preprocess,
)
from .nn import Adam, Linear, OneCycleSchedule, PointNet
from .rng import stream
from .synth import ObjectSample

__all__ = [
    "GaussianBox",
    "LabelDistribution",
    "kl_reg_terms",
    "kl_reg_loss",
    "kl_reg_grad",
    "kl_reg_terms_graph",
    "UaqeHead",
    "uaqe_apply",
    "QualityPairs",
    "make_quality_pairs",
    "train_uaqe",
    "quality_mae",
    "ToyConfig",
    "ToyRegressor",
    "RegressorOutput",
    "ToyMetrics",
    "train_toy_regressor",
]


def _vec7(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.shape != (OFFSET_DIM,):
        raise ShapeError(f"{name} must have shape ({OFFSET_DIM},), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} must be finite")
    return arr


@dataclass(frozen=True)
class GaussianBox:
    """A predicted distribution over the 7 encoded box offsets.

    ``mean`` is the point prediction, ``sigma`` the per-dimension standard
    deviation; both length 7, sigma strictly positive.
    """

    mean: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", _vec7(self.mean, "mean"))
        object.__setattr__(self, "sigma", _vec7(self.sigma, "sigma"))
        if np.any(self.sigma <= 0.0):
            raise DomainError("predicted sigma must be strictly positive")


@dataclass(frozen=True)
class LabelDistribution:
    """An annotation treated as a Gaussian over the encoded offsets.

    ``sigma`` may be zero in any dimension; a zero marks that dimension as
    an exact (point-mass) label and switches the loss to its degenerate
    form there.
    """

    mean: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", _vec7(self.mean, "mean"))
        object.__setattr__(self, "sigma", _vec7(self.sigma, "sigma"))
        if np.any(self.sigma < 0.0):
            raise DomainError("label sigma must be non-negative")

    @staticmethod
    def from_uncertainty(mean: np.ndarray, uncertainty: LabelUncertainty) -> "LabelDistribution":
        return LabelDistribution(mean, np.sqrt(uncertainty.variance))

    @staticmethod
    def point_mass(mean: np.ndarray) -> "LabelDistribution":
        return LabelDistribution(mean, np.zeros(OFFSET_DIM))


# ---------------------------------------------------------------------------
# The KL regression loss and its gradients
# ---------------------------------------------------------------------------


def kl_reg_terms(pred: GaussianBox, label: LabelDistribution) -> np.ndarray:
    """Per-dimension regression penalty between prediction and label.

    Dimensions with ``label.sigma > 0`` score
    ``ln(sigma_hat / sigma) + sigma^2 / (2 sigma_hat^2) + err^2 / (2 sigma_hat^2)``;
    dimensions with ``sigma = 0`` drop the divergent ``-ln sigma`` constant
    and score ``ln sigma_hat + err^2 / (2 sigma_hat^2)`` (same gradients).
    The minimum over (mean, sigma_hat) is 0.5 per positive-sigma dimension.
    """
    err_sq = (label.mean - pred.mean) ** 2
    base = (label.sigma**2 + err_sq) / (2.0 * pred.sigma**2)
    log_label = np.where(label.sigma > 0.0, np.log(np.where(label.sigma > 0.0, label.sigma, 1.0)), 0.0)
    return np.log(pred.sigma) - log_label + base


def kl_reg_loss(pred: GaussianBox, label: LabelDistribution, reduce: str = "sum") -> float:
    """The regression loss over all 7 dimensions (``sum`` or ``mean``)."""
    terms = kl_reg_terms(pred, label)
    if reduce == "sum":
        return float(terms.sum())
    if reduce == "mean":
        return float(terms.mean())
    raise ConfigError(f"unknown reduce mode {reduce!r}; expected 'sum' or 'mean'")


def kl_reg_grad(pred: GaussianBox, label: LabelDistribution) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form per-dimension gradients of the summed loss.

    Returns ``(d_mean, d_sigma)`` where
    ``d_mean = (mean - label.mean) / sigma_hat^2`` and
    ``d_sigma = (1 - (sigma^2 + err^2) / sigma_hat^2) / sigma_hat``.
    The factored form makes both exactly zero at the optimum
    ``sigma_hat = sigma, mean = label.mean``.  With a zero-sigma label and a
    perfect mean the sigma gradient collapses to ``1 / sigma_hat``, which
    grows without bound as the head sharpens — the instability that
    motivates keeping label variance in the loss.
    """
    err_sq = (pred.mean - label.mean) ** 2
    d_mean = (pred.mean - label.mean) / pred.sigma**2
    d_sigma = (1.0 - (label.sigma**2 + err_sq) / pred.sigma**2) / pred.sigma
    return d_mean, d_sigma


def kl_reg_terms_graph(mean: Tensor, sigma: Tensor, label_mean: np.ndarray,
                       label_sigma: np.ndarray) -> Tensor:
    """Autodiff version of :func:`kl_reg_terms` for batched tensors.

    ``mean`` and ``sigma`` have shape ``(B, 7)`` (or ``(7,)``); the label
    arrays are constants broadcast against them.  Returns the per-dimension
    terms with the same shape.
    """
    label_mean = np.asarray(label_mean, dtype=np.float64)
    label_sigma = np.asarray(label_sigma, dtype=np.float64)
    if np.any(label_sigma < 0.0):
        raise DomainError("label sigma must be non-negative")
    log_label = np.where(label_sigma > 0.0,
                         np.log(np.where(label_sigma > 0.0, label_sigma, 1.0)), 0.0)
    err_sq = ad.square(ad.sub(mean, Tensor.const(label_mean)))
    num = ad.add(err_sq, Tensor.const(label_sigma**2))
    den = ad.mul(ad.square(sigma), Tensor.const(2.0))
    return ad.add(ad.sub(ad.log(sigma), Tensor.const(log_label)), ad.div(num, den))


# ---------------------------------------------------------------------------
# Quality estimation: variance-aware calibration of an IoU estimate
# ---------------------------------------------------------------------------


@dataclass
class UaqeHead:
    """Two fully connected layers mapping 7-dim sigma to a coefficient.

    ``7 -> hidden -> 1`` with a ReLU between and a sigmoid on top, so the
    coefficient always lies strictly inside (0, 1).
    """

    fc1: Linear
    fc2: Linear

    @staticmethod
    def create(rng: np.random.Generator, hidden: int = 16) -> "UaqeHead":
        return UaqeHead(fc1=Linear(OFFSET_DIM, hidden, rng, "uaqe_fc1"),
                        fc2=Linear(hidden, 1, rng, "uaqe_fc2"))

    def parameters(self) -> dict[str, Tensor]:
        return {**self.fc1.parameters(), **self.fc2.parameters()}

    def coefficient_graph(self, sigma: Tensor) -> Tensor:
        """Coefficient tensor of shape (B, 1) for a (B, 7) sigma tensor."""
        return ad.sigmoid(self.fc2(ad.relu(self.fc1(sigma))))

    def coefficient(self, sigma: np.ndarray) -> float:
        sigma = _vec7(sigma, "sigma")
        out = self.coefficient_graph(Tensor.const(sigma.reshape(1, OFFSET_DIM)))
        return float(out.data[0, 0])


def uaqe_apply(head: UaqeHead, sigma: np.ndarray, raw_iou_estimate: float) -> float:
    """Calibrated quality estimate: the raw estimate scaled by the head.

    The coefficient is strictly below 1, so the result is always at or
    below the raw estimate (equal only when the raw estimate is 0).
    """
    raw = float(raw_iou_estimate)
    if not 0.0 <= raw <= 1.0:
        raise DomainError(f"raw IoU estimate must lie in [0, 1], got {raw}")
    return raw * head.coefficient(sigma)


@dataclass(frozen=True)
class QualityPairs:
    """Aligned (sigma, raw estimate, true IoU) triples for calibration."""

    sigma: np.ndarray  # (n, 7)
    raw: np.ndarray  # (n,)
    true_iou: np.ndarray  # (n,)

    def __post_init__(self):
        if not (len(self.sigma) == len(self.raw) == len(self.true_iou)):
            raise ShapeError("quality pair arrays must share their length")


# Per-dimension scale of how strongly each offset's sigma responds to
# localization difficulty; length dominates, matching how elongated boxes
# lose their far end first.
_QUALITY_SIGMA_SCALE = np.array([0.05, 0.05, 0.04, 0.06, 0.12, 0.05, 0.08])


def make_quality_pairs(n: int, rng: np.random.Generator) -> QualityPairs:
    """Synthetic calibration triples with a known difficulty structure.

    A latent difficulty in [0, 1] drives all three observables: the true
    IoU falls with difficulty, the per-dimension sigmas grow with it (with
    multiplicative jitter), and the raw quality estimate overshoots the
    true IoU by an amount that also grows with difficulty — the situation
    a variance-aware correction can exploit.
    """
    if n < 1:
        raise ConfigError("need at least one quality pair")
    difficulty = rng.uniform(0.0, 1.0, size=n)
    jitter = np.exp(rng.normal(scale=0.25, size=(n, OFFSET_DIM)))
    sigma = _QUALITY_SIGMA_SCALE[None, :] * (0.08 + difficulty[:, None]) * jitter + 1e-4
    true_iou = np.clip(0.95 - 0.85 * difficulty + 0.02 * rng.normal(size=n), 0.02, 0.98)
    raw = np.clip(true_iou + 0.28 * difficulty + 0.02 * rng.normal(size=n), 0.0, 1.0)
    return QualityPairs(sigma=sigma, raw=raw, true_iou=true_iou)


def train_uaqe(pairs: QualityPairs, epochs: int = 400, lr: float = 1e-2,
               rng: Optional[np.random.Generator] = None) -> UaqeHead:
    """Fit the coefficient head by mean squared error on the calibrated estimate."""
    if rng is None:
        rng = stream(0, 77)
    head = UaqeHead.create(rng)
    opt = Adam(params=head.parameters(), lr=lr)
    sigma_c = Tensor.const(pairs.sigma)
    raw_c = Tensor.const(pairs.raw.reshape(-1, 1))
    true_c = Tensor.const(pairs.true_iou.reshape(-1, 1))
    for _ in range(epochs):
        opt.zero_grad()
        est = ad.mul(raw_c, head.coefficient_graph(sigma_c))
        loss = ad.reduce_mean(ad.square(ad.sub(est, true_c)))
        loss.backward()
        opt.step()
    return head


def quality_mae(estimates: np.ndarray, true_iou: np.ndarray,
                lo: float = 0.0, hi: float = 1.0 + 1e-12) -> float:
    """Mean absolute estimation error over pairs whose true IoU is in [lo, hi)."""
    estimates = np.asarray(estimates, dtype=np.float64)
    true_iou = np.asarray(true_iou, dtype=np.float64)
    mask = (true_iou >= lo) & (true_iou < hi)
    if not np.any(mask):
        raise DomainError(f"no pairs with true IoU in [{lo}, {hi})")
    return float(np.abs(estimates[mask] - true_iou[mask]).mean())


# ---------------------------------------------------------------------------
# A small regressor for comparing loss modes
# ---------------------------------------------------------------------------

TOY_MODES = ("dirac", "glenet", "huber")
COLLAPSE_THRESHOLD = 1e-2
_LOG_SIGMA_MIN = math.log(1e-4)
_LOG_SIGMA_MAX = math.log(1e2)


def _clamp_graph(t: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp a tensor into [lo, hi] (zero gradient outside, like a hard clip)."""
    t = ad.add(Tensor.const(lo), ad.relu(ad.sub(t, Tensor.const(lo))))
    return ad.sub(Tensor.const(hi), ad.relu(ad.sub(Tensor.const(hi), t)))


@dataclass(frozen=True)
class ToyConfig:
    """Training settings for the loss-mode comparison regressor."""

    mode: str
    epochs: int = 25
    batch_size: int = 32
    peak_lr: float = 3e-3
    dir_weight: float = 0.2
    eval_folds: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.mode not in TOY_MODES:
            raise UnsupportedModeError(
                f"unknown loss mode {self.mode!r}; expected one of {TOY_MODES}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch size must be at least 1")
        if self.eval_folds < 2:
            raise ConfigError("need at least 2 folds to hold out an evaluation split")


@dataclass(frozen=True)
class RegressorOutput:
    """One prediction: offset mean, per-dim sigma (None in huber mode), heading logit."""

    mean: np.ndarray
    sigma: Optional[np.ndarray]
    dir_logit: float


@dataclass(frozen=True)
class ToyMetrics:
    """Held-out localization quality of a trained regressor."""

    mean_iou: float
    mean_iou_ambiguous: float
    collapse_fraction: Optional[float]
    n_eval: int
    history: tuple


@dataclass
class ToyRegressor:
    """Pooled point features feeding mean / sigma / heading heads.

    The backbone matches the capacity used elsewhere in the package so a
    loss-mode comparison is not confounded by architecture differences.
    The sigma head exists in every mode but stays untouched (and unreported)
    in huber mode, which trains the mean alone.
    """

    backbone: PointNet
    mean_head: Linear
    logsig_head: Linear
    dir_head: Linear
    mode: str
    anchor: Anchor

    @staticmethod
    def create(mode: str, rng: np.random.Generator, anchor: Anchor = DEFAULT_ANCHOR) -> "ToyRegressor":
        if mode not in TOY_MODES:
            raise UnsupportedModeError(
                f"unknown loss mode {mode!r}; expected one of {TOY_MODES}")
        # The sigma head starts at exactly sigma = 1 everywhere: a random
        # start can open at the clamp floor, where the quadratic term of the
        # regression loss is enormous and the clamp blocks the gradient that
        # would lift it back out.
        return ToyRegressor(
            backbone=PointNet((3, 64, 128, 512), rng, "toy_backbone"),
            mean_head=Linear(512, OFFSET_DIM, rng, "toy_mean"),
            logsig_head=Linear(512, OFFSET_DIM, rng, "toy_logsig", init_scale=0.0),
            dir_head=Linear(512, 1, rng, "toy_dir"),
            mode=mode,
            anchor=anchor,
        )

    def parameters(self) -> dict[str, Tensor]:
        return {
            **self.backbone.parameters(),
            **self.mean_head.parameters(),
            **self.logsig_head.parameters(),
            **self.dir_head.parameters(),
        }

    def forward(self, clouds: np.ndarray) -> tuple[Tensor, Tensor, Tensor]:
        """(mean, clamped log sigma, dir logit) tensors for a (B, 512, 3) batch."""
        clouds = np.asarray(clouds, dtype=np.float64)
        b = clouds.shape[0]
        flat = Tensor.const(clouds.reshape(b * N_POINTS, 3))
        feat = self.backbone(flat, b, N_POINTS)
        mean = self.mean_head(feat)
        logsig = _clamp_graph(self.logsig_head(feat), _LOG_SIGMA_MIN, _LOG_SIGMA_MAX)
        return mean, logsig, self.dir_head(feat)

    def predict(self, cloud: np.ndarray) -> RegressorOutput:
        """Prediction for one preprocessed cloud; sigma is None in huber mode."""
        mean, logsig, logit = self.forward(np.asarray(cloud)[None, :, :])
        sigma = None if self.mode == "huber" else np.exp(logsig.data[0])
        return RegressorOutput(mean=mean.data[0].copy(), sigma=sigma,
                               dir_logit=float(logit.data[0, 0]))

    def predicted_box(self, cloud: np.ndarray) -> tuple[OrientedBox, Optional[np.ndarray]]:
        """Decode the mean prediction into a box in the cloud's local frame."""
        out = self.predict(cloud)
        t = out.mean.copy()
        t[6] = min(max(t[6], -1.0), 1.0)
        enc = BoxEncoding.from_offsets(t, dir_bit=1 if out.dir_logit > 0.0 else 0)
        return decode_box(enc, self.anchor), out.sigma


def _prepared_arrays(dataset: Sequence[ObjectSample], anchor: Anchor, seed: int):
    """Deterministic per-object tensors: cloud, target offsets, dir bit, local box."""
    clouds = np.empty((len(dataset), N_POINTS, 3))
    targets = np.empty((len(dataset), OFFSET_DIM))
    dir_bits = np.empty(len(dataset))
    local_boxes: list[OrientedBox] = []
    for i, s in enumerate(dataset):
        cloud, centroid = preprocess(s.points, stream(seed, 50, i))
        offsets, dir_bit, _ = encoded_target(s.box, anchor, centroid)
        clouds[i] = cloud
        targets[i] = offsets
        dir_bits[i] = dir_bit
        local_boxes.append(OrientedBox(
            s.box.cx - centroid[0], s.box.cy - centroid[1], s.box.cz - centroid[2],
            s.box.w, s.box.l, s.box.h, s.box.r,
        ))
    return clouds, targets, dir_bits, local_boxes


def _is_ambiguous(s: ObjectSample) -> bool:
    """Objects whose annotations carry real ambiguity: occluded or family members."""
    return s.family >= 0 or s.occlusion_fraction >= 0.5


def train_toy_regressor(
    dataset: Sequence[ObjectSample],
    config: ToyConfig,
    uncertainties: Optional[Sequence[LabelUncertainty]] = None,
    anchor: Anchor = DEFAULT_ANCHOR,
) -> tuple[ToyRegressor, ToyMetrics]:
    """Train one regressor under the configured loss mode; report held-out IoU.

    ``glenet`` mode requires one uncertainty per object and penalizes the
    predicted sigma against the label's sigma; ``dirac`` treats every label
    as exact (zero sigma); ``huber`` trains the mean alone.  A family-aware
    fold of the dataset is held out for the IoU and sigma-collapse metrics.
    """
    if config.mode == "glenet":
        if uncertainties is None or len(uncertainties) != len(dataset):
            raise ConfigError("glenet mode needs one label uncertainty per object")
        label_sigma_all = np.sqrt(np.stack([u.variance for u in uncertainties]))
    else:
        label_sigma_all = np.zeros((len(dataset), OFFSET_DIM))

    fold_of = kfold_partition(dataset, config.eval_folds, stream(config.seed, 40))
    eval_idx = [i for i, f in enumerate(fold_of) if f == 0]
    train_idx = [i for i, f in enumerate(fold_of) if f != 0]
    if not eval_idx or not train_idx:
        raise ConfigError("both the training and evaluation split must be non-empty")

    clouds, targets, dir_bits, local_boxes = _prepared_arrays(dataset, anchor, config.seed)
    model = ToyRegressor.create(config.mode, stream(config.seed, 41), anchor)

    order_rng = stream(config.seed, 42)
    n_train = len(train_idx)
    steps_per_epoch = max(1, math.ceil(n_train / config.batch_size))
    schedule = OneCycleSchedule(peak_lr=config.peak_lr,
                                total_steps=max(2, config.epochs * steps_per_epoch))
    opt = Adam(params=model.parameters(), lr=config.peak_lr, schedule=schedule)

    history = []
    for epoch in range(1, config.epochs + 1):
        perm = np.array(train_idx)[order_rng.permutation(n_train)]
        epoch_loss = 0.0
        for start in range(0, n_train, config.batch_size):
            batch = perm[start:start + config.batch_size]
            mean_t, logsig_t, logit_t = model.forward(clouds[batch])
            if config.mode == "huber":
                err = ad.sub(mean_t, Tensor.const(targets[batch]))
                reg = ad.reduce_mean(ad.reduce_sum(ad.huber(err, delta=1.0), axis=1))
            else:
                sigma_t = ad.exp(logsig_t)
                terms = kl_reg_terms_graph(mean_t, sigma_t, targets[batch],
                                           label_sigma_all[batch])
                reg = ad.reduce_mean(ad.reduce_sum(terms, axis=1))
            dir_loss = ad.bce_logits(logit_t, dir_bits[batch].reshape(-1, 1))
            loss = ad.add(reg, ad.mul(dir_loss, Tensor.const(config.dir_weight)))
            opt.zero_grad()
            loss.backward()
            lr = opt.step()
            epoch_loss += loss.item() * len(batch)
        history.append({"epoch": epoch, "loss": epoch_loss / n_train, "lr": lr})

    ious = []
    ious_ambiguous = []
    collapsed = 0
    sigma_dims = 0
    for i in eval_idx:
        box, sigma = model.predicted_box(clouds[i])
        iou = iou_3d(box, local_boxes[i])
        ious.append(iou)
        if _is_ambiguous(dataset[i]):
            ious_ambiguous.append(iou)
        if sigma is not None:
            collapsed += int(np.count_nonzero(sigma < COLLAPSE_THRESHOLD))
            sigma_dims += sigma.size
    metrics = ToyMetrics(
        mean_iou=float(np.mean(ious)),
        mean_iou_ambiguous=float(np.mean(ious_ambiguous)) if ious_ambiguous else float("nan"),
        collapse_fraction=None if sigma_dims == 0 else collapsed / sigma_dims,
        n_eval=len(eval_idx),
        history=tuple(history),
    )
    return model, metrics
