"""The generative label-uncertainty estimator.

Four sub-networks over 512-point clouds: a lightweight context encoder
(8-8-8, deliberately weak so the latent variable stays informative), a prior
network and a recognition network (64-128-512 point backbones; the
recognition net additionally sees the encoded annotation), and a prediction
network mapping [latent ‖ context] to box-encoding offsets plus a direction
logit. Training maximizes an ELBO: Huber + direction reconstruction against
the annotation, and a KL term pulling prior and recognition distributions
together, annealed in over the first half of training.

At inference the latent is sampled S times from the prior; the per-dimension
sample variance of the S decoded offset vectors is the label uncertainty.
All uncertainties live in encoded-offset space (the anchor-normalized space
the regression losses operate in), not in meters.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DegenerateInputError, DomainError, ShapeError
from .geom import Anchor, BoxEncoding, OrientedBox, decode_box, encode_box
from .nn import MLP, Adam, Linear, OneCycleSchedule, PointNet, assign_parameters, load_checkpoint, save_checkpoint
from .rng import stream
from .synth import ObjectSample, occlusion_augment, standard_augment

N_POINTS = 512
BOX_FEATURE_DIM = 8  # 7 encoded offsets + cos(yaw)
OFFSET_DIM = 7

# Fixed anchor (car-scale). A constant keeps every fold's offset space
# identical, so uncertainties from different folds are directly comparable.
DEFAULT_ANCHOR = Anchor(wa=1.75, la=4.1, ha=1.6)


@dataclass(frozen=True)
class LabelUncertainty:
    """Per-dimension variance of plausible labels, in encoded-offset space."""

    variance: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.variance, dtype=np.float64).reshape(OFFSET_DIM)
        if not np.all(np.isfinite(v)) or np.any(v < 0.0):
            raise ShapeError("label uncertainty must be finite and non-negative")
        object.__setattr__(self, "variance", v)

    def total(self) -> float:
        return float(self.variance.sum())


@dataclass(frozen=True)
class TrainConfig:
    latent_dim: int = 8
    samples: int = 30
    folds: int = 10
    gamma: float = 1.0
    dir_weight: float = 0.2
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    peak_lr: float = 3e-3
    warmup_frac: float = 0.3
    kl_anneal_frac: float = 0.5
    exact_kl: bool = False
    augment: bool = True
    occlusion_prob: float = 0.5

    def __post_init__(self):
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be >= 1")
        if self.samples < 1:
            raise ConfigError("samples must be >= 1")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")


class GLENetModel:
    """Context encoder + prior/recognition nets + prediction net."""

    def __init__(self, anchor: Anchor = DEFAULT_ANCHOR, latent_dim: int = 8,
                 rng: Optional[np.random.Generator] = None):
        if latent_dim < 1:
            raise ConfigError("latent_dim must be >= 1")
        rng = rng if rng is not None else stream(0, 31)
        self.anchor = anchor
        self.latent_dim = latent_dim
        # Distribution heads start at exactly (mu 0, sigma 1): the KL term
        # then opens at its identity value instead of an arbitrary spike that
        # would swamp the optimizer's moment estimates on the first steps.
        self.context = PointNet([3, 8, 8, 8], rng, "context")
        self.prior_backbone = PointNet([3, 64, 128, 512], rng, "prior")
        self.prior_mu = Linear(512, latent_dim, rng, "prior.mu", init_scale=0.0)
        self.prior_logsig = Linear(512, latent_dim, rng, "prior.logsig", init_scale=0.0)
        self.recog_backbone = PointNet([3, 64, 128, 512], rng, "recog")
        self.recog_mu = Linear(512 + BOX_FEATURE_DIM, latent_dim, rng, "recog.mu", init_scale=0.0)
        self.recog_logsig = Linear(512 + BOX_FEATURE_DIM, latent_dim, rng, "recog.logsig", init_scale=0.0)
        self.pred_trunk = MLP([latent_dim + 8, 64, 64], rng, "pred.trunk")
        self.pred_offsets = Linear(64, OFFSET_DIM, rng, "pred.offsets")
        self.pred_dir = Linear(64, 1, rng, "pred.dir")

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for part in (
            self.context,
            self.prior_backbone,
            self.prior_mu,
            self.prior_logsig,
            self.recog_backbone,
            self.recog_mu,
            self.recog_logsig,
            self.pred_trunk,
            self.pred_offsets,
            self.pred_dir,
        ):
            out.update(part.parameters())
        return out

    # -- forward pieces ------------------------------------------------------

    def _flat(self, clouds: np.ndarray) -> tuple[Tensor, int]:
        clouds = np.asarray(clouds, dtype=np.float64)
        if clouds.ndim == 2:
            clouds = clouds[None]
        if clouds.shape[1:] != (N_POINTS, 3):
            raise ShapeError(f"expected (B, {N_POINTS}, 3) clouds, got {clouds.shape}")
        b = clouds.shape[0]
        return Tensor.const(clouds.reshape(b * N_POINTS, 3)), b

    def prior_params(self, clouds: np.ndarray) -> tuple[Tensor, Tensor, Tensor]:
        """(mu_z, log sigma_z, context feature) for a batch of clouds."""
        flat, b = self._flat(clouds)
        ctx = self.context(flat, b, N_POINTS)
        feat = self.prior_backbone(flat, b, N_POINTS)
        return self.prior_mu(feat), self.prior_logsig(feat), ctx

    def posterior_params(self, clouds: np.ndarray, box_feats: np.ndarray) -> tuple[Tensor, Tensor]:
        """(mu'_z, log sigma'_z) given clouds plus encoded annotations."""
        box_feats = np.asarray(box_feats, dtype=np.float64)
        flat, b = self._flat(clouds)
        if box_feats.shape != (b, BOX_FEATURE_DIM):
            raise ShapeError(f"expected ({b}, {BOX_FEATURE_DIM}) box features, got {box_feats.shape}")
        feat = self.recog_backbone(flat, b, N_POINTS)
        fused = ad.concat([feat, Tensor.const(box_feats)], axis=1)
        return self.recog_mu(fused), self.recog_logsig(fused)

    def predict(self, z: Tensor, ctx: Tensor) -> tuple[Tensor, Tensor]:
        """Offsets (B, 7) and direction logit (B, 1) from latent + context."""
        h = ad.relu(self.pred_trunk(ad.concat([z, ctx], axis=1)))
        return self.pred_offsets(h), self.pred_dir(h)

    # -- persistence ----------------------------------------------------------

    def save(self, path: str, extra_meta: Optional[dict] = None) -> None:
        meta = {
            "latent_dim": self.latent_dim,
            "anchor": [self.anchor.wa, self.anchor.la, self.anchor.ha],
        }
        if extra_meta:
            meta.update(extra_meta)
        save_checkpoint(path, self.parameters(), meta)

    @classmethod
    def load(cls, path: str) -> "GLENetModel":
        values, meta = load_checkpoint(path)
        anchor = Anchor(*meta["anchor"])
        model = cls(anchor=anchor, latent_dim=int(meta["latent_dim"]))
        assign_parameters(model.parameters(), values)
        return model


# ---------------------------------------------------------------------------
# Preprocessing and target encoding
# ---------------------------------------------------------------------------


def preprocess(points: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Resample to exactly 512 points and center them on their centroid.

    More than 512 points: a uniform draw without replacement. Fewer: all
    originals plus a with-replacement fill. Returns (cloud, centroid) with
    ``cloud.mean(axis=0)`` exactly zero (up to rounding) and ``centroid`` the
    offset that was removed, so labels can be moved into the same frame.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    if n == 0:
        raise DegenerateInputError("cannot preprocess an empty point cloud")
    if n > N_POINTS:
        idx = rng.choice(n, size=N_POINTS, replace=False)
    elif n < N_POINTS:
        idx = np.concatenate([np.arange(n), rng.choice(n, size=N_POINTS - n, replace=True)])
    else:
        idx = np.arange(n)
    cloud = pts[idx]
    centroid = cloud.mean(axis=0)
    return cloud - centroid, centroid


def encoded_target(box: OrientedBox, anchor: Anchor, centroid: np.ndarray):
    """(offsets, dir_bit, cos yaw) of an annotation in the cloud's local frame."""
    centroid = np.asarray(centroid, dtype=np.float64).reshape(3)
    local = OrientedBox(
        box.cx - centroid[0], box.cy - centroid[1], box.cz - centroid[2],
        box.w, box.l, box.h, box.r,
    )
    enc = encode_box(local, anchor)
    return enc.offsets(), enc.dir_bit, math.cos(box.r)


def box_feature(offsets: np.ndarray, cos_r: float) -> np.ndarray:
    """Recognition-net annotation input: the 7 offsets plus cos(yaw)."""
    return np.concatenate([np.asarray(offsets, dtype=np.float64).reshape(7), [cos_r]])


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def kl_terms(mu_p, sigma_p, mu_q, sigma_q, exact: bool = False) -> np.ndarray:
    """Per-dimension KL penalty pulling the recognition posterior (q) to the prior (p).

    The default is
    ``log(sigma_p / sigma_q) + sigma_q^2 / (2 sigma_p^2) + (mu_q - mu_p)^2 / (2 sigma_p^2)``,
    which is 0.5 per dimension at identity; ``exact=True`` subtracts the 1/2
    so identical distributions score 0 (same gradients either way).  The
    prior sigma sits in the denominators: when one cloud supports several
    plausible annotations, the posterior means spread out and the prior's
    optimum widens to cover them — the mechanism that turns annotation
    ambiguity into predicted variance.
    """
    mu_p, sigma_p = np.asarray(mu_p, dtype=np.float64), np.asarray(sigma_p, dtype=np.float64)
    mu_q, sigma_q = np.asarray(mu_q, dtype=np.float64), np.asarray(sigma_q, dtype=np.float64)
    if np.any(sigma_p <= 0) or np.any(sigma_q <= 0):
        raise DomainError("KL needs strictly positive sigmas")
    val = np.log(sigma_p / sigma_q) + sigma_q**2 / (2.0 * sigma_p**2) + (mu_q - mu_p) ** 2 / (
        2.0 * sigma_p**2
    )
    return val - 0.5 if exact else val


def _kl_graph(mu_p: Tensor, logsig_p: Tensor, mu_q: Tensor, logsig_q: Tensor, exact: bool) -> Tensor:
    """Batch-mean of the per-sample dimension-sum of the KL penalty."""
    diff_log = ad.sub(logsig_p, logsig_q)
    ratio_sq = ad.exp(ad.mul(ad.sub(logsig_q, logsig_p), Tensor.const(2.0)))
    mean_sq = ad.mul(ad.square(ad.sub(mu_q, mu_p)), ad.exp(ad.mul(logsig_p, Tensor.const(-2.0))))
    per_dim = ad.add(diff_log, ad.mul(ad.add(ratio_sq, mean_sq), Tensor.const(0.5)))
    if exact:
        per_dim = ad.sub(per_dim, Tensor.const(0.5))
    return ad.reduce_mean(ad.reduce_sum(per_dim, axis=1), axis=0)


def elbo_losses(
    model: GLENetModel,
    clouds: np.ndarray,
    targets: np.ndarray,
    dir_bits: np.ndarray,
    cos_r: np.ndarray,
    rng: np.random.Generator,
    dir_weight: float = 0.2,
    exact_kl: bool = False,
) -> tuple[Tensor, Tensor]:
    """(L_rec, L_KL) for a batch, with z' drawn from the recognition posterior.

    L_rec is the Huber penalty on predicted vs. target offsets (summed over
    the 7 dimensions, averaged over the batch) plus ``dir_weight`` times the
    direction cross-entropy. L_KL is the per-dimension penalty of
    :func:`kl_terms` summed over latent dimensions, averaged over the batch.
    """
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    dir_bits = np.asarray(dir_bits, dtype=np.float64).reshape(-1, 1)
    cos_r = np.asarray(cos_r, dtype=np.float64).reshape(-1)
    feats = np.column_stack([targets, cos_r])
    mu_p, logsig_p, ctx = model.prior_params(clouds)
    mu_q, logsig_q = model.posterior_params(clouds, feats)
    z = ad.sample_reparameterized(mu_q, ad.exp(logsig_q), rng)
    pred, dir_logit = model.predict(z, ctx)
    err = ad.sub(pred, Tensor.const(targets))
    rec = ad.reduce_mean(ad.reduce_sum(ad.huber(err, delta=1.0), axis=1), axis=0)
    l_rec = ad.add(rec, ad.mul(ad.bce_logits(dir_logit, dir_bits), Tensor.const(dir_weight)))
    l_kl = _kl_graph(mu_p, logsig_p, mu_q, logsig_q, exact_kl)
    return l_rec, l_kl


def anneal_weight(step: int, total_steps: int, frac: float = 0.5) -> float:
    """Linear 0 -> 1 over the first ``frac`` of training, then flat 1."""
    if total_steps <= 0:
        raise ConfigError("total_steps must be positive")
    ramp = max(1, int(round(frac * total_steps)))
    return min(1.0, step / ramp)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _prepare_sample(
    sample: ObjectSample, anchor: Anchor, rng: np.random.Generator, config: TrainConfig
):
    s = sample
    if config.augment:
        if len(s.points) >= 8 and rng.uniform() < config.occlusion_prob:
            s = occlusion_augment(s, rng)
        s = standard_augment(s, rng)
    cloud, centroid = preprocess(s.points, rng)
    offsets, dir_bit, c = encoded_target(s.box, anchor, centroid)
    return cloud, offsets, dir_bit, c


def _default_checkpoint_epochs(epochs: int) -> list[int]:
    # Geometric spacing: early checkpoints are where the metric moves fastest.
    out = []
    e = 1
    while e < epochs:
        out.append(e)
        e *= 2
    out.append(epochs)
    return out


def train(
    model: GLENetModel,
    dataset: Sequence[ObjectSample],
    config: TrainConfig,
    rng: Optional[np.random.Generator] = None,
    checkpoint_dir: Optional[str] = None,
    checkpoint_epochs: Optional[Sequence[int]] = None,
) -> list[dict]:
    """ELBO training loop; returns per-epoch loss history.

    Total loss per step is ``L_rec + gamma * anneal(t) * L_KL`` under Adam
    with a one-cycle schedule. When ``checkpoint_dir`` is given, checkpoints
    are written at geometrically spaced epochs (1, 2, 4, ... and the final
    epoch) unless ``checkpoint_epochs`` pins them explicitly.
    """
    if len(dataset) == 0:
        raise ConfigError("training needs a non-empty dataset")
    rng = rng if rng is not None else stream(config.seed, 101)
    steps_per_epoch = math.ceil(len(dataset) / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    schedule = (
        OneCycleSchedule(config.peak_lr, total_steps, warmup_frac=config.warmup_frac)
        if total_steps >= 2
        else None
    )
    opt = Adam(model.parameters(), lr=config.peak_lr, schedule=schedule)
    ckpt_at = set(checkpoint_epochs if checkpoint_epochs is not None else _default_checkpoint_epochs(config.epochs))
    history: list[dict] = []
    step = 0
    order = np.arange(len(dataset))
    for epoch in range(1, config.epochs + 1):
        rng.shuffle(order)
        rec_sum = kl_sum = 0.0
        for lo in range(0, len(dataset), config.batch_size):
            batch = [dataset[i] for i in order[lo : lo + config.batch_size]]
            prepped = [_prepare_sample(s, model.anchor, rng, config) for s in batch]
            clouds = np.stack([p[0] for p in prepped])
            targets = np.stack([p[1] for p in prepped])
            dir_bits = np.array([p[2] for p in prepped], dtype=np.float64)
            cos_r = np.array([p[3] for p in prepped])
            opt.zero_grad()
            l_rec, l_kl = elbo_losses(
                model, clouds, targets, dir_bits, cos_r, rng,
                dir_weight=config.dir_weight, exact_kl=config.exact_kl,
            )
            w = config.gamma * anneal_weight(step, total_steps, config.kl_anneal_frac)
            loss = ad.add(l_rec, ad.mul(l_kl, Tensor.const(w))) if w != 0.0 else l_rec
            loss.backward()
            opt.step()
            step += 1
            rec_sum += l_rec.item()
            kl_sum += l_kl.item()
        history.append(
            {
                "epoch": epoch,
                "l_rec": rec_sum / steps_per_epoch,
                "l_kl": kl_sum / steps_per_epoch,
                "lr": opt.current_lr(),
            }
        )
        if checkpoint_dir is not None and epoch in ckpt_at:
            path = os.path.join(checkpoint_dir, f"epoch_{epoch:04d}.ckpt")
            model.save(path, extra_meta={"epoch": epoch})
    return history


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


def _prior_numpy(model: GLENetModel, cloud: np.ndarray):
    mu, logsig, ctx = model.prior_params(cloud)
    return mu.data[0], np.exp(logsig.data[0]), ctx.data[0]


def infer_uncertainty(
    model: GLENetModel, cloud: np.ndarray, samples: int, rng: np.random.Generator
) -> tuple[LabelUncertainty, list[OrientedBox]]:
    """Sample the prior ``samples`` times; spread of the decoded offsets.

    Returns the per-dimension population variance (divisor S) of the S
    predicted offset vectors, plus the S boxes decoded in the cloud's local
    frame for inspection (predicted sines are clamped into [-1, 1] before
    decoding).
    """
    if samples < 2:
        raise ConfigError("variance needs at least 2 samples")
    mu, sigma, ctx = _prior_numpy(model, cloud)
    eps = rng.standard_normal((samples, model.latent_dim))
    z = mu[None, :] + sigma[None, :] * eps
    ctx_rep = np.broadcast_to(ctx, (samples, ctx.shape[0])).copy()
    pred, dir_logit = model.predict(Tensor.const(z), Tensor.const(ctx_rep))
    offsets = pred.data
    # Population variance (divisor S).  Shifting by the first row first is
    # mathematically a no-op but keeps identical predictions at exactly zero
    # (np.var's internal mean can round by an ulp otherwise).
    variance = (offsets - offsets[0]).var(axis=0)
    boxes = []
    for row, logit in zip(offsets, dir_logit.data[:, 0]):
        t = row.copy()
        t[6] = min(max(t[6], -1.0), 1.0)
        enc = BoxEncoding.from_offsets(t, dir_bit=1 if logit > 0.0 else 0)
        boxes.append(decode_box(enc, model.anchor))
    return LabelUncertainty(variance), boxes


def predicted_offsets(model: GLENetModel, cloud: np.ndarray, samples: int, rng: np.random.Generator) -> np.ndarray:
    """S raw offset predictions for one cloud (no decoding)."""
    mu, sigma, ctx = _prior_numpy(model, cloud)
    eps = rng.standard_normal((samples, model.latent_dim))
    z = mu[None, :] + sigma[None, :] * eps
    ctx_rep = np.broadcast_to(ctx, (samples, ctx.shape[0])).copy()
    pred, _ = model.predict(Tensor.const(z), Tensor.const(ctx_rep))
    return pred.data


def prior_sigma(model: GLENetModel, cloud: np.ndarray) -> np.ndarray:
    """The prior network's sigma_z for one preprocessed cloud."""
    _, sigma, _ = _prior_numpy(model, cloud)
    return sigma


# ---------------------------------------------------------------------------
# k-fold cross-sampling
# ---------------------------------------------------------------------------


def kfold_partition(dataset: Sequence[ObjectSample], k: int, rng: np.random.Generator) -> list[int]:
    """Fold index per object; samples sharing a family stay in one fold.

    Families share identical point clouds, so splitting one across folds
    would leak the evaluation geometry into training. Groups are dealt to
    the smallest fold in shuffled order, which keeps fold sizes balanced
    (exactly equal when every sample is a singleton).
    """
    if len(dataset) < k:
        raise ConfigError(f"dataset of {len(dataset)} objects cannot fill {k} folds")
    groups: dict = {}
    for i, s in enumerate(dataset):
        key = ("f", s.family) if s.family >= 0 else ("s", i)
        groups.setdefault(key, []).append(i)
    keys = sorted(groups)
    rng.shuffle(keys)
    # Larger groups first so the greedy balance cannot strand a huge group.
    keys.sort(key=lambda kk: -len(groups[kk]))
    sizes = [0] * k
    fold_of = [0] * len(dataset)
    for kk in keys:
        f = int(np.argmin(sizes))
        for i in groups[kk]:
            fold_of[i] = f
        sizes[f] += len(groups[kk])
    return fold_of


def kfold_uncertainty(
    dataset: Sequence[ObjectSample],
    config: TrainConfig,
    anchor: Anchor = DEFAULT_ANCHOR,
    checkpoint_dir: Optional[str] = None,
) -> tuple[list[LabelUncertainty], list[int]]:
    """Every object's uncertainty, inferred by a model that never saw it.

    Objects are partitioned into ``config.folds`` folds (family-aware); for
    each fold a fresh model trains on the complement and infers on the fold.
    Returns uncertainties aligned with the dataset order plus each object's
    fold index.
    """
    fold_of = kfold_partition(dataset, config.folds, stream(config.seed, 555))
    out: list[Optional[LabelUncertainty]] = [None] * len(dataset)
    for f in range(config.folds):
        eval_idx = [i for i, ff in enumerate(fold_of) if ff == f]
        train_idx = [i for i, ff in enumerate(fold_of) if ff != f]
        assert not set(eval_idx) & set(train_idx)
        if not eval_idx:
            continue
        model = GLENetModel(anchor=anchor, latent_dim=config.latent_dim, rng=stream(config.seed, 600 + f))
        train(model, [dataset[i] for i in train_idx], config, rng=stream(config.seed, 700 + f))
        if checkpoint_dir is not None:
            model.save(os.path.join(checkpoint_dir, f"fold_{f}.ckpt"), extra_meta={"fold": f})
        for i in eval_idx:
            cloud, _ = preprocess(dataset[i].points, stream(config.seed, 800, i))
            unc, _ = infer_uncertainty(model, cloud, config.samples, stream(config.seed, 900, i))
            out[i] = unc
    assert all(u is not None for u in out)
    return list(out), fold_of  # type: ignore[arg-type]


# ---------------------------------------------------------------------------
# Negative log-likelihood evaluation
# ---------------------------------------------------------------------------

SIGMA_FLOOR = 1e-12


def nll_terms(target: np.ndarray, preds: np.ndarray, sigma_sq: np.ndarray,
              floor: float = SIGMA_FLOOR) -> tuple[float, int]:
    """Gaussian NLL of one annotation under S predictions and a variance.

    ``sum_k [ mean_i (t_k - that_k_i)^2 / (2 s_k^2) + ln(s_k^2)/2 + ln(2 pi)/2 ]``
    with variances clamped at ``floor``; the second return value counts the
    dimensions where the clamp fired.
    """
    target = np.asarray(target, dtype=np.float64).reshape(OFFSET_DIM)
    preds = np.atleast_2d(np.asarray(preds, dtype=np.float64))
    sigma_sq = np.asarray(sigma_sq, dtype=np.float64).reshape(OFFSET_DIM)
    clamped = int(np.count_nonzero(sigma_sq < floor))
    s2 = np.maximum(sigma_sq, floor)
    dev = ((preds - target[None, :]) ** 2).mean(axis=0)
    val = float(np.sum(dev / (2.0 * s2) + 0.5 * np.log(s2) + 0.5 * math.log(2.0 * math.pi)))
    return val, clamped


def eval_nll(
    model: GLENetModel,
    clouds: Sequence[np.ndarray],
    targets: Sequence[np.ndarray],
    samples: int,
    rng: np.random.Generator,
) -> tuple[float, int]:
    """Mean NLL over objects; the variance is the model's own sample spread."""
    if samples < 2:
        raise ConfigError("NLL evaluation needs at least 2 samples")
    if len(clouds) != len(targets) or len(clouds) == 0:
        raise ConfigError("clouds and targets must be non-empty and aligned")
    total = 0.0
    flagged = 0
    for cloud, target in zip(clouds, targets):
        preds = predicted_offsets(model, cloud, samples, rng)
        val, c = nll_terms(target, preds, preds.var(axis=0))
        total += val
        flagged += c
    return total / len(clouds), flagged
