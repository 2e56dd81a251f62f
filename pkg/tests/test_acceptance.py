"""Headline numerical claims of the package, one test per claim.

Every test asserts its claim at the stated tolerance. The lightweight claims
(closed forms, oracle agreement) run standalone; the learning claims consume
the session-scoped trained fixtures from ``conftest`` and assert the
wall-clock budget those fixtures recorded while being built.
"""

import math
import time

import numpy as np
from numpy.testing import assert_allclose
from scipy import stats as sps

from glenet import autodiff as ad
from glenet.autodiff import Tensor
from glenet.geom import OrientedBox, iou_bev, wrap_angle
from glenet.model import GLENetModel, eval_nll, infer_uncertainty, nll_terms
from glenet.postproc import Detection, VotingConfig, variance_voting_scored
from glenet.probdet import (
    GaussianBox,
    LabelDistribution,
    kl_reg_grad,
    kl_reg_loss,
    kl_reg_terms,
    kl_reg_terms_graph,
    make_quality_pairs,
    quality_mae,
    train_uaqe,
    uaqe_apply,
)
from glenet.rng import stream

from conftest import TOY_SEEDS
from oracles import fd_gradient, mc_iou_bev, random_scalar_graph, vote_oracle


def _random_optimum(rng):
    """A matched (prediction, label) pair sitting exactly at the loss minimum."""
    mean = rng.normal(size=7)
    sigma = np.exp(rng.normal(size=7) * 0.5)
    return GaussianBox(mean=mean.copy(), sigma=sigma.copy()), LabelDistribution(
        mean=mean, sigma=sigma)


class TestRegressionLossClaims:
    def test_loss_minimum_is_half_per_dimension(self):
        """At sigma_hat = sigma and a perfect mean the loss is 0.5 per dim."""
        rng = stream(0, 1)
        for _ in range(25):
            pred, label = _random_optimum(rng)
            assert_allclose(kl_reg_terms(pred, label), np.full(7, 0.5),
                            rtol=0, atol=1e-12)
            assert abs(kl_reg_loss(pred, label) - 3.5) < 1e-12

    def test_gradients_vanish_at_the_loss_minimum(self):
        """Closed-form and backprop gradients are both zero at the optimum."""
        rng = stream(0, 2)
        for _ in range(25):
            pred, label = _random_optimum(rng)
            d_mean, d_sigma = kl_reg_grad(pred, label)
            assert_allclose(d_mean, np.zeros(7), rtol=0, atol=1e-10)
            assert_allclose(d_sigma, np.zeros(7), rtol=0, atol=1e-10)
            m = Tensor.param(pred.mean.copy())
            s = Tensor.param(pred.sigma.copy())
            ad.reduce_sum(kl_reg_terms_graph(m, s, label.mean, label.sigma)).backward()
            assert_allclose(m.grad, np.zeros(7), rtol=0, atol=1e-10)
            assert_allclose(s.grad, np.zeros(7), rtol=0, atol=1e-10)

    def test_exact_label_sigma_gradient_is_inverse_sigma(self):
        """With a zero-variance label and zero error, d/d sigma_hat = 1/sigma_hat."""
        mean = np.arange(7, dtype=np.float64)
        for sigma_hat, want in ((1e-1, 10.0), (1e-2, 100.0), (1e-3, 1000.0)):
            pred = GaussianBox(mean=mean.copy(), sigma=np.full(7, sigma_hat))
            label = LabelDistribution.point_mass(mean.copy())
            _, d_sigma = kl_reg_grad(pred, label)
            assert_allclose(d_sigma, np.full(7, want), rtol=0, atol=1e-9)


class TestAutodiffIntegrity:
    def test_fifty_random_graphs_match_finite_differences(self):
        """Backprop agrees with central differences across layer/loss mixes."""
        t0 = time.perf_counter()
        rng = np.random.default_rng(4)
        worst = 0.0
        for _ in range(50):
            theta0, f, grad = random_scalar_graph(rng)
            g_ad = grad(theta0)
            g_fd = fd_gradient(f, theta0)
            denom = max(float(np.linalg.norm(g_fd)), 1e-12)
            worst = max(worst, float(np.linalg.norm(g_ad - g_fd)) / denom)
        wall = time.perf_counter() - t0
        assert worst < 1e-4, f"worst relative gradient error {worst:.2e}"
        assert wall < 30.0, f"finite-difference sweep took {wall:.1f}s"


def _random_box(rng, spread=3.0):
    return OrientedBox(
        cx=rng.uniform(-spread, spread),
        cy=rng.uniform(-spread, spread),
        cz=rng.uniform(-1.0, 1.0),
        w=rng.uniform(0.5, 3.0),
        l=rng.uniform(0.5, 5.0),
        h=rng.uniform(0.5, 2.5),
        r=rng.uniform(-math.pi, math.pi),
    )


class TestGeometryOracle:
    def test_rotated_overlap_matches_monte_carlo(self):
        """Exact footprint overlap stays within 0.01 of a 1e6-sample estimate."""
        t0 = time.perf_counter()
        rng = np.random.default_rng(5)
        worst = 0.0
        for i in range(200):
            a = _random_box(rng)
            b = _random_box(rng)
            exact = iou_bev(a, b)
            est = mc_iou_bev(a, b, 1_000_000, stream(0, 5, i))
            worst = max(worst, abs(exact - est))
        wall = time.perf_counter() - t0
        assert worst < 0.01, f"worst |exact - monte carlo| = {worst:.4f}"
        assert wall < 120.0, f"oracle sweep took {wall:.1f}s"


def _square(cx, cy=0.0, yaw=0.0, side=2.0):
    return OrientedBox(cx, cy, 0.0, side, side, 1.5, yaw)


def _run_fixture(dets, cfg):
    """Implementation vs. the explicit-loop oracle, to 1e-9."""
    got = variance_voting_scored(dets, cfg)
    want_boxes, want_scores = vote_oracle(
        [d.box for d in dets], [d.score for d in dets],
        [d.variance for d in dets], cfg.sigma_t, cfg.mu, iou_bev)
    assert len(got) == len(want_boxes)
    for (box, score), want, want_score in zip(got, want_boxes, want_scores):
        assert_allclose(box.as_array(), want, rtol=0, atol=1e-9)
        assert score == want_score
    return got


class TestVotingOracle:
    def test_hand_fixtures_match_direct_formula(self):
        """All small fixtures agree with an independently coded vote, 1e-9."""
        cfg = VotingConfig(use_3d_iou=False)
        # A single detection and an isolated pair pass through unchanged.
        _run_fixture([Detection(_square(0.0), 0.7, 0.5)], cfg)
        _run_fixture([Detection(_square(0.0), 0.7, 0.5),
                      Detection(_square(30.0), 0.4, 2.0)], cfg)
        # A worked two-box merge with unequal vector variances.
        _run_fixture([
            Detection(_square(0.0), 0.9, np.full(7, 0.2)),
            Detection(_square(0.6), 0.5, np.linspace(0.1, 1.3, 7)),
        ], cfg)
        # Five boxes in two clusters with mixed scalar/vector variances.
        _run_fixture([
            Detection(_square(0.0), 0.6, 1.0),
            Detection(_square(0.5), 0.9, np.full(7, 0.3)),
            Detection(_square(-0.4), 0.2, 0.7),
            Detection(_square(25.0), 0.8, 0.4),
            Detection(_square(25.3), 0.3, np.full(7, 1.1)),
        ], cfg)

    def test_angle_gate_excludes_perpendicular_yaw(self):
        """A near-perpendicular neighbor votes on position but not on yaw."""
        cfg = VotingConfig(use_3d_iou=False)
        seed = Detection(_square(0.0, yaw=0.0), 0.9, 1.0)
        crossed = Detection(_square(0.4, yaw=math.pi / 2 + 0.05), 0.5, 1e-6)
        (box, _), = _run_fixture([seed, crossed], cfg)
        # The tiny-variance neighbor dominates every ungated dimension, yet
        # the merged yaw stays where the seed put it.
        assert abs(wrap_angle(box.r)) < 1e-9
        assert abs(box.cx - 0.4) < 1e-3

    def test_equal_variance_wide_kernel_reduces_to_cluster_mean(self):
        """Equal variances with sigma_t -> infinity average the cluster."""
        cfg = VotingConfig(sigma_t=1e12, mu=0.1, use_3d_iou=False)
        dets = [
            Detection(_square(0.0, side=2.0), 0.9, 0.6),
            Detection(_square(0.5, side=2.2), 0.5, 0.6),
            Detection(_square(-0.4, side=1.9), 0.4, 0.6),
        ]
        (box, _), = _run_fixture(dets, cfg)
        want = np.mean([d.box.as_array() for d in dets], axis=0)
        assert_allclose(box.as_array(), want, rtol=0, atol=1e-9)


class TestLearnedUncertainty:
    def test_predicted_variance_tracks_occlusion(self, corpus, occlusion,
                                                 kfold_annotation):
        """Total predicted variance ranks objects by how much was hidden."""
        total = kfold_annotation["total"]
        rho = sps.spearmanr(total, occlusion).statistic
        assert rho > 0.5, f"spearman(total variance, occlusion) = {rho:.3f}"
        med_occluded = float(np.median(total[occlusion > 0.7]))
        med_complete = float(np.median(total[occlusion == 0.0]))
        assert med_occluded > med_complete, (
            f"median variance {med_occluded:.4f} (occluded) vs "
            f"{med_complete:.4f} (complete)")
        assert kfold_annotation["wall"] < 600.0, (
            f"annotation pass took {kfold_annotation['wall']:.0f}s")

    def test_likelihood_fixture_and_checkpoint_trend(self, smoke_run):
        """Closed-form likelihood fixture plus falling held-out likelihood."""
        val, clamped = nll_terms(np.zeros(7), np.zeros((4, 7)), np.ones(7))
        assert clamped == 0
        assert abs(val - 3.5 * math.log(2.0 * math.pi)) < 1e-9
        nlls = []
        for k, path in enumerate(smoke_run["checkpoints"][:5]):
            model = GLENetModel.load(path)
            v, _ = eval_nll(model, smoke_run["clouds"], smoke_run["targets"],
                            30, stream(0, 801, k))
            nlls.append(v)
        assert len(nlls) == 5
        assert all(b < a for a, b in zip(nlls, nlls[1:])), (
            f"held-out likelihood not strictly decreasing: {np.round(nlls, 4)}")

    def test_uncertainty_aware_training_beats_exact_labels(self, toy_runs,
                                                           kfold_annotation):
        """Variance-aware labels match or beat exact labels on held-out IoU,
        while exact labels collapse far more predicted sigmas."""
        metrics = toy_runs["metrics"]
        iou_soft = float(np.mean([metrics[("glenet", s)].mean_iou for s in TOY_SEEDS]))
        iou_hard = float(np.mean([metrics[("dirac", s)].mean_iou for s in TOY_SEEDS]))
        assert iou_soft >= iou_hard, (
            f"held-out IoU {iou_soft:.4f} (variance-aware) vs {iou_hard:.4f} (exact)")
        col_soft = float(np.mean([metrics[("glenet", s)].collapse_fraction
                                  for s in TOY_SEEDS]))
        col_hard = float(np.mean([metrics[("dirac", s)].collapse_fraction
                                  for s in TOY_SEEDS]))
        assert col_hard > col_soft, (
            f"collapse fraction {col_hard:.4f} (exact) vs {col_soft:.4f} "
            f"(variance-aware)")
        wall = toy_runs["wall"] + kfold_annotation["wall"]
        assert wall < 900.0, f"comparison consumed {wall:.0f}s of training"


class TestQualityEstimation:
    def test_variance_aware_estimate_beats_blind_baseline(self):
        """The calibrated estimate wins on every mid-quality bin."""
        pairs = make_quality_pairs(4000, stream(0, 901))
        half = len(pairs.raw) // 2
        import dataclasses

        train_half = dataclasses.replace(
            pairs, sigma=pairs.sigma[:half], raw=pairs.raw[:half],
            true_iou=pairs.true_iou[:half])
        head = train_uaqe(train_half)
        sigma, raw, true = pairs.sigma[half:], pairs.raw[half:], pairs.true_iou[half:]
        est = np.array([uaqe_apply(head, s, r) for s, r in zip(sigma, raw)])
        for lo in (0.1, 0.2, 0.3, 0.4, 0.5):
            hi = lo + 0.1
            mae_aware = quality_mae(est, true, lo, hi)
            mae_blind = quality_mae(raw, true, lo, hi)
            assert mae_aware < mae_blind, (
                f"bin [{lo:.1f},{hi:.1f}): {mae_aware:.4f} vs blind {mae_blind:.4f}")


class TestSamplingStability:
    def test_variance_estimates_stabilize_with_more_samples(self, smoke_run):
        """Repeated 30-sample estimates agree; spread shrinks along the sweep."""
        model = smoke_run["model"]
        clouds = smoke_run["clouds"][:24]
        sweep = (4, 8, 16, 30, 64)
        repeats = 10
        median_rel = {}
        for s in sweep:
            rel = []
            for i, cloud in enumerate(clouds):
                totals = np.array([
                    infer_uncertainty(model, cloud, s, stream(0, 950, s, i, r))[0].total()
                    for r in range(repeats)
                ])
                rel.append(totals.std(ddof=1) / totals.mean())
            median_rel[s] = float(np.median(rel))
        assert median_rel[30] < 0.20, (
            f"relative spread at 30 samples = {median_rel[30]:.3f}")
        pairs = list(zip(sweep, sweep[1:]))
        assert all(median_rel[a] > median_rel[b] for a, b in pairs), (
            f"spread not strictly shrinking: "
            f"{ {s: round(v, 4) for s, v in median_rel.items()} }")
