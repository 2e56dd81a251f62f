import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from glenet import autodiff as ad
from glenet.autodiff import Tensor
from glenet.errors import ConfigError, DegenerateInputError, DomainError
from glenet.geom import Anchor, OrientedBox
from glenet.model import (
    DEFAULT_ANCHOR,
    GLENetModel,
    LabelUncertainty,
    TrainConfig,
    anneal_weight,
    box_feature,
    elbo_losses,
    encoded_target,
    eval_nll,
    infer_uncertainty,
    kfold_partition,
    kl_terms,
    nll_terms,
    predicted_offsets,
    preprocess,
    train,
)
from glenet.rng import stream
from glenet.synth import ObjectSample


def tiny_model(seed=0, latent=4) -> GLENetModel:
    return GLENetModel(anchor=DEFAULT_ANCHOR, latent_dim=latent, rng=stream(seed, 1))


def make_sample(rng, n_points=60, family=-1) -> ObjectSample:
    box = OrientedBox(
        cx=rng.uniform(8, 15), cy=rng.uniform(-3, 3), cz=rng.uniform(-0.3, 0.3),
        w=rng.uniform(1.5, 2.0), l=rng.uniform(3.5, 4.5), h=rng.uniform(1.4, 1.7),
        r=rng.uniform(-math.pi, math.pi),
    )
    center = np.array([box.cx, box.cy, box.cz])
    pts = center + rng.uniform(-0.4, 0.4, size=(n_points, 3))
    return ObjectSample(points=pts, box=box, occlusion_fraction=0.0,
                        distance=float(np.hypot(box.cx, box.cy)), seed=0,
                        n_original=n_points, family=family)


class TestPreprocess:
    def test_empty_rejected(self):
        with pytest.raises(DegenerateInputError):
            preprocess(np.zeros((0, 3)), stream(0, 0))

    def test_exact_512_identity_up_to_permutation(self):
        pts = stream(1, 0).normal(size=(512, 3))
        cloud, centroid = preprocess(pts, stream(1, 1))
        assert cloud.shape == (512, 3)
        assert_allclose(cloud.mean(axis=0), 0.0, atol=1e-12)
        restored = cloud + centroid
        assert_allclose(np.sort(restored, axis=0), np.sort(pts, axis=0), atol=1e-12)

    def test_three_points_upsampled_by_repetition(self):
        pts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        cloud, centroid = preprocess(pts, stream(2, 0))
        assert cloud.shape == (512, 3)
        restored = cloud + centroid
        # Every output point is one of the three originals.
        dists = np.linalg.norm(restored[:, None, :] - pts[None, :, :], axis=2)
        assert (dists.min(axis=1) < 1e-12).all()
        # And all three originals are present.
        assert (dists.min(axis=0) < 1e-12).all()

    def test_large_cloud_sampled_without_replacement(self):
        pts = stream(3, 0).normal(size=(10_000, 3))
        cloud, centroid = preprocess(pts, stream(3, 1))
        restored = cloud + centroid
        # Unique inputs stay unique when drawn without replacement.
        assert len(np.unique(restored, axis=0)) == 512

    def test_deterministic(self):
        pts = stream(4, 0).normal(size=(100, 3))
        a, ca = preprocess(pts, stream(4, 1))
        b, cb = preprocess(pts, stream(4, 1))
        assert np.array_equal(a, b) and np.array_equal(ca, cb)


class TestTargetEncoding:
    def test_centroid_cancels_center(self):
        box = OrientedBox(5.0, -2.0, 0.5, 1.8, 4.2, 1.5, 0.3)
        offsets, dir_bit, cos_r = encoded_target(box, DEFAULT_ANCHOR, np.array([5.0, -2.0, 0.5]))
        assert_allclose(offsets[:3], 0.0, atol=1e-12)
        assert dir_bit == 1
        assert_allclose(cos_r, math.cos(0.3), atol=1e-15)

    def test_box_feature_layout(self):
        f = box_feature(np.arange(7.0), 0.25)
        assert f.shape == (8,)
        assert_allclose(f, [0, 1, 2, 3, 4, 5, 6, 0.25], atol=0)


class TestKlTerms:
    def test_identity_gives_half_per_dim(self):
        mu = np.array([0.3, -1.2, 4.0])
        sig = np.array([0.5, 1.0, 2.0])
        assert_allclose(kl_terms(mu, sig, mu, sig), 0.5, atol=1e-12)
        assert_allclose(kl_terms(mu, sig, mu, sig, exact=True), 0.0, atol=1e-12)

    def test_unit_gaussians_mean_shift(self):
        # mu=1 vs mu'=0 with unit sigmas: 0.5 (constant) + 0.5 (shift) = 1.
        val = kl_terms(np.array([1.0]), np.array([1.0]), np.array([0.0]), np.array([1.0]))
        assert_allclose(val, 1.0, atol=1e-12)

    def test_requires_positive_sigma(self):
        with pytest.raises(DomainError):
            kl_terms(np.zeros(2), np.array([1.0, 0.0]), np.zeros(2), np.ones(2))

    def test_graph_matches_numpy(self):
        rng = stream(5, 0)
        from glenet.model import _kl_graph

        for exact in (False, True):
            mu_p = rng.normal(size=(3, 4))
            mu_q = rng.normal(size=(3, 4))
            ls_p = rng.normal(size=(3, 4)) * 0.3
            ls_q = rng.normal(size=(3, 4)) * 0.3
            got = _kl_graph(
                Tensor.const(mu_p), Tensor.const(ls_p), Tensor.const(mu_q), Tensor.const(ls_q), exact
            ).item()
            want = np.mean(
                [
                    kl_terms(mu_p[i], np.exp(ls_p[i]), mu_q[i], np.exp(ls_q[i]), exact).sum()
                    for i in range(3)
                ]
            )
            assert_allclose(got, want, rtol=1e-12)


class TestAnnealWeight:
    def test_endpoints_and_monotonicity(self):
        total = 100
        assert anneal_weight(0, total) == 0.0
        assert anneal_weight(total, total) == 1.0
        vals = [anneal_weight(t, total) for t in range(total + 1)]
        assert all(b >= a for a, b in zip(vals, vals[1:]))
        # Default ramp reaches 1 at half of training.
        assert anneal_weight(50, total) == 1.0
        assert anneal_weight(49, total) < 1.0


class TestElboLosses:
    def test_perfect_reconstruction_zero_dir_weight(self):
        model = tiny_model()
        # Zero prediction heads: offsets are exactly 0 for any input.
        model.pred_offsets.W.data[:] = 0.0
        model.pred_offsets.b.data[:] = 0.0
        clouds = stream(6, 0).normal(size=(2, 512, 3))
        targets = np.zeros((2, 7))
        l_rec, l_kl = elbo_losses(
            model, clouds, targets, np.array([1.0, 0.0]), np.array([0.5, 0.5]),
            stream(6, 1), dir_weight=0.0,
        )
        assert l_rec.item() == 0.0
        assert l_kl.item() > 0.0

    def test_gamma_zero_keeps_kl_out_of_gradients(self):
        model = tiny_model()
        sample = make_sample(stream(7, 0))
        cfg = TrainConfig(latent_dim=4, epochs=1, batch_size=1, folds=2, gamma=0.0,
                          augment=False, samples=4)
        train(model, [sample], cfg, rng=stream(7, 1))
        # With the KL weight at zero the prior heads receive no updates:
        fresh = tiny_model()
        assert np.array_equal(model.prior_mu.W.data, fresh.prior_mu.W.data)
        assert np.array_equal(model.prior_logsig.W.data, fresh.prior_logsig.W.data)
        # while the reconstruction path does.
        assert not np.array_equal(model.pred_offsets.W.data, fresh.pred_offsets.W.data)


class TestInferUncertainty:
    def test_needs_two_samples(self):
        model = tiny_model()
        cloud, _ = preprocess(stream(8, 0).normal(size=(50, 3)), stream(8, 1))
        with pytest.raises(ConfigError):
            infer_uncertainty(model, cloud, samples=1, rng=stream(8, 2))

    def test_permutation_invariance(self):
        model = tiny_model()
        cloud, _ = preprocess(stream(9, 0).normal(size=(300, 3)), stream(9, 1))
        perm = stream(9, 2).permutation(512)
        u1, b1 = infer_uncertainty(model, cloud, 8, stream(9, 3))
        u2, b2 = infer_uncertainty(model, cloud[perm], 8, stream(9, 3))
        assert_allclose(u1.variance, u2.variance, atol=1e-12)
        for x, y in zip(b1, b2):
            assert_allclose(x.as_array(), y.as_array(), atol=1e-12)

    def test_collapsed_prior_gives_zero_uncertainty(self):
        model = tiny_model()
        model.prior_logsig.W.data[:] = 0.0
        model.prior_logsig.b.data[:] = -400.0  # exp underflows: sigma_z == 0
        cloud, _ = preprocess(stream(10, 0).normal(size=(50, 3)), stream(10, 1))
        unc, boxes = infer_uncertainty(model, cloud, 16, stream(10, 2))
        assert_allclose(unc.variance, 0.0, atol=0)
        first = boxes[0].as_array()
        for b in boxes[1:]:
            assert_allclose(b.as_array(), first, atol=1e-12)

    def test_variance_uses_population_divisor(self):
        model = tiny_model()
        cloud, _ = preprocess(stream(11, 0).normal(size=(80, 3)), stream(11, 1))
        unc, _ = infer_uncertainty(model, cloud, 8, stream(11, 2))
        preds = predicted_offsets(model, cloud, 8, stream(11, 2))
        assert_allclose(unc.variance, (preds - preds[0]).var(axis=0, ddof=0), atol=0)
        assert_allclose(unc.variance, preds.var(axis=0, ddof=0), rtol=1e-9, atol=1e-18)

    def test_label_uncertainty_validation(self):
        with pytest.raises(Exception):
            LabelUncertainty(np.array([1.0, -0.1, 0, 0, 0, 0, 0]))


class TestNllTerms:
    def test_seven_dim_fixture(self):
        target = np.zeros(7)
        preds = np.zeros((1, 7))
        val, flagged = nll_terms(target, preds, np.ones(7))
        assert_allclose(val, 3.5 * math.log(2.0 * math.pi), atol=1e-12)
        assert flagged == 0

    def test_variance_scaling_shifts_by_log(self):
        target = np.zeros(7)
        preds = np.zeros((3, 7))
        base, _ = nll_terms(target, preds, np.ones(7))
        scaled, _ = nll_terms(target, preds, np.full(7, 4.0))
        assert_allclose(scaled - base, 3.5 * math.log(4.0), atol=1e-12)

    def test_zero_variance_clamped_and_flagged(self):
        target = np.zeros(7)
        preds = np.ones((2, 7))
        val, flagged = nll_terms(target, preds, np.zeros(7))
        assert np.isfinite(val)
        assert flagged == 7
        # Deviation term uses the floor: 1 / (2e-12) per dimension dominates.
        assert val > 1e11


class TestKfoldPartition:
    def _singles(self, n):
        rng = stream(12, 0)
        return [make_sample(rng) for _ in range(n)]

    def test_balanced_partition(self):
        ds = self._singles(10)
        folds = kfold_partition(ds, 2, stream(12, 1))
        assert sorted(np.bincount(folds)) == [5, 5]

    def test_every_object_exactly_once(self):
        ds = self._singles(23)
        folds = kfold_partition(ds, 5, stream(12, 2))
        assert len(folds) == 23
        assert set(folds) == set(range(5))

    def test_families_stay_together(self):
        rng = stream(12, 3)
        ds = [make_sample(rng, family=i // 3) for i in range(12)]
        folds = kfold_partition(ds, 4, stream(12, 4))
        for fam in range(4):
            fold_ids = {folds[i] for i in range(12) if ds[i].family == fam}
            assert len(fold_ids) == 1

    def test_dataset_smaller_than_k(self):
        ds = self._singles(3)
        with pytest.raises(ConfigError):
            kfold_partition(ds, 4, stream(12, 5))

    def test_deterministic(self):
        ds = self._singles(17)
        a = kfold_partition(ds, 4, stream(12, 6))
        b = kfold_partition(ds, 4, stream(12, 6))
        assert a == b


class TestTraining:
    def test_history_schedule_and_checkpoints(self, tmp_path):
        rng = stream(13, 0)
        ds = [make_sample(rng) for _ in range(6)]
        model = tiny_model(seed=13)
        cfg = TrainConfig(latent_dim=4, epochs=3, batch_size=3, folds=2, samples=4,
                          augment=False)
        hist = train(model, ds, cfg, rng=stream(13, 1), checkpoint_dir=str(tmp_path))
        assert [h["epoch"] for h in hist] == [1, 2, 3]
        assert all(np.isfinite(h["l_rec"]) and np.isfinite(h["l_kl"]) for h in hist)
        # Geometric checkpoints: epochs 1, 2, and the final 3.
        names = sorted(p.name for p in tmp_path.iterdir())
        assert names == ["epoch_0001.ckpt", "epoch_0002.ckpt", "epoch_0003.ckpt"]

    def test_empty_dataset_rejected(self):
        with pytest.raises(ConfigError):
            train(tiny_model(), [], TrainConfig(latent_dim=4, folds=2))

    def test_single_object_overfit(self):
        """Reconstruction collapses to ~zero when memorizing one object."""
        sample = make_sample(stream(14, 0), n_points=120)
        model = GLENetModel(anchor=DEFAULT_ANCHOR, latent_dim=8, rng=stream(14, 1))
        cfg = TrainConfig(epochs=2000, batch_size=1, folds=2, samples=4,
                          augment=False, seed=14)
        hist = train(model, [sample], cfg, rng=stream(14, 2))
        assert hist[-1]["l_rec"] < 1e-3

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(latent_dim=0)
        with pytest.raises(ConfigError):
            TrainConfig(samples=0)
        with pytest.raises(ConfigError):
            TrainConfig(folds=1)
        with pytest.raises(ConfigError):
            TrainConfig(gamma=-0.1)


class TestPersistence:
    def test_save_load_bitwise_inference(self, tmp_path):
        model = tiny_model(seed=15)
        path = str(tmp_path / "m.ckpt")
        model.save(path, extra_meta={"epoch": 7})
        clone = GLENetModel.load(path)
        assert clone.latent_dim == model.latent_dim
        assert clone.anchor == model.anchor
        cloud, _ = preprocess(stream(15, 0).normal(size=(90, 3)), stream(15, 1))
        a = predicted_offsets(model, cloud, 5, stream(15, 2))
        b = predicted_offsets(clone, cloud, 5, stream(15, 2))
        assert np.array_equal(a, b)


class TestEvalNll:
    def test_requires_samples_and_alignment(self):
        model = tiny_model()
        cloud, _ = preprocess(stream(16, 0).normal(size=(50, 3)), stream(16, 1))
        with pytest.raises(ConfigError):
            eval_nll(model, [cloud], [np.zeros(7)], samples=1, rng=stream(16, 2))
        with pytest.raises(ConfigError):
            eval_nll(model, [cloud], [], samples=4, rng=stream(16, 3))

    def test_matches_per_object_terms(self):
        model = tiny_model()
        clouds = []
        targets = []
        for i in range(3):
            cloud, _ = preprocess(stream(17, i).normal(size=(60, 3)), stream(17, 10 + i))
            clouds.append(cloud)
            targets.append(stream(17, 20 + i).normal(size=7) * 0.1)
        got, _ = eval_nll(model, clouds, targets, samples=6, rng=stream(17, 30))
        vals = []
        rng = stream(17, 30)
        for cloud, target in zip(clouds, targets):
            preds = predicted_offsets(model, cloud, 6, rng)
            v, _ = nll_terms(target, preds, preds.var(axis=0))
            vals.append(v)
        assert_allclose(got, np.mean(vals), rtol=1e-12)
