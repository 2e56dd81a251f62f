import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from glenet import autodiff as ad
from glenet.autodiff import Tensor
from glenet.errors import ConfigError, DataError, ShapeError
from glenet.nn import (
    MLP,
    Adam,
    Linear,
    OneCycleSchedule,
    PointNet,
    assign_parameters,
    kaiming_uniform,
    load_checkpoint,
    save_checkpoint,
)
from glenet.rng import stream


class TestInitAndLayers:
    def test_kaiming_bounds_and_spread(self):
        rng = stream(0, 1)
        w = kaiming_uniform(rng, fan_in=128, fan_out=64)
        bound = math.sqrt(6.0 / 128)
        assert w.shape == (128, 64)
        assert np.abs(w).max() <= bound
        # Uniform on [-b, b] has std b/sqrt(3).
        assert_allclose(w.std(), bound / math.sqrt(3.0), rtol=0.1)

    def test_linear_shapes_and_zero_bias(self):
        layer = Linear(5, 3, stream(0, 2), "fc")
        assert_allclose(layer.b.data, np.zeros(3), atol=0)
        out = layer(Tensor.const(np.ones((4, 5))))
        assert out.shape == (4, 3)
        assert set(layer.parameters()) == {"fc.W", "fc.b"}

    def test_mlp_structure(self):
        mlp = MLP([4, 8, 2], stream(0, 3), "head")
        out = mlp(Tensor.const(np.zeros((3, 4))))
        assert out.shape == (3, 2)
        with pytest.raises(ConfigError):
            MLP([4], stream(0, 4), "bad")

    def test_pointnet_permutation_invariance(self):
        """Max-pooled features must ignore point order within each sample."""
        rng = stream(0, 5)
        net = PointNet([3, 16, 32], rng, "enc")
        pts = rng.normal(size=(2 * 50, 3))
        feat = net(Tensor.const(pts), batch=2, n_points=50).data
        shuffled = pts.reshape(2, 50, 3).copy()
        perm = rng.permutation(50)
        shuffled = shuffled[:, perm, :].reshape(2 * 50, 3)
        feat2 = net(Tensor.const(shuffled), batch=2, n_points=50).data
        assert_allclose(feat, feat2, atol=0)

    def test_pointnet_gradients_reach_every_layer(self):
        rng = stream(0, 6)
        net = PointNet([3, 8, 8], rng, "enc")
        loss = ad.reduce_sum(net(Tensor.const(rng.normal(size=(30, 3))), 1, 30))
        loss.backward()
        for name, p in net.parameters().items():
            assert p.grad is not None, name


class TestOneCycleSchedule:
    def test_endpoints(self):
        sched = OneCycleSchedule(peak_lr=0.003, total_steps=1000)
        assert_allclose(sched.lr_at(0), 0.003 / 25.0, rtol=1e-12)
        warm = int(round(0.3 * 999))
        assert_allclose(sched.lr_at(warm), 0.003, rtol=1e-12)
        assert sched.lr_at(999) <= 0.01 * 0.003 + 1e-15

    def test_monotone_up_then_down(self):
        sched = OneCycleSchedule(peak_lr=1.0, total_steps=200)
        lrs = [sched.lr_at(s) for s in range(200)]
        peak = int(np.argmax(lrs))
        assert all(lrs[i] < lrs[i + 1] for i in range(peak))
        assert all(lrs[i] >= lrs[i + 1] for i in range(peak, 199))

    def test_validation(self):
        with pytest.raises(ConfigError):
            OneCycleSchedule(peak_lr=1.0, total_steps=1)
        with pytest.raises(ConfigError):
            OneCycleSchedule(peak_lr=1.0, total_steps=10, warmup_frac=1.5)


class TestAdam:
    def test_single_step_matches_hand_calc(self):
        # One step with gradient 1: m_hat = 1, v_hat = 1, so the update is
        # lr / (1 + eps), i.e. essentially lr.
        p = Tensor.param(np.array([1.0]))
        opt = Adam({"p": p}, lr=0.01)
        p.grad = np.array([1.0])
        opt.step()
        assert_allclose(p.data, [1.0 - 0.01 / (1.0 + 1e-8)], rtol=1e-12)

    def test_zero_gradient_leaves_parameters(self):
        p = Tensor.param(np.array([3.0]))
        opt = Adam({"p": p}, lr=0.1)
        p.grad = np.array([0.0])
        opt.step()
        assert_allclose(p.data, [3.0], atol=0)

    def test_missing_gradient_is_skipped(self):
        p = Tensor.param(np.array([3.0]))
        opt = Adam({"p": p}, lr=0.1)
        opt.step()
        assert_allclose(p.data, [3.0], atol=0)

    def test_converges_on_quadratic(self):
        p = Tensor.param(np.array([5.0]))
        opt = Adam({"p": p}, lr=0.1)
        for _ in range(500):
            opt.zero_grad()
            loss = ad.square(p)
            loss.backward()
            opt.step()
        assert abs(p.data[0]) < 1e-3

    def test_schedule_drives_lr(self):
        sched = OneCycleSchedule(peak_lr=0.003, total_steps=100)
        p = Tensor.param(np.zeros(1))
        opt = Adam({"p": p}, schedule=sched)
        p.grad = np.ones(1)
        used = opt.step()
        assert_allclose(used, sched.lr_at(0), rtol=0)
        p.grad = np.ones(1)
        assert_allclose(opt.step(), sched.lr_at(1), rtol=0)


class TestCheckpoints:
    def test_round_trip_is_bitwise(self, tmp_path):
        rng = stream(0, 7)
        net = MLP([6, 12, 4], rng, "net")
        params = net.parameters()
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(path, params, meta={"epoch": 3, "note": "fixture"})
        values, meta = load_checkpoint(path)
        assert meta == {"epoch": 3, "note": "fixture"}
        for name, tensor in params.items():
            # Bitwise equality, not closeness.
            assert np.array_equal(values[name], tensor.data)
            assert values[name].dtype == np.float64

    def test_assign_then_identical_outputs(self, tmp_path):
        rng = stream(0, 8)
        net = MLP([5, 9, 3], rng, "net")
        x = Tensor.const(stream(0, 9).normal(size=(7, 5)))
        before = net(x).data.copy()
        path = str(tmp_path / "m.ckpt")
        save_checkpoint(path, net.parameters())
        fresh = MLP([5, 9, 3], stream(1, 0), "net")
        assert not np.array_equal(fresh(x).data, before)
        values, _ = load_checkpoint(path)
        assign_parameters(fresh.parameters(), values)
        after = fresh(x).data
        assert np.array_equal(after, before)

    def test_bad_manifest_raises(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"\xff\xfe not json\n\x00\x00")
        with pytest.raises(DataError):
            load_checkpoint(str(path))

    def test_truncated_blob_raises(self, tmp_path):
        rng = stream(0, 10)
        net = MLP([3, 3], rng, "net")
        path = tmp_path / "m.ckpt"
        save_checkpoint(str(path), net.parameters())
        data = path.read_bytes()
        path.write_bytes(data[:-8])
        with pytest.raises(DataError):
            load_checkpoint(str(path))

    def test_shape_mismatch_raises(self, tmp_path):
        rng = stream(0, 11)
        path = str(tmp_path / "m.ckpt")
        save_checkpoint(path, MLP([3, 3], rng, "net").parameters())
        other = MLP([3, 4], rng, "net")
        values, _ = load_checkpoint(path)
        with pytest.raises(ShapeError):
            assign_parameters(other.parameters(), values)

    def test_missing_parameter_raises(self, tmp_path):
        rng = stream(0, 12)
        path = str(tmp_path / "m.ckpt")
        save_checkpoint(path, {"only.W": Tensor.param(np.ones((2, 2)))})
        net = MLP([2, 2], rng, "net")
        values, _ = load_checkpoint(path)
        with pytest.raises(DataError):
            assign_parameters(net.parameters(), values)


class TestRngStreams:
    def test_streams_are_deterministic_and_disjoint(self):
        a1 = stream(123, 0, 1).normal(size=4)
        a2 = stream(123, 0, 1).normal(size=4)
        b = stream(123, 0, 2).normal(size=4)
        assert_allclose(a1, a2, atol=0)
        assert not np.allclose(a1, b)
