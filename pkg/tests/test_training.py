import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from aotsnn.data import Dataset
from aotsnn.layers import Flatten, Linear, Readout
from aotsnn.network import Network, build_network
from aotsnn.tensor import ConfigError, DimensionError, NumericError, Rng, Tensor, finite_difference_grad
from aotsnn.training import (
    Adam,
    DivergenceError,
    TrainConfig,
    adam_update,
    bptt_backward,
    clip_grad_norm,
    cosine_lr,
    loss_and_injection,
    per_step_loss,
    per_step_loss_and_grad,
    total_loss,
    train,
)

from conftest import rel_err, tiny_config


def toy_dataset(n=12, seed=0):
    rng = Rng(seed)
    return Dataset(rng.random((n, 1, 4, 4)), rng.integers(0, 3, n), "toy", num_classes=3)


class TestPerStepLoss:
    def test_perfect(self):
        assert per_step_loss(np.array([[60.0, 0, 0]]), [0]) == pytest.approx(0, abs=1e-20)

    def test_uniform_k10(self):
        assert per_step_loss(np.zeros((1, 10)), [3]) == pytest.approx(0.09, abs=1e-15)

    def test_label_range(self):
        with pytest.raises(ValueError):
            per_step_loss(np.zeros((1, 3)), [3])

    def test_k_at_least_two(self):
        with pytest.raises(DimensionError):
            per_step_loss(np.zeros((1, 1)), [0])

    @pytest.mark.parametrize("target", ["softmax_mse", "potential_mse"])
    def test_grad_fd(self, target):
        v = Rng(1).normal((4, 5))
        y = np.array([0, 4, 2, 2])
        _, g = per_step_loss_and_grad(v, y, target)
        fd = finite_difference_grad(lambda x: per_step_loss(x, y, target), v.copy(), 1e-6)
        assert np.abs(g - fd).max() < 1e-6

    @given(arrays(np.float64, (3, 4), elements=st.floats(-100, 100)), st.lists(st.integers(0, 3), min_size=3, max_size=3))
    @settings(max_examples=50, deadline=None)
    def test_bounded(self, v, y):
        assert 0.0 <= per_step_loss(v, y) <= 2.0


class TestTotalLoss:
    def test_examples(self):
        assert total_loss([0.4, 0.2], "AOT") == pytest.approx(0.3)
        assert total_loss([0.4, 0.2], "LTS") == 0.2

    @given(st.floats(0, 1))
    def test_single_step_modes_agree(self, l):
        assert total_loss([l], "AOT") == total_loss([l], "LTS")

    def test_empty(self):
        with pytest.raises(ValueError):
            total_loss([], "AOT")

    def test_injection(self):
        V = Rng(2).normal((3, 2, 4))
        y = [1, 3]
        loss, inj = loss_and_injection(V, y, "AOT")
        assert loss == pytest.approx(np.mean([per_step_loss(V[t], y) for t in range(3)]))
        for t in range(3):
            np.testing.assert_allclose(inj[t], per_step_loss_and_grad(V[t], y)[1] / 3)
        loss, inj = loss_and_injection(V, y, "LTS")
        assert not inj[:2].any() and loss == per_step_loss(V[2], y)


def linear_readout_net(T=3, seed=0):
    cfg = tiny_config(T=T)
    rng = Rng(seed)
    layers = [Flatten(), Linear(16, 3, rng), Readout()]
    layers[1].bias.data = rng.normal((3,))
    return Network(cfg, layers, [])


class TestBptt:
    def test_linear_readout_aot_matches_fd(self):
        net = linear_readout_net(T=3)
        x = Rng(3).random((4, 1, 4, 4))
        y = [0, 2, 1, 1]
        net.zero_grad()
        V = net.forward(x, "train", Rng(0), record=True)
        bptt_backward(net, V, y, "AOT")

        def f(_):
            return loss_and_injection(net.forward(x, "train", Rng(0)), y, "AOT")[0]

        for p in net.params():
            assert rel_err(p.grad, finite_difference_grad(f, p.data, 1e-6)) < 1e-6

    def test_zero_loss_gradient_gives_zero_grads(self, tiny_net):
        x = Rng(0).random((2, 1, 4, 4))
        tiny_net.zero_grad()
        V = tiny_net.forward(x, "train", Rng(0), record=True)
        tiny_net.backward(np.zeros_like(V))
        assert all(not p.grad.any() for p in tiny_net.params())

    def test_averaged_injection_linearity(self):
        """AOT gradient equals the mean of T single-step backward passes."""
        net = build_network(tiny_config(T=4, dropout_rate=0.5), Rng(0))
        x = Rng(1).random((3, 1, 4, 4))
        y = [0, 1, 2]
        net.zero_grad()
        V = net.forward(x, "train", Rng(5), record=True)
        bptt_backward(net, V, y, "AOT")
        total = [p.grad.copy() for p in net.params()]
        acc = [np.zeros_like(g) for g in total]
        for t in range(4):
            net.zero_grad()
            V = net.forward(x, "train", Rng(5), record=True)
            g = np.zeros_like(V)
            g[t] = per_step_loss_and_grad(V[t], y)[1]
            net.backward(g)
            for a, p in zip(acc, net.params()):
                a += p.grad / 4
        for a, b in zip(total, acc):
            np.testing.assert_allclose(a, b, atol=1e-14)

    def test_lts_ignores_blocked_early_steps(self):
        """Inputs reaching steps t<T only through zeroed dropout paths leave LTS gradients unchanged."""
        from aotsnn.layers import Dropout, RunContext

        T = 3
        mask = np.ones((T, 2, 3)) * 2.0
        mask[:-1] = 0.0  # block every path before the last step

        class FixedDropout(Dropout):
            def _mask(self, shape, run):
                return mask

        def lts_weight_grad(x):
            lin, drop, ro = Linear(4, 3, Rng(0)), FixedDropout(0.5), Readout()
            run = RunContext(T, "train", Rng(0), record=True)
            V = ro.forward(drop.forward(lin.forward(x, run), run), run)
            _, inj = loss_and_injection(V, [0, 2], "LTS")
            lin.backward(drop.backward(ro.backward(inj)))
            return lin.weight.grad

        x = Rng(3).normal((T, 2, 4))
        x2 = x.copy()
        x2[:-1] += Rng(4).normal((T - 1, 2, 4))
        assert np.array_equal(lts_weight_grad(x), lts_weight_grad(x2))
        assert lts_weight_grad(x).any()


class TestAdam:
    def test_zero_grad_no_change(self):
        p = Tensor(np.ones(3))
        adam_update([p], [np.zeros(3)], Adam([p]), 1e-3)
        assert np.array_equal(p.data, np.ones(3))

    @given(arrays(np.float64, 5, elements=st.floats(0.1, 1e3) | st.floats(-1e3, -0.1)))
    @settings(max_examples=30, deadline=None)
    def test_first_step_magnitude_is_lr(self, g):
        p = Tensor(np.zeros(5))
        adam_update([p], [g], Adam([p]), 1e-3)
        np.testing.assert_allclose(np.abs(p.data), 1e-3, rtol=0, atol=1e-9)
        assert np.all(np.sign(p.data) == -np.sign(g))

    def test_non_finite_aborts(self):
        p = Tensor(np.ones(2))
        opt = Adam([p])
        with pytest.raises(NumericError):
            adam_update([p], [np.array([1.0, np.nan])], opt, 1e-3)
        assert np.array_equal(p.data, np.ones(2)) and opt.t == 0

    def test_shape_check(self):
        p = Tensor(np.ones(2))
        with pytest.raises(DimensionError):
            adam_update([p], [np.ones(3)], Adam([p]), 1e-3)

    def test_clip(self):
        p = Tensor(np.zeros(2), grad=np.array([3.0, 4.0]))
        assert clip_grad_norm([p], 1.0) == 5.0
        assert np.linalg.norm(p.grad) == pytest.approx(1.0)


class TestCosine:
    def test_values(self):
        assert cosine_lr(0, 1e-3, 64) == 1e-3
        assert cosine_lr(64, 1e-3, 64) == pytest.approx(0, abs=1e-18)
        assert cosine_lr(32, 1e-3, 64) == pytest.approx(5e-4)
        assert cosine_lr(128, 1e-3, 64) == 1e-3

    def test_errors(self):
        with pytest.raises(ConfigError):
            cosine_lr(0, 1e-3, 0)
        with pytest.raises(ConfigError):
            cosine_lr(-1, 1e-3, 64)


class TestTrain:
    def test_zero_epochs_unchanged(self):
        net = build_network(tiny_config(), Rng(0))
        before = net.to_bytes()
        train(net, toy_dataset(), TrainConfig(epochs=0, batch_size=4))
        assert net.to_bytes() == before

    @pytest.mark.parametrize("mode", ["AOT", "LTS"])
    def test_reproducible(self, mode, tmp_path):
        cfg = TrainConfig(loss_mode=mode, epochs=2, batch_size=5, seed=3)
        nets = []
        for i in range(2):
            net = build_network(tiny_config(dropout_rate=0.5), Rng(3).stream("init"))
            _, recs = train(net, toy_dataset(), cfg, log_path=tmp_path / f"log{i}.jsonl")
            nets.append(net)
        assert nets[0].to_bytes() == nets[1].to_bytes()
        assert (tmp_path / "log0.jsonl").read_text() == (tmp_path / "log1.jsonl").read_text()
        assert len(recs) == 2 and set(recs[0]) >= {"epoch", "lr", "train_loss"}

    def test_loss_decreases(self):
        net = build_network(tiny_config(hidden=16, dropout_rate=0.0), Rng(0).stream("init"))
        ds = toy_dataset(30)
        _, recs = train(net, ds, TrainConfig(epochs=15, batch_size=10, lr0=1e-2))
        assert recs[-1]["train_loss"] < recs[0]["train_loss"]

    def test_divergence_names_epoch_and_batch(self):
        net = build_network(tiny_config(), Rng(0))
        net.params()[0].data[:] = np.inf
        with pytest.raises(DivergenceError, match=r"epoch 0, batch 0"):
            train(net, toy_dataset(), TrainConfig(epochs=1, batch_size=4))

    def test_config_validation(self):
        for bad in (dict(loss_mode="MEAN"), dict(lr0=0), dict(t_max=0), dict(batch_size=1), dict(loss_target="ce")):
            with pytest.raises(ConfigError):
                TrainConfig(**bad)

    def test_empty_dataset(self):
        net = build_network(tiny_config(), Rng(0))
        with pytest.raises(ConfigError):
            train(net, toy_dataset().subset([]), TrainConfig())


def test_cosine_schedule_is_per_epoch():
    assert math.isclose(cosine_lr(1, 1e-3, 64), 0.5e-3 * (1 + math.cos(math.pi / 64)))
