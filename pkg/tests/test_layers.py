import numpy as np
import pytest

from aotsnn.layers import (
    BatchNorm,
    Conv2d,
    Dropout,
    Linear,
    RunContext,
    drop_connect,
    kaiming_uniform,
    spike_dropout,
)
from aotsnn.tensor import ConfigError, Rng, StateError, finite_difference_grad

from conftest import rel_err


def run(T=1, mode="train", seed=0, policy="per_step", record=True):
    return RunContext(T, mode, Rng(seed), policy, record)


class TestSpikeDropout:
    def test_rate_zero_identity(self):
        x = (Rng(0).random((50,)) > 0.5).astype(float)
        assert spike_dropout(x, 0.0, Rng(1)) is x

    def test_inactive_identity(self):
        x = np.ones(10)
        assert np.array_equal(spike_dropout(x, 0.5, Rng(1), active=False), x)

    def test_inverted_scaling_mean(self):
        out = spike_dropout(np.ones(100_000), 0.5, Rng(2))
        assert 0.99 <= out.mean() <= 1.01
        assert set(np.unique(out)) == {0.0, 2.0}

    @pytest.mark.parametrize("rate", [1.0, 1.5, -0.1])
    def test_bad_rate(self, rate):
        with pytest.raises(ConfigError):
            spike_dropout(np.ones(3), rate, Rng(0))

    def test_masks_differ_across_steps(self):
        layer = Dropout(0.5)
        out = layer.forward(np.ones((1, 1, 64)), run(T=8, mode="eval_dropout_on"))
        assert out.shape == (8, 1, 64)
        assert len({row.tobytes() for row in out[:, 0]}) >= 2

    def test_per_pass_mask_is_shared(self):
        out = Dropout(0.5).forward(np.ones((8, 1, 64)), run(T=8, mode="eval_dropout_on", policy="per_pass"))
        assert all(np.array_equal(out[0], out[t]) for t in range(8))

    def test_eval_off_identity(self):
        x = np.ones((4, 2, 5))
        assert np.array_equal(Dropout(0.5).forward(x, run(T=4, mode="eval_dropout_off")), x)

    def test_backward_static_input_sums_over_time(self):
        layer = Dropout(0.5)
        x = Rng(3).normal((1, 2, 6))
        g = Rng(4).normal((4, 2, 6))
        layer.forward(x, run(T=4))
        an = layer.backward(g)

        def f(v):
            return float(np.sum(Dropout(0.5).forward(v, run(T=4, record=False)) * g))

        assert rel_err(an, finite_difference_grad(f, x)) < 1e-8


class TestDropConnect:
    def test_rate_zero_identity(self):
        w = Rng(0).normal((3, 4))
        assert drop_connect(w, 0.0, Rng(1)) is w

    def test_zero_weights(self):
        assert not drop_connect(np.zeros((5, 5)), 0.7, Rng(0)).any()

    def test_unbiased(self):
        rng = Rng(5)
        w = rng.normal((3, 4))
        x = np.ones(4)
        n = 100_000
        keep = rng.bernoulli_keep((n, 3, 4), 0.5) / 0.5
        mean = np.einsum("nij,j->i", keep * w, x) / n
        np.testing.assert_allclose(mean, w @ x, rtol=0.01, atol=0.01 * np.abs(w).sum())

    def test_bad_rate(self):
        with pytest.raises(ConfigError):
            drop_connect(np.ones(3), 1.0, Rng(0))


class TestBatchNorm:
    def test_eval_constant_to_zero(self):
        bn = BatchNorm(2)
        bn.running_mean.data = np.array([3.0, -1.0])
        x = np.broadcast_to(np.array([3.0, -1.0])[None, None, :, None, None], (1, 4, 2, 3, 3)).copy()
        assert np.abs(bn.forward(x, run(mode="eval_dropout_off"))).max() < 1e-6

    def test_train_normalizes(self):
        bn = BatchNorm(3)
        x = Rng(1).normal((4, 5, 3, 2, 2)) * 3 + 7
        bn.forward(x, run(T=4))
        x_hat = bn._cache[0]
        axes = (0, 1, 3, 4)
        np.testing.assert_allclose(x_hat.mean(axis=axes), 0, atol=1e-6)
        np.testing.assert_allclose(x_hat.var(axis=axes), 1, atol=1e-4)

    def test_eval_deterministic(self):
        bn = BatchNorm(2)
        x = Rng(2).normal((1, 3, 2, 2, 2))
        r = run(mode="eval_dropout_on")
        assert np.array_equal(bn.forward(x, r), bn.forward(x, r))

    def test_batch_of_one_rejected(self):
        with pytest.raises(ConfigError):
            BatchNorm(2).forward(np.zeros((1, 1, 2, 2, 2)), run())

    def test_running_stats_static_input(self):
        bn = BatchNorm(1, momentum=1.0)
        x = Rng(3).normal((1, 4, 1, 2, 2))
        bn.forward(x, run(T=3))
        n = 4 * 4 * 3
        assert bn.running_var.data[0] == pytest.approx(x.var() * n / (n - 1))

    @pytest.mark.parametrize("mode", ["train", "eval_dropout_off"])
    def test_backward_matches_fd(self, mode):
        rng = Rng(4)
        bn = BatchNorm(2)
        bn.gamma.data = rng.normal((2,))
        bn.beta.data = rng.normal((2,))
        bn.running_mean.data = rng.normal((2,))
        bn.running_var.data = rng.random((2,)) + 0.5
        x = rng.normal((2, 3, 2, 2, 2))
        g = rng.normal((2, 3, 2, 2, 2))

        def f(v):
            saved = bn.running_mean.data.copy(), bn.running_var.data.copy()
            out = float(np.sum(bn.forward(v, run(T=2, mode=mode, record=False)) * g))
            bn.running_mean.data, bn.running_var.data = saved
            return out

        saved = bn.running_mean.data.copy(), bn.running_var.data.copy()
        bn.forward(x, run(T=2, mode=mode))
        bn.running_mean.data, bn.running_var.data = saved
        gx = bn.backward(g)
        assert rel_err(gx, finite_difference_grad(f, x.copy())) < 1e-6
        assert rel_err(bn.gamma.grad, finite_difference_grad(lambda v: f(x), bn.gamma.data)) < 1e-6

    def test_backward_requires_forward(self):
        with pytest.raises(StateError):
            BatchNorm(2).backward(np.zeros((1, 2, 2, 1, 1)))


class TestWeightLayers:
    def test_kaiming_bound(self):
        w = kaiming_uniform(Rng(0), (1000, 10), 10)
        assert np.abs(w).max() <= np.sqrt(3 / 10)

    @pytest.mark.parametrize("dc", [0.0, 0.4])
    @pytest.mark.parametrize("static", [False, True])
    def test_linear_backward(self, dc, static):
        lin = Linear(5, 3, Rng(1), dropconnect=dc)
        x = Rng(2).normal((1 if static else 3, 2, 5))
        g = Rng(3).normal((3, 2, 3))

        def f(_):
            return float(np.sum(lin.forward(x, run(T=3, seed=9, record=False)) * g))

        lin.forward(x, run(T=3, seed=9))
        gx = lin.backward(g)
        assert rel_err(lin.weight.grad, finite_difference_grad(f, lin.weight.data)) < 1e-7
        assert rel_err(lin.bias.grad, finite_difference_grad(f, lin.bias.data)) < 1e-7
        gx_fd = finite_difference_grad(lambda v: float(np.sum(lin.forward(v, run(T=3, seed=9, record=False)) * g)), x)
        assert rel_err(gx, gx_fd) < 1e-7

    @pytest.mark.parametrize("dc", [0.0, 0.4])
    def test_conv_backward(self, dc):
        conv = Conv2d(2, 3, Rng(1), dropconnect=dc)
        x = Rng(2).normal((1, 2, 2, 4, 4))
        g = Rng(3).normal((3, 2, 3, 4, 4))

        def f(v=None):
            return float(np.sum(conv.forward(x if v is None else v, run(T=3, seed=9, record=False)) * g))

        conv.forward(x, run(T=3, seed=9))
        gx = conv.backward(g)
        assert rel_err(conv.weight.grad, finite_difference_grad(lambda _: f(), conv.weight.data)) < 1e-7
        assert rel_err(gx, finite_difference_grad(f, x.copy())) < 1e-7

    def test_conv_skips_input_grad(self):
        conv = Conv2d(1, 2, Rng(0))
        conv.need_input_grad = False
        conv.forward(np.ones((1, 2, 1, 4, 4)), run(T=2))
        assert conv.backward(np.ones((1, 2, 2, 4, 4))) is None
        assert conv.weight.grad is not None
