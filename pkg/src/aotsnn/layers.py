"""Network layers operating on time-major sequences.

Every activation is an array shaped ``(T', N, ...)``. ``T' == 1`` marks a
value that is constant over all T time steps (the directly injected input
and everything computed from it before the first spiking layer), which lets
the stateless layers do one evaluation instead of T.

Each layer implements three entry points:

``forward(x, run)``   whole sequence, layer-major; records backward context when ``run.record``
``backward(g)``       gradient w.r.t. the input of the last recorded forward; accumulates parameter grads
``step(x, slot, run)`` a single time step for step-major inference; ``slot`` holds per-layer state
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from . import neurons
from .neurons import LifParams, NeuronState, SurrogateParams
from .tensor import (
    DTYPE,
    ConfigError,
    DimensionError,
    Rng,
    StateError,
    Tensor,
    avgpool2,
    avgpool2_backward,
    conv2d,
    conv2d_backward_cols,
    conv2d_cols,
    im2col,
)

Mode = Literal["train", "eval_dropout_on", "eval_dropout_off"]
MaskPolicy = Literal["per_step", "per_pass"]
MODES = ("train", "eval_dropout_on", "eval_dropout_off")


@dataclass
class RunContext:
    """Settings shared by all layers during one pass."""

    T: int
    mode: Mode
    rng: Rng
    mask_policy: MaskPolicy = "per_step"
    record: bool = False

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.mask_policy not in ("per_step", "per_pass"):
            raise ConfigError(f"unknown mask policy {self.mask_policy!r}")
        if self.T < 1:
            raise ConfigError("T must be >= 1")

    @property
    def dropout_active(self) -> bool:
        return self.mode != "eval_dropout_off"


def check_rate(rate: float) -> float:
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    return rate


def kaiming_uniform(rng: Rng, shape, fan_in: int, gain: float = 1.0) -> np.ndarray:
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, shape)


def spike_dropout(spikes: np.ndarray, rate: float, rng: Rng, active: bool = True) -> np.ndarray:
    """Inverted dropout on an array of spikes."""
    check_rate(rate)
    if not active or rate == 0.0:
        return spikes
    keep = rng.bernoulli_keep(spikes.shape, rate)
    return spikes * keep / (1.0 - rate)


def drop_connect(weights: np.ndarray, rate: float, rng: Rng) -> np.ndarray:
    """Inverted DropConnect: each weight independently zeroed with probability ``rate``."""
    check_rate(rate)
    if rate == 0.0:
        return weights
    keep = rng.bernoulli_keep(weights.shape, rate)
    return weights * keep / (1.0 - rate)


class Layer:
    kind: str = "layer"

    def params(self) -> list[Tensor]:
        return []

    def buffers(self) -> list[Tensor]:
        """Non-trained state that still belongs in a checkpoint."""
        return []

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        return shape

    def forward(self, x: np.ndarray, run: RunContext) -> np.ndarray:
        raise NotImplementedError

    def backward(self, g: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def step(self, x: np.ndarray, slot: dict, run: RunContext) -> np.ndarray:
        # stateless layers: one step equals a length-1 sequence
        return self.forward(x[None], run)[0]

    def _need(self, attr: str):
        val = getattr(self, attr, None)
        if val is None:
            raise StateError(f"{self.kind}: backward called without a recorded forward pass")
        return val


class _WeightMasks:
    """DropConnect masks for one pass: ``None`` or an array per time step."""

    def __init__(self, rate: float):
        self.rate = check_rate(rate)

    def sample(self, w: np.ndarray, run: RunContext) -> list[np.ndarray] | None:
        if self.rate == 0.0 or not run.dropout_active:
            return None
        n = run.T if run.mask_policy == "per_step" else 1
        scale = 1.0 / (1.0 - self.rate)
        return [run.rng.bernoulli_keep(w.shape, self.rate) * scale for _ in range(n)]


class Conv2d(Layer):
    kind = "conv"

    def __init__(self, c_in: int, c_out: int, rng: Rng, dropconnect: float = 0.0):
        self.c_in, self.c_out = c_in, c_out
        self.weight = Tensor(kaiming_uniform(rng, (c_out, c_in, 3, 3), c_in * 9), name="conv.weight")
        self.dc = _WeightMasks(dropconnect)
        self.need_input_grad = True
        self._x = None
        self._masks = None

    def params(self) -> list[Tensor]:
        return [self.weight]

    def output_shape(self, shape):
        if len(shape) != 3 or shape[0] != self.c_in:
            raise DimensionError(f"conv expects ({self.c_in}, H, W), got {shape}")
        return (self.c_out, shape[1], shape[2])

    def forward(self, x, run):
        masks = self.dc.sample(self.weight.data, run)
        Tp, N, _, H, W = x.shape
        cols = im2col(x.reshape(Tp * N, *x.shape[2:]))
        if masks is None:
            y = conv2d_cols(cols, self.weight.data, Tp * N, H, W).reshape(Tp, N, self.c_out, H, W)
        else:
            per_t = cols.reshape(Tp, -1, cols.shape[1])
            steps = run.T if len(masks) > 1 else Tp
            y = np.stack(
                [
                    conv2d_cols(per_t[0 if Tp == 1 else t], self.weight.data * masks[min(t, len(masks) - 1)], N, H, W)
                    for t in range(steps)
                ]
            )
        if run.record:
            self._x, self._cols, self._masks = x, cols, masks
        return y

    def backward(self, g):
        x = self._need("_x")
        cols, masks = self._cols, self._masks
        Tp, N = x.shape[:2]
        w = self.weight.data
        if masks is None:
            if g.shape[0] != Tp:
                # output was time-constant; its T copies all carry the same map
                g = g.sum(axis=0, keepdims=True)
            gx, gw = conv2d_backward_cols(cols, w, g.reshape(g.shape[0] * N, *g.shape[2:]), self.need_input_grad)
            self.weight.accumulate(gw)
            return None if gx is None else gx.reshape(x.shape)
        per_t = cols.reshape(Tp, -1, cols.shape[1])
        gx = np.zeros((g.shape[0], *x.shape[1:]), dtype=DTYPE)
        gw = np.zeros_like(w)
        for t in range(g.shape[0]):
            m = masks[min(t, len(masks) - 1)]
            gxt, gwt = conv2d_backward_cols(per_t[0 if Tp == 1 else t], w * m, g[t], self.need_input_grad)
            if gxt is not None:
                gx[t] = gxt
            gw += gwt * m
        self.weight.accumulate(gw)
        if not self.need_input_grad:
            return None
        if Tp == 1 and gx.shape[0] > 1:
            gx = gx.sum(axis=0, keepdims=True)
        return gx

    def step(self, x, slot, run):
        if self.dc.rate == 0.0 or not run.dropout_active:
            return conv2d(x, self.weight.data)
        if run.mask_policy == "per_pass":
            if "mask" not in slot:
                slot["mask"] = self.dc.sample(self.weight.data, RunContext(1, run.mode, run.rng))[0]
            m = slot["mask"]
        else:
            m = self.dc.sample(self.weight.data, RunContext(1, run.mode, run.rng))[0]
        return conv2d(x, self.weight.data * m)


class BatchNorm(Layer):
    """Per-channel batch norm; time steps are folded into the batch for statistics."""

    kind = "batchnorm"

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.channels = channels
        self.momentum, self.eps = momentum, eps
        self.gamma = Tensor(np.ones(channels), name="bn.gamma")
        self.beta = Tensor(np.zeros(channels), name="bn.beta")
        self.running_mean = Tensor(np.zeros(channels), name="bn.running_mean")
        self.running_var = Tensor(np.ones(channels), name="bn.running_var")
        self._cache = None

    def params(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return [self.running_mean, self.running_var]

    def _axes(self, x):
        return (0, 1) + tuple(range(3, x.ndim))

    def _bshape(self, x):
        return (1, 1, self.channels) + (1,) * (x.ndim - 3)

    def forward(self, x, run):
        if x.shape[2] != self.channels:
            raise DimensionError(f"batchnorm over {self.channels} channels got {x.shape}")
        bs = self._bshape(x)
        if run.mode == "train":
            if x.shape[1] < 2:
                raise ConfigError("batch norm in train mode needs a batch of at least 2")
            axes = self._axes(x)
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            # a static (T'=1) input stands for T identical copies
            n = x.size // self.channels * (run.T if x.shape[0] == 1 else 1)
            m = self.momentum
            self.running_mean.data = (1 - m) * self.running_mean.data + m * mean
            self.running_var.data = (1 - m) * self.running_var.data + m * var * n / max(n - 1, 1)
        else:
            mean, var = self.running_mean.data, self.running_var.data
        inv_std = 1.0 / np.sqrt(var + self.eps)
        x_hat = (x - mean.reshape(bs)) * inv_std.reshape(bs)
        if run.record:
            self._cache = (x_hat, inv_std, run.mode == "train")
        return x_hat * self.gamma.data.reshape(bs) + self.beta.data.reshape(bs)

    def backward(self, g):
        x_hat, inv_std, batch_stats = self._need("_cache")
        if g.shape[0] != x_hat.shape[0]:
            raise DimensionError("batchnorm backward: time extent differs from forward")
        axes, bs = self._axes(g), self._bshape(g)
        self.gamma.accumulate((g * x_hat).sum(axis=axes))
        self.beta.accumulate(g.sum(axis=axes))
        gh = g * self.gamma.data.reshape(bs)
        if not batch_stats:
            return gh * inv_std.reshape(bs)
        mean_gh = gh.mean(axis=axes, keepdims=True)
        mean_ghx = (gh * x_hat).mean(axis=axes, keepdims=True)
        return (gh - mean_gh - x_hat * mean_ghx) * inv_std.reshape(bs)


class Plif(Layer):
    """Spiking layer with one learnable decay shared by all its neurons."""

    kind = "spiking"

    def __init__(self, lif: LifParams, surrogate: SurrogateParams):
        self.lif = lif
        self.surrogate = surrogate
        self.lambda_raw = Tensor(np.array([lif.lambda_raw]), name="plif.lambda_raw")
        self.spike_fn = None  # compiled Heaviside path; gradient checks may swap in a smooth step
        self._rec = None

    def params(self):
        return [self.lambda_raw] if self.lif.learnable else []

    def buffers(self):
        return [] if self.lif.learnable else [self.lambda_raw]

    def _params_now(self) -> LifParams:
        return LifParams(self.lif.theta, float(self.lambda_raw.data[0]), self.lif.learnable, self.lif.reset_timing)

    def forward(self, x, run):
        rec = neurons.lif_forward_sequence(x, run.T, self._params_now(), self.spike_fn)
        if run.record:
            self._rec = rec
        return rec.spikes

    def backward(self, g):
        rec = self._need("_rec")
        gi, dlam = neurons.lif_backward_sequence(rec, g, self.surrogate, compiled=self.spike_fn is None)
        if self.lif.learnable:
            self.lambda_raw.accumulate(np.array([dlam]))
        return gi

    def step(self, x, slot, run):
        state = slot.get("state") or NeuronState.zeros(x.shape)
        new_state, spikes, _ = neurons.lif_step(state, x, self._params_now())
        slot["state"] = new_state
        return spikes


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, rate: float):
        self.rate = check_rate(rate)
        self._scale = None

    def _mask(self, shape, run: RunContext) -> np.ndarray:
        return run.rng.bernoulli_keep(shape, self.rate) / (1.0 - self.rate)

    def forward(self, x, run):
        if self.rate == 0.0 or not run.dropout_active:
            if run.record:
                self._scale = 1.0
                self._static_in = False
            return x
        if run.mask_policy == "per_step":
            mask = self._mask((run.T, *x.shape[1:]), run)
        else:
            mask = self._mask((1, *x.shape[1:]), run)
        if run.record:
            self._scale = mask
            self._static_in = x.shape[0] == 1 and mask.shape[0] > 1
        return x * mask

    def backward(self, g):
        scale = self._need("_scale")
        out = g * scale
        if getattr(self, "_static_in", False) and not isinstance(scale, float):
            out = out.sum(axis=0, keepdims=True)
        return out

    def step(self, x, slot, run):
        if self.rate == 0.0 or not run.dropout_active:
            return x
        if run.mask_policy == "per_pass":
            if "mask" not in slot:
                slot["mask"] = self._mask(x.shape, run)
            return x * slot["mask"]
        return x * self._mask(x.shape, run)


class AvgPool(Layer):
    kind = "avgpool"

    def output_shape(self, shape):
        c, h, w = shape
        if h % 2 or w % 2:
            raise DimensionError(f"avgpool needs even spatial dims, got {shape}")
        return (c, h // 2, w // 2)

    def forward(self, x, run):
        return avgpool2(x)

    def backward(self, g):
        return avgpool2_backward(g)


class Flatten(Layer):
    kind = "flatten"

    def __init__(self):
        self._shape = None

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x, run):
        if run.record:
            self._shape = x.shape[2:]
        return x.reshape(*x.shape[:2], -1)

    def backward(self, g):
        shape = self._need("_shape")
        return g.reshape(*g.shape[:2], *shape)


class Linear(Layer):
    kind = "linear"

    def __init__(self, n_in: int, n_out: int, rng: Rng, dropconnect: float = 0.0):
        self.n_in, self.n_out = n_in, n_out
        self.weight = Tensor(kaiming_uniform(rng, (n_out, n_in), n_in), name="linear.weight")
        self.bias = Tensor(np.zeros(n_out), name="linear.bias")
        self.dc = _WeightMasks(dropconnect)
        self._x = None
        self._masks = None

    def params(self):
        return [self.weight, self.bias]

    def output_shape(self, shape):
        if shape != (self.n_in,):
            raise DimensionError(f"linear expects ({self.n_in},), got {shape}")
        return (self.n_out,)

    def forward(self, x, run):
        masks = self.dc.sample(self.weight.data, run)
        if masks is None:
            y = x @ self.weight.data.T + self.bias.data
        else:
            steps = run.T if len(masks) > 1 else x.shape[0]
            y = np.stack(
                [x[0 if x.shape[0] == 1 else t] @ (self.weight.data * masks[min(t, len(masks) - 1)]).T for t in range(steps)]
            ) + self.bias.data
        if run.record:
            self._x, self._masks = x, masks
        return y

    def backward(self, g):
        x = self._need("_x")
        masks = self._masks
        self.bias.accumulate(g.sum(axis=(0, 1)))
        if masks is None:
            xs = np.broadcast_to(x, (g.shape[0], *x.shape[1:])) if x.shape[0] != g.shape[0] else x
            self.weight.accumulate(np.einsum("tno,tni->oi", g, xs))
            gx = g @ self.weight.data
        else:
            gw = np.zeros_like(self.weight.data)
            gx = np.empty((g.shape[0], *x.shape[1:]), dtype=DTYPE)
            for t in range(g.shape[0]):
                m = masks[min(t, len(masks) - 1)]
                xt = x[0 if x.shape[0] == 1 else t]
                gw += (g[t].T @ xt) * m
                gx[t] = g[t] @ (self.weight.data * m)
            self.weight.accumulate(gw)
        if x.shape[0] == 1 and gx.shape[0] > 1:
            gx = gx.sum(axis=0, keepdims=True)
        return gx

    def step(self, x, slot, run):
        if self.dc.rate == 0.0 or not run.dropout_active:
            return x @ self.weight.data.T + self.bias.data
        if run.mask_policy == "per_pass":
            if "mask" not in slot:
                slot["mask"] = self.dc.sample(self.weight.data, RunContext(1, run.mode, run.rng))[0]
            m = slot["mask"]
        else:
            m = self.dc.sample(self.weight.data, RunContext(1, run.mode, run.rng))[0]
        return x @ (self.weight.data * m).T + self.bias.data


@dataclass
class Readout(Layer):
    """Non-spiking integrator; its potentials are the network output."""

    decay: float = 1.0
    _static: bool | None = field(default=None, repr=False)
    kind = "readout"

    def __post_init__(self):
        if not 0.0 < self.decay <= 1.0:
            raise ConfigError("readout decay must lie in (0, 1]")

    def forward(self, x, run):
        if run.record:
            self._static = x.shape[0] == 1 and run.T > 1
        return neurons.readout_forward_sequence(x, run.T, self.decay)

    def backward(self, g):
        static = self._need("_static")
        return neurons.readout_backward_sequence(g, self.decay, static)

    def step(self, x, slot, run):
        state = slot.get("state") or NeuronState.zeros(x.shape)
        state = neurons.readout_step(state, x, self.decay)
        slot["state"] = state
        return state.u
