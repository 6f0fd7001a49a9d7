"""Leaky integrate-and-fire dynamics, the arctan surrogate and readout integrators.

Discrete LIF update with the reset applied one step after the spike::

    u[t] = lam * u[t-1] + I[t] - theta * s[t-1]
    s[t] = 1 if u[t] > theta else 0

``lam = sigmoid(lambda_raw)`` keeps the decay in (0, 1) under unconstrained
gradient steps. In PLIF layers one ``lambda_raw`` is shared by every neuron.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from . import _kernels
from .tensor import DTYPE, ConfigError, DimensionError, StateError, logit, sigmoid

ResetTiming = Literal["lagged", "immediate"]

DEFAULT_DECAY = 0.9
DEFAULT_THETA = 1.0
DEFAULT_ALPHA = 2.0


@dataclass
class LifParams:
    theta: float = DEFAULT_THETA
    lambda_raw: float = logit(DEFAULT_DECAY)
    learnable: bool = True
    reset_timing: ResetTiming = "lagged"

    def __post_init__(self) -> None:
        if self.theta <= 0:
            raise ConfigError("theta must be positive")
        if self.reset_timing not in ("lagged", "immediate"):
            raise ConfigError(f"unknown reset_timing {self.reset_timing!r}")

    @property
    def decay(self) -> float:
        return float(sigmoid(self.lambda_raw))


@dataclass
class SurrogateParams:
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self) -> None:
        if self.alpha <= 0:
            raise ConfigError("surrogate alpha must be positive")


@dataclass
class NeuronState:
    u: np.ndarray
    s_prev: np.ndarray

    def __post_init__(self) -> None:
        if self.u.shape != self.s_prev.shape:
            raise DimensionError(f"u {self.u.shape} and s_prev {self.s_prev.shape} differ")

    @classmethod
    def zeros(cls, shape) -> NeuronState:
        return cls(np.zeros(shape, dtype=DTYPE), np.zeros(shape, dtype=DTYPE))


@dataclass
class StepContext:
    """What one LIF step must remember for the backward pass."""

    u_old: np.ndarray
    u_new: np.ndarray
    s_prev: np.ndarray
    decay: float


def heaviside(x: np.ndarray) -> np.ndarray:
    return (x > 0).astype(DTYPE)


def surrogate_grad(x: np.ndarray, alpha: float = DEFAULT_ALPHA) -> np.ndarray:
    """Derivative of ``arctan(pi*alpha*x/2)/pi + 1/2``."""
    return alpha / (2.0 * (1.0 + (0.5 * math.pi * alpha * x) ** 2))


def surrogate_primitive(x: np.ndarray, alpha: float = DEFAULT_ALPHA) -> np.ndarray:
    """Smooth step whose derivative is :func:`surrogate_grad`. Only used by gradient checks."""
    return np.arctan(0.5 * math.pi * alpha * x) / math.pi + 0.5


def spike_surrogate_backward(u_minus_theta, upstream_grad, params: SurrogateParams | None = None) -> np.ndarray:
    u_minus_theta = np.asarray(u_minus_theta, dtype=DTYPE)
    upstream_grad = np.asarray(upstream_grad, dtype=DTYPE)
    if u_minus_theta.shape != upstream_grad.shape:
        raise DimensionError(f"surrogate: {u_minus_theta.shape} vs {upstream_grad.shape}")
    alpha = (params or SurrogateParams()).alpha
    return upstream_grad * surrogate_grad(u_minus_theta, alpha)


def lif_step(state: NeuronState, input_current, params: LifParams) -> tuple[NeuronState, np.ndarray, StepContext]:
    """Advance one time step. Returns the new state, the binary spikes and the backward context."""
    i = np.asarray(input_current, dtype=DTYPE)
    if i.shape != state.u.shape:
        raise DimensionError(f"lif_step: input {i.shape} vs state {state.u.shape}")
    lam = params.decay
    if params.reset_timing == "lagged":
        u_new = lam * state.u + i - state.s_prev * params.theta
        spikes = heaviside(u_new - params.theta)
        ctx = StepContext(state.u, u_new, state.s_prev, lam)
        return NeuronState(u_new, spikes), spikes, ctx
    # immediate: u holds the post-reset potential
    h = lam * state.u + i
    spikes = heaviside(h - params.theta)
    ctx = StepContext(state.u, h, state.s_prev, lam)
    return NeuronState(h - spikes * params.theta, spikes), spikes, ctx


def readout_step(state: NeuronState, input_current, decay: float = 1.0) -> NeuronState:
    if not 0.0 < decay <= 1.0:
        raise ConfigError("readout decay must lie in (0, 1]")
    i = np.asarray(input_current, dtype=DTYPE)
    if i.shape != state.u.shape:
        raise DimensionError(f"readout_step: input {i.shape} vs state {state.u.shape}")
    return NeuronState(decay * state.u + i, np.zeros_like(state.u))


def plif_grad_lambda(saved_contexts, upstream_grads, lambda_raw: float) -> float:
    """Gradient w.r.t. the shared ``lambda_raw`` of one layer.

    ``upstream_grads[t]`` is the total dL/du_new at step t; the pre-squash
    derivative is ``sum_t sum_i g[t]_i * u_old[t]_i * sigmoid'(lambda_raw)``.
    """
    if saved_contexts is None or len(saved_contexts) == 0:
        raise StateError("plif_grad_lambda needs contexts from a completed forward pass")
    if len(saved_contexts) != len(upstream_grads):
        raise DimensionError("one upstream gradient per saved step is required")
    s = float(sigmoid(lambda_raw))
    total = 0.0
    for ctx, g in zip(saved_contexts, upstream_grads):
        total += float(np.sum(np.asarray(g) * ctx.u_old))
    return total * s * (1.0 - s)


# ---------------------------------------------------------------------------
# whole-sequence kernels used by the network layers
# ---------------------------------------------------------------------------


@dataclass
class LifSequence:
    """Forward record of a LIF layer over T steps, time-major arrays ``(T, ...)``."""

    u: np.ndarray  # potential compared against theta at each step
    spikes: np.ndarray
    static_input: bool
    params: LifParams = field(repr=False)

    def carried(self) -> np.ndarray:
        """Potential carried into each step: 0, then u[t-1] (post-reset for immediate reset)."""
        prev = np.zeros_like(self.u)
        prev[1:] = self.u[:-1]
        if self.params.reset_timing == "immediate":
            prev[1:] -= self.params.theta * self.spikes[:-1]
        return prev


def lif_forward_sequence(
    currents: np.ndarray,
    T: int,
    params: LifParams,
    spike_fn=None,
) -> LifSequence:
    """Run T LIF steps. ``currents`` is ``(T, ...)`` or ``(1, ...)`` for a constant input.

    ``spike_fn`` replaces the Heaviside step; it exists so gradient checks can
    run the same recursion with a differentiable spike. The default path is
    the compiled kernel.
    """
    static = currents.shape[0] == 1 and T > 1
    shape = currents.shape[1:]
    lagged = params.reset_timing == "lagged"
    if spike_fn is None:
        flat = np.ascontiguousarray(currents.reshape(currents.shape[0], -1))
        u, s = _kernels.lif_forward(flat, T, params.decay, params.theta, lagged)
        return LifSequence(u.reshape(T, *shape), s.reshape(T, *shape), static, params)
    lam, theta = params.decay, params.theta
    u_all = np.empty((T, *shape), dtype=DTYPE)
    s_all = np.empty((T, *shape), dtype=DTYPE)
    carry = np.zeros(shape, dtype=DTYPE)
    s_prev = np.zeros(shape, dtype=DTYPE)
    for t in range(T):
        i_t = currents[0 if static else t]
        if lagged:
            u = lam * carry + i_t - theta * s_prev
        else:
            u = lam * carry + i_t
        s = spike_fn(u - theta)
        u_all[t] = u
        s_all[t] = s
        carry = u if lagged else u - theta * s
        s_prev = s
    return LifSequence(u_all, s_all, static, params)


def lif_backward_sequence(
    rec: LifSequence, grad_spikes: np.ndarray, surrogate: SurrogateParams, compiled: bool = True
) -> tuple[np.ndarray, float]:
    """BPTT through a LIF layer. Returns (dL/dcurrents, dL/dlambda_raw)."""
    T = rec.u.shape[0]
    p = rec.params
    lam, theta = p.decay, p.theta
    alpha = surrogate.alpha
    lagged = p.reset_timing == "lagged"
    if compiled:
        shape = rec.u.shape[1:]
        gi, dlam = _kernels.lif_backward(
            rec.u.reshape(T, -1),
            rec.spikes.reshape(T, -1),
            np.ascontiguousarray(grad_spikes.reshape(T, -1)),
            lam,
            theta,
            alpha,
            lagged,
            rec.static_input,
        )
        return gi.reshape(gi.shape[0], *shape), dlam * lam * (1.0 - lam)
    prev = rec.carried()
    grad_i = np.empty_like(rec.u)
    g_carry = np.zeros(rec.u.shape[1:], dtype=DTYPE)  # dL/d(potential carried out of step t)
    g_reset = np.zeros(rec.u.shape[1:], dtype=DTYPE)  # dL/ds[t] through the next step's reset
    dlam = 0.0
    for t in range(T - 1, -1, -1):
        gs = grad_spikes[t] + g_reset
        if not lagged:
            gs = gs - theta * g_carry
        gu = g_carry + gs * surrogate_grad(rec.u[t] - theta, alpha)
        grad_i[t] = gu
        dlam += float(np.sum(gu * prev[t]))
        g_carry = lam * gu
        g_reset = -theta * gu if lagged else np.zeros_like(gu)
    if rec.static_input:
        grad_i = grad_i.sum(axis=0, keepdims=True)
    return grad_i, dlam * lam * (1.0 - lam)


def readout_forward_sequence(currents: np.ndarray, T: int, decay: float = 1.0) -> np.ndarray:
    static = currents.shape[0] == 1 and T > 1
    out = np.empty((T, *currents.shape[1:]), dtype=DTYPE)
    u = np.zeros(currents.shape[1:], dtype=DTYPE)
    for t in range(T):
        u = decay * u + currents[0 if static else t]
        out[t] = u
    return out


def readout_backward_sequence(grad_v: np.ndarray, decay: float = 1.0, static_input: bool = False) -> np.ndarray:
    T = grad_v.shape[0]
    g = np.empty_like(grad_v)
    acc = np.zeros(grad_v.shape[1:], dtype=DTYPE)
    for t in range(T - 1, -1, -1):
        acc = grad_v[t] + decay * acc
        g[t] = acc
    if static_input:
        g = g.sum(axis=0, keepdims=True)
    return g
