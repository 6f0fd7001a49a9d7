"""Predictive distributions from the four estimators, plus temperature scaling.

Compute is accounted in step evaluations: one time step of one pass through
the whole network. AOT costs T, multi-pass MC-dropout and ensembles cost M*T.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from .network import Network
from .tensor import ConfigError, Rng, softmax

Estimator = Literal["AOT", "LTS", "MC_DROPOUT", "ENSEMBLE", "LTS_TEMP_SCALED"]

TEMP_RANGE = (0.05, 10.0)
TEMP_TOL = 1e-3


@dataclass
class PredictiveDistribution:
    """Class probabilities for a batch, ``(N, K)``, with their provenance."""

    probs: np.ndarray
    estimator: Estimator
    step_evals_used: int
    passes: int
    T: int

    def __post_init__(self):
        if self.step_evals_used != self.passes * self.T:
            raise ValueError(f"step_evals_used {self.step_evals_used} != passes {self.passes} x T {self.T}")


def _check_T(T: int) -> int:
    if T < 1:
        raise ConfigError("T must be >= 1")
    return T


def predict_aot(net: Network, x: np.ndarray, T: int, rng: Rng) -> PredictiveDistribution:
    """One dropout-enabled pass; masks are redrawn every step and the per-step softmaxes averaged."""
    _check_T(T)
    state = net.new_state()
    V = net.forward(x, "eval_dropout_on", rng, T=T, mask_policy="per_step", state=state)
    probs = softmax(V).mean(axis=0)
    return PredictiveDistribution(probs, "AOT", state.step_eval_counter, 1, T)


def predict_lts(net: Network, x: np.ndarray, T: int, rng: Rng | None = None) -> PredictiveDistribution:
    """Dropout off; the distribution of the last step only."""
    _check_T(T)
    state = net.new_state()
    V = net.forward(x, "eval_dropout_off", rng or Rng(0), T=T, state=state)
    return PredictiveDistribution(softmax(V[-1]), "LTS", state.step_eval_counter, 1, T)


def predict_mc_dropout(
    net: Network, x: np.ndarray, T: int, M: int, rng: Rng, resample_per_step: bool = False
) -> PredictiveDistribution:
    """M dropout-enabled passes, last-step softmax averaged over passes.

    Masks are held fixed within a pass unless ``resample_per_step``.
    """
    _check_T(T)
    if M < 1:
        raise ConfigError("M must be >= 1")
    state = net.new_state()
    policy = "per_step" if resample_per_step else "per_pass"
    acc = None
    for _ in range(M):
        V = net.forward(x, "eval_dropout_on", rng, T=T, mask_policy=policy, state=state)
        p = softmax(V[-1])
        acc = p if acc is None else acc + p
    return PredictiveDistribution(acc / M, "MC_DROPOUT", state.step_eval_counter, M, T)


def predict_ensemble(nets: Sequence[Network], x: np.ndarray, T: int) -> PredictiveDistribution:
    _check_T(T)
    if not nets:
        raise ConfigError("ensemble is empty")
    k = {n.config.num_classes for n in nets}
    if len(k) != 1:
        raise ConfigError("ensemble members disagree on the number of classes")
    members = [predict_lts(n, x, T) for n in nets]
    probs = sum(m.probs for m in members) / len(members)
    return PredictiveDistribution(probs, "ENSEMBLE", sum(m.step_evals_used for m in members), len(nets), T)


# ---------------------------------------------------------------------------
# temperature scaling
# ---------------------------------------------------------------------------


@dataclass
class TemperatureModel:
    temperature: float = 1.0

    def __post_init__(self):
        lo, hi = TEMP_RANGE
        if not lo <= self.temperature <= hi:
            raise ConfigError(f"temperature {self.temperature} outside [{lo}, {hi}]")

    def probs(self, logits: np.ndarray) -> np.ndarray:
        return softmax(np.asarray(logits) / self.temperature)


def scaled_nll(logits: np.ndarray, labels: np.ndarray, temperature: float) -> float:
    z = logits / temperature
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return float(np.mean(lse - z[np.arange(len(labels)), labels]))


def golden_section(f, lo: float, hi: float, tol: float = TEMP_TOL) -> float:
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def fit_temperature(logits_val, labels_val) -> TemperatureModel:
    """Single temperature minimizing validation NLL of ``softmax(logits / temperature)``.

    Never worse than the unscaled model: if the search does not beat
    temperature 1.0 strictly, 1.0 is returned.
    """
    logits = np.asarray(logits_val, dtype=float)
    labels = np.asarray(labels_val).reshape(-1).astype(np.int64)
    if logits.size == 0 or len(labels) == 0:
        raise ConfigError("validation set is empty")
    if logits.ndim != 2 or len(logits) != len(labels):
        raise ValueError("logits must be (N, K) with one label per row")
    f = lambda t: scaled_nll(logits, labels, t)  # noqa: E731
    t_star = golden_section(f, *TEMP_RANGE)
    if f(t_star) < f(1.0):
        return TemperatureModel(float(np.clip(t_star, *TEMP_RANGE)))
    return TemperatureModel(1.0)


def predict_temperature_scaled(net: Network, x: np.ndarray, T: int, model: TemperatureModel) -> PredictiveDistribution:
    _check_T(T)
    state = net.new_state()
    V = net.forward(x, "eval_dropout_off", Rng(0), T=T, state=state)
    return PredictiveDistribution(model.probs(V[-1]), "LTS_TEMP_SCALED", state.step_eval_counter, 1, T)


def last_step_logits(net: Network, x: np.ndarray, T: int) -> np.ndarray:
    return net.forward(x, "eval_dropout_off", Rng(0), T=T)[-1]
