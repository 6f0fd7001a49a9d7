"""Per-step loss, last-step / average-over-time objectives, Adam, cosine schedule and the training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Literal

import numpy as np

from .network import Network
from .tensor import ConfigError, DimensionError, NumericError, Rng, Tensor, softmax, softmax_backward

log = logging.getLogger(__name__)

LossMode = Literal["AOT", "LTS"]
LossTarget = Literal["softmax_mse", "potential_mse"]


class DivergenceError(NumericError):
    pass


@dataclass
class TrainConfig:
    loss_mode: LossMode = "AOT"
    epochs: int = 10
    batch_size: int = 150
    lr0: float = 1e-3
    t_max: int = 64
    seed: int = 1
    loss_target: LossTarget = "softmax_mse"
    grad_clip: float | None = None

    def __post_init__(self):
        if self.loss_mode not in ("AOT", "LTS"):
            raise ConfigError(f"loss_mode must be AOT or LTS, got {self.loss_mode!r}")
        if self.loss_target not in ("softmax_mse", "potential_mse"):
            raise ConfigError(f"unknown loss_target {self.loss_target!r}")
        if self.lr0 <= 0:
            raise ConfigError("lr0 must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.t_max < 1:
            raise ConfigError("t_max must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch norm statistics)")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _onehot(labels: np.ndarray, k: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range for {k} classes")
    out = np.zeros((labels.size, k))
    out[np.arange(labels.size), labels.reshape(-1)] = 1.0
    return out


def per_step_loss_and_grad(potentials: np.ndarray, labels, target: LossTarget = "softmax_mse") -> tuple[float, np.ndarray]:
    """Batch-mean MSE at one step and its gradient w.r.t. the potentials ``(N, K)``."""
    v = np.atleast_2d(np.asarray(potentials, dtype=float))
    n, k = v.shape
    if k < 2:
        raise DimensionError("need at least two classes")
    y = _onehot(np.atleast_1d(labels), k)
    if len(y) != n:
        raise DimensionError(f"{n} potential rows but {len(y)} labels")
    if target == "softmax_mse":
        p = softmax(v)
        diff = p - y
        loss = float(np.mean(np.sum(diff**2, axis=1) / k))
        grad = softmax_backward(p, 2.0 * diff / (k * n))
    else:
        diff = v - y
        loss = float(np.mean(np.sum(diff**2, axis=1) / k))
        grad = 2.0 * diff / (k * n)
    return loss, grad.reshape(np.shape(potentials))


def per_step_loss(potentials, label, target: LossTarget = "softmax_mse") -> float:
    """l(t) = (1/K) * sum_k (softmax(V_t)_k - onehot(label)_k)^2, averaged over a batch."""
    return per_step_loss_and_grad(potentials, label, target)[0]


def total_loss(per_step_losses, mode: LossMode) -> float:
    losses = list(per_step_losses)
    if not losses:
        raise ValueError("need at least one per-step loss")
    if mode == "AOT":
        return float(sum(losses) / len(losses))
    if mode == "LTS":
        return float(losses[-1])
    raise ConfigError(f"unknown loss mode {mode!r}")


def loss_and_injection(
    potentials: np.ndarray, labels, mode: LossMode, target: LossTarget = "softmax_mse"
) -> tuple[float, np.ndarray]:
    """Objective over a ``(T, N, K)`` sequence and dL/dV_t for every step.

    AOT injects (1/T)*dl(t)/dV_t at every step; LTS only at the last one.
    """
    T = potentials.shape[0]
    grad = np.zeros_like(potentials)
    if mode == "LTS":
        loss, grad[-1] = per_step_loss_and_grad(potentials[-1], labels, target)
        return loss, grad
    losses = []
    for t in range(T):
        l_t, g_t = per_step_loss_and_grad(potentials[t], labels, target)
        losses.append(l_t)
        grad[t] = g_t / T
    return total_loss(losses, "AOT"), grad


def bptt_backward(net: Network, potentials: np.ndarray, labels, mode: LossMode, target: LossTarget = "softmax_mse") -> float:
    """Inject the loss gradient at the appropriate steps and backpropagate through time.

    ``potentials`` must come from ``net.forward(..., record=True)``. Gradients
    accumulate into each parameter's ``grad``; the loss value is returned.
    """
    loss, inj = loss_and_injection(potentials, labels, mode, target)
    net.backward(inj)
    return loss


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------


class Adam:
    def __init__(self, params: list[Tensor], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, lr: float) -> None:
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        for p, g in zip(self.params, grads):
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {p.name}; step aborted")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_update(params: list[Tensor], grads: list[np.ndarray], state: Adam, lr: float) -> list[Tensor]:
    for p, g in zip(params, grads):
        if p.shape != np.shape(g):
            raise DimensionError(f"{p.name}: grad {np.shape(g)} vs param {p.shape}")
        p.grad = np.asarray(g, dtype=float)
    state.step(lr)
    return params


def cosine_lr(epoch: int, lr0: float, t_max: int, lr_min: float = 0.0) -> float:
    if t_max <= 0:
        raise ConfigError("t_max must be positive")
    if epoch < 0:
        raise ConfigError("epoch must be >= 0")
    phase = (epoch % (2 * t_max)) / t_max
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * phase))


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(p.grad**2)) for p in params if p.grad is not None))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def train(net: Network, dataset, config: TrainConfig, eval_dataset=None, log_path=None, eval_fn=None):
    """Train ``net`` in place. Returns ``(net, records)`` with one record per epoch.

    ``eval_fn(net, dataset, epoch) -> dict`` supplies per-epoch evaluation
    metrics; without it only the training loss is logged.
    """
    if len(dataset) == 0:
        raise ConfigError("training set is empty")
    root = Rng(config.seed)
    order_rng = root.stream("data-order")
    dropout_rng = root.stream("dropout")
    params = net.params()
    opt = Adam(params)
    records = []
    fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(config.epochs):
            lr = cosine_lr(epoch, config.lr0, config.t_max)
            order = order_rng.permutation(len(dataset))
            total, seen = 0.0, 0
            for b, (x, y) in enumerate(dataset.batches(config.batch_size, order)):
                if len(y) < 2:
                    continue
                net.zero_grad()
                V = net.forward(x, "train", dropout_rng, record=True)
                loss = bptt_backward(net, V, y, config.loss_mode, config.loss_target)
                if not math.isfinite(loss):
                    raise DivergenceError(f"loss became {loss} at epoch {epoch}, batch {b}")
                if config.grad_clip:
                    clip_grad_norm(params, config.grad_clip)
                try:
                    opt.step(lr)
                except NumericError as exc:
                    raise DivergenceError(f"epoch {epoch}, batch {b}: {exc}") from exc
                total += loss * len(y)
                seen += len(y)
            rec = {"epoch": epoch, "lr": lr, "train_loss": total / max(seen, 1)}
            if eval_fn is not None and eval_dataset is not None:
                rec.update(eval_fn(net, eval_dataset, epoch))
            records.append(rec)
            log.info("epoch %d lr %.2e loss %.5f %s", epoch, lr, rec["train_loss"], rec.get("test_acc", ""))
            if fh:
                fh.write(json.dumps(rec) + "\n")
                fh.flush()
    finally:
        if fh:
            fh.close()
    return net, records


def config_dict(cfg) -> dict:
    return asdict(cfg)


def write_log(records, path) -> None:
    Path(path).write_text("".join(json.dumps(r) + "\n" for r in records))
