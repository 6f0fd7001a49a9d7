"""Accuracy, Brier score, NLL, ECE and per-time-step metric curves."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .tensor import ConfigError, softmax

NLL_FLOOR = 1e-12
DEFAULT_BINS = 15
CSV_COLUMNS = ("model", "T", "passes", "acc", "brier", "nll", "ece", "step_evals")


def as_probs(preds) -> np.ndarray:
    """Stack predictive distributions (or arrays) into an ``(N, K)`` array."""
    if isinstance(preds, np.ndarray):
        return np.atleast_2d(preds)
    if hasattr(preds, "probs"):
        return np.atleast_2d(preds.probs)
    rows = [np.atleast_2d(p.probs if hasattr(p, "probs") else np.asarray(p, dtype=float)) for p in preds]
    if not rows:
        raise ValueError("no predictions")
    return np.concatenate(rows)


def _prepare(preds, labels, check: bool = True) -> tuple[np.ndarray, np.ndarray]:
    p = as_probs(preds).astype(float)
    y = np.asarray(labels).reshape(-1).astype(np.int64)
    if len(p) == 0:
        raise ValueError("empty prediction set")
    if len(p) != len(y):
        raise ValueError(f"{len(p)} predictions but {len(y)} labels")
    if y.min() < 0 or y.max() >= p.shape[1]:
        raise ValueError("label outside the predicted classes")
    if check and (np.any(p < -1e-12) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6)):
        raise ValueError("predictions are not probability distributions")
    return p, y


def accuracy(preds, labels) -> float:
    p, y = _prepare(preds, labels, check=False)
    # np.argmax returns the lowest index among ties
    return float(np.mean(np.argmax(p, axis=1) == y))


def brier(preds, labels) -> float:
    """Squared error to the one-hot label, averaged over classes and samples."""
    p, y = _prepare(preds, labels)
    k = p.shape[1]
    d = p.copy()
    d[np.arange(len(y)), y] -= 1.0
    return float(np.mean(np.sum(d * d, axis=1) / k))


def nll(preds, labels) -> float:
    p, y = _prepare(preds, labels)
    py = np.maximum(p[np.arange(len(y)), y], NLL_FLOOR)
    return float(np.mean(-np.log(py)))


@dataclass
class ReliabilityBin:
    lower: float
    upper: float
    count: int
    confidence: float  # mean max-probability in the bin (0 when empty)
    accuracy: float  # fraction correct in the bin (0 when empty)


def ece(preds, labels, n_bins: int = DEFAULT_BINS) -> tuple[float, list[ReliabilityBin]]:
    """Expected calibration error over equal-width, right-closed confidence bins."""
    if n_bins < 1:
        raise ConfigError("n_bins must be >= 1")
    p, y = _prepare(preds, labels)
    conf = p.max(axis=1)
    correct = (np.argmax(p, axis=1) == y).astype(float)
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    # bin m holds edges[m] < c <= edges[m+1]; c == 0 falls into the first bin
    idx = np.searchsorted(edges[1:-1], conf, side="left")
    n = len(y)
    total = 0.0
    bins = []
    for m in range(n_bins):
        sel = idx == m
        cnt = int(sel.sum())
        if cnt:
            c_m, a_m = float(conf[sel].mean()), float(correct[sel].mean())
            total += cnt / n * abs(a_m - c_m)
        else:
            c_m = a_m = 0.0
        bins.append(ReliabilityBin(float(edges[m]), float(edges[m + 1]), cnt, c_m, a_m))
    return float(total), bins


@dataclass
class CalibrationReport:
    accuracy: float
    brier: float
    nll: float
    ece: float
    n_samples: int
    bins: list[ReliabilityBin] = field(default_factory=list)

    def to_dict(self, with_bins: bool = True) -> dict:
        d = asdict(self)
        if not with_bins:
            d.pop("bins")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def csv_row(self, model: str, T: int, passes: int, step_evals: int, **extra) -> dict:
        row = {
            "model": model,
            "T": T,
            "passes": passes,
            "acc": self.accuracy,
            "brier": self.brier,
            "nll": self.nll,
            "ece": self.ece,
            "step_evals": step_evals,
        }
        row.update(extra)
        return row


def evaluate(preds, labels, n_bins: int = DEFAULT_BINS) -> CalibrationReport:
    e, bins = ece(preds, labels, n_bins)
    return CalibrationReport(accuracy(preds, labels), brier(preds, labels), nll(preds, labels), e, len(np.asarray(labels)), bins)


def rows_to_csv(rows: list[dict]) -> str:
    cols = list(CSV_COLUMNS) + sorted({k for r in rows for k in r} - set(CSV_COLUMNS))
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def per_step_probs(potentials: np.ndarray, kind: str = "AOT") -> np.ndarray:
    """``(T, N, K)`` potentials -> ``(T, N, K)`` distributions reported at each step.

    AOT: running mean of the per-step softmax up to t. LTS: softmax at step t.
    """
    p = softmax(potentials)
    if kind == "AOT":
        return np.cumsum(p, axis=0) / np.arange(1, p.shape[0] + 1)[:, None, None]
    if kind == "LTS":
        return p
    raise ConfigError(f"kind must be AOT or LTS, got {kind!r}")


def per_step_curves(net, dataset, T: int, rng, kind: str = "AOT", batch_size: int = 500, n_bins: int = DEFAULT_BINS):
    """One CalibrationReport per time step, for accuracy and calibration versus t.

    AOT runs with dropout on and uses the cumulative average distribution;
    LTS runs with dropout off and uses each step's own softmax.
    """
    mode = "eval_dropout_on" if kind == "AOT" else "eval_dropout_off"
    chunks = []
    for x, _ in dataset.batches(batch_size):
        V = net.forward(x, mode, rng, T=T)
        chunks.append(per_step_probs(V, kind))
    P = np.concatenate(chunks, axis=1)
    return [evaluate(P[t], dataset.labels, n_bins) for t in range(T)]
