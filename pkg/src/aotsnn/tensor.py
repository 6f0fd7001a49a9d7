"""Dense float64 numerics with paired forward/backward kernels.

There is no autodiff tape. Every differentiable operation comes as a
``<op>`` / ``<op>_backward`` pair; callers keep whatever forward context
the backward needs. Parameters live in :class:`Tensor`, which carries a
gradient buffer next to its data.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

DTYPE = np.float64


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A computation produced NaN or Inf."""


class StateError(RuntimeError):
    """An operation was called in the wrong lifecycle state."""


class ConfigError(ValueError):
    """A configuration value is out of range or inconsistent."""


@dataclass
class Tensor:
    """Float64 array plus an optional gradient buffer of the same shape."""

    data: np.ndarray
    grad: np.ndarray | None = None
    name: str = ""

    def __post_init__(self) -> None:
        self.data = np.ascontiguousarray(self.data, dtype=DTYPE)
        if self.grad is not None:
            self.grad = np.asarray(self.grad, dtype=DTYPE)
            if self.grad.shape != self.data.shape:
                raise DimensionError(
                    f"grad shape {self.grad.shape} != data shape {self.data.shape}"
                )

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise DimensionError(f"{self.name or 'tensor'}: grad {g.shape} vs data {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE)
        else:
            self.grad += g

    def copy(self) -> Tensor:
        return Tensor(self.data.copy(), None if self.grad is None else self.grad.copy(), self.name)


def _stream_seed(seed: int, name: str) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=seed & 0xFFFFFFFFFFFFFFFF, spawn_key=(zlib.crc32(name.encode()),))


@dataclass
class Rng:
    """Seeded PCG64 stream.

    PCG64 output is specified bit-for-bit by numpy and does not depend on
    the platform, so equal seeds give equal sequences everywhere. Named
    sub-streams (``rng.stream("dropout")``) are derived from the seed and
    the name only, never from how much the parent has been consumed.
    """

    seed: int
    name: str = "root"
    _gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        self._gen = np.random.Generator(np.random.PCG64(_stream_seed(self.seed, self.name)))

    def stream(self, name: str) -> Rng:
        return Rng(self.seed, f"{self.name}/{name}")

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def random(self, shape) -> np.ndarray:
        return self._gen.random(size=shape)

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def bernoulli_keep(self, shape, rate: float) -> np.ndarray:
        """Boolean keep-mask; each entry is dropped with probability ``rate``."""
        return self._gen.random(size=shape) >= rate

    @property
    def state(self) -> dict:
        return self._gen.bit_generator.state


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=DTYPE)


def check_finite(x: np.ndarray, what: str = "value") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite {what}")
    return x


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------


def matmul(a, b) -> np.ndarray:
    a, b = _arr(a), _arr(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b


def matmul_backward(a, b, grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a, b = _arr(a), _arr(b)
    return grad_out @ b.T, a.T @ grad_out


# ---------------------------------------------------------------------------
# conv2d: 3x3 kernel, stride 1, padding 1
# ---------------------------------------------------------------------------


def _batched(x: np.ndarray, ndim_single: int) -> tuple[np.ndarray, bool]:
    if x.ndim == ndim_single:
        return x[None], True
    return x, False


_TAPS = [(dy, dx) for dy in range(3) for dx in range(3)]


def im2col(x: np.ndarray) -> np.ndarray:
    """``(N, C, H, W)`` -> ``(N*H*W, 9*C)`` patch matrix, tap-major then channel."""
    n, c, h, w = x.shape
    padded = np.zeros((n, h + 2, w + 2, c), dtype=DTYPE)
    padded[:, 1:-1, 1:-1, :] = x.transpose(0, 2, 3, 1)
    cols = np.empty((n, h, w, 9, c), dtype=DTYPE)
    for i, (dy, dx) in enumerate(_TAPS):
        cols[:, :, :, i, :] = padded[:, dy : dy + h, dx : dx + w, :]
    return cols.reshape(n * h * w, 9 * c)


def _kernel_matrix(k: np.ndarray) -> np.ndarray:
    # (C_out, C_in, 3, 3) -> (9*C_in, C_out) matching the im2col column order
    return k.transpose(2, 3, 1, 0).reshape(-1, k.shape[0])


def _check_conv(x: np.ndarray, k: np.ndarray) -> tuple[np.ndarray, bool]:
    if k.ndim != 4 or k.shape[2:] != (3, 3):
        raise DimensionError(f"conv2d: kernels must be (C_out, C_in, 3, 3), got {k.shape}")
    xb, single = _batched(x, 3)
    if xb.ndim != 4 or xb.shape[1] != k.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} has wrong channel count for kernels {k.shape}")
    return xb, single


def conv2d_cols(cols: np.ndarray, k: np.ndarray, n: int, h: int, w: int) -> np.ndarray:
    out = cols @ _kernel_matrix(k)
    return np.ascontiguousarray(out.reshape(n, h, w, -1).transpose(0, 3, 1, 2))


def conv2d(x, kernels) -> np.ndarray:
    """Same-size 3x3 convolution (cross-correlation), stride 1, padding 1.

    Accepts ``(C_in, H, W)`` or a batch ``(N, C_in, H, W)``.
    """
    x, k = _arr(x), _arr(kernels)
    xb, single = _check_conv(x, k)
    n, _, h, w = xb.shape
    out = conv2d_cols(im2col(xb), k, n, h, w)
    return out[0] if single else out


def conv2d_backward_cols(cols: np.ndarray, k: np.ndarray, grad_out: np.ndarray, need_input_grad: bool = True):
    gb, single = _batched(grad_out, 3)
    n, c_out, h, w = gb.shape
    c_in = k.shape[1]
    g_rows = gb.transpose(0, 2, 3, 1).reshape(-1, c_out)
    grad_k = (cols.T @ g_rows).reshape(3, 3, c_in, c_out).transpose(3, 2, 0, 1)
    grad_k = np.ascontiguousarray(grad_k)
    if not need_input_grad:
        return None, grad_k
    g_cols = (g_rows @ _kernel_matrix(k).T).reshape(n, h, w, 9, c_in)
    padded = np.zeros((n, h + 2, w + 2, c_in), dtype=DTYPE)
    for i, (dy, dx) in enumerate(_TAPS):
        padded[:, dy : dy + h, dx : dx + w, :] += g_cols[:, :, :, i, :]
    gx = np.ascontiguousarray(padded[:, 1:-1, 1:-1, :].transpose(0, 3, 1, 2))
    return (gx[0] if single else gx), grad_k


def conv2d_backward(x, kernels, grad_out: np.ndarray, need_input_grad: bool = True):
    """Return (d input, d kernels) for :func:`conv2d`; d input is ``None`` if not requested."""
    x, k = _arr(x), _arr(kernels)
    xb, _ = _check_conv(x, k)
    return conv2d_backward_cols(im2col(xb), k, grad_out, need_input_grad)


# ---------------------------------------------------------------------------
# 2x2 average pooling, stride 2
# ---------------------------------------------------------------------------


def avgpool2(x) -> np.ndarray:
    x = _arr(x)
    h, w = x.shape[-2:]
    if x.ndim < 2 or h % 2 or w % 2:
        raise DimensionError(f"avgpool2: spatial dims must be even, got {x.shape}")
    lead = x.shape[:-2]
    return x.reshape(*lead, h // 2, 2, w // 2, 2).mean(axis=(-3, -1))


def avgpool2_backward(grad_out: np.ndarray) -> np.ndarray:
    g = np.repeat(np.repeat(grad_out, 2, axis=-2), 2, axis=-1)
    return g * 0.25


# ---------------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------------


def softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    z = v - v.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(p: np.ndarray, grad_p: np.ndarray, axis: int = -1) -> np.ndarray:
    return p * (grad_p - (grad_p * p).sum(axis=axis, keepdims=True))


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=DTYPE)))


def logit(p: float) -> float:
    return float(np.log(p / (1.0 - p)))


# ---------------------------------------------------------------------------
# finite differences (test oracle)
# ---------------------------------------------------------------------------


def finite_difference_grad(f: Callable[[np.ndarray], float], x, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``x`` is perturbed in place one element at a time and restored, so
    ``f`` may close over the very array being differentiated.
    """
    if eps <= 0:
        raise ConfigError("eps must be positive")
    arr = x.data if isinstance(x, Tensor) else x
    if not isinstance(arr, np.ndarray) or arr.dtype != DTYPE:
        raise DimensionError("finite_difference_grad needs a float64 ndarray or Tensor")
    grad = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"f is non-finite near element {i}")
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad
