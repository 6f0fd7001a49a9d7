"""MNIST/CIFAR-10 ingestion, normalization, input encoding and synthetic corruptions."""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy import ndimage

from .tensor import DTYPE, ConfigError, Rng

MNIST_MEAN = 0.1307
MNIST_STD = 0.3081

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class FormatError(ValueError):
    pass


class ConsistencyError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    """Images in [0, 1], shape ``(N, C, H, W)``, with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    name: str = ""
    num_classes: int = 10

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ConsistencyError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConsistencyError("labels outside [0, num_classes)")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx, name: str | None = None) -> Dataset:
        idx = np.asarray(idx)
        if idx.dtype != bool:
            idx = idx.astype(np.int64)
        return replace(self, images=self.images[idx], labels=self.labels[idx], name=name or self.name)

    def head(self, n: int) -> Dataset:
        return self.subset(np.arange(min(n, len(self))))

    def batches(self, batch_size: int, order: np.ndarray | None = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        order = np.arange(len(self)) if order is None else order
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            yield self.images[idx], self.labels[idx]


def _read_idx(path, expected_magic: int) -> tuple[tuple[int, ...], bytes]:
    blob = Path(path).read_bytes()
    if len(blob) < 8:
        raise FormatError(f"{path}: file too short for an IDX header ({len(blob)} bytes)")
    (magic,) = struct.unpack(">I", blob[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise FormatError(f"{path}: truncated header at byte {len(blob)}")
    dims = struct.unpack(f">{ndim}I", blob[4:header])
    need = header + int(np.prod(dims))
    if len(blob) < need:
        raise FormatError(f"{path}: truncated at byte {len(blob)}, expected {need}")
    return dims, blob[header:need]


def load_mnist_idx(images_path, labels_path, name: str = "mnist") -> Dataset:
    dims, raw = _read_idx(images_path, IDX_IMAGES)
    (n_labels,), raw_labels = _read_idx(labels_path, IDX_LABELS)
    if dims[0] != n_labels:
        raise ConsistencyError(f"{dims[0]} images vs {n_labels} labels")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(dims[0], 1, dims[1], dims[2]).astype(DTYPE) / 255.0
    labels = np.frombuffer(raw_labels, dtype=np.uint8).astype(np.int64)
    return Dataset(images, labels, name)


def load_mnist(root, split: str = "train") -> Dataset:
    img, lab = MNIST_FILES[split]
    root = Path(root)
    return load_mnist_idx(root / img, root / lab, name=f"mnist-{split}")


def save_mnist_idx(ds: Dataset, images_path, labels_path) -> None:
    """Write a single-channel dataset back to IDX (pixels rounded to bytes)."""
    if ds.images.shape[1] != 1:
        raise ConfigError("IDX export supports single-channel images only")
    n, _, h, w = ds.images.shape
    pix = np.clip(np.rint(ds.images[:, 0] * 255.0), 0, 255).astype(np.uint8)
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES, n, h, w) + pix.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS, n) + ds.labels.astype(np.uint8).tobytes())


def load_cifar10_batch(path) -> Dataset:
    """CIFAR-10 binary batch: records of 1 label byte + 3072 pixel bytes."""
    blob = Path(path).read_bytes()
    rec = 1 + 3072
    if not blob or len(blob) % rec:
        raise FormatError(f"{path}: size {len(blob)} is not a multiple of {rec}")
    arr = np.frombuffer(blob, dtype=np.uint8).reshape(-1, rec)
    images = arr[:, 1:].reshape(-1, 3, 32, 32).astype(DTYPE) / 255.0
    return Dataset(images, arr[:, 0].astype(np.int64), name=Path(path).stem)


def normalize(images: np.ndarray, mean: float = MNIST_MEAN, std: float = MNIST_STD) -> np.ndarray:
    return (images - mean) / std


def check_mnist_constants(train: Dataset, tol: float = 5e-4) -> tuple[float, float]:
    """Recompute pixel mean/std of the full training set and compare to the canonical constants."""
    mean, std = float(train.images.mean()), float(train.images.std())
    if abs(mean - MNIST_MEAN) > tol or abs(std - MNIST_STD) > tol:
        raise ConsistencyError(f"training pixel stats {mean:.4f}/{std:.4f} differ from {MNIST_MEAN}/{MNIST_STD}")
    return mean, std


def encode_current(images: np.ndarray, T: int) -> list[np.ndarray]:
    """Direct current injection: the same image is the input current at every step."""
    if T < 1:
        raise ConfigError("T must be >= 1")
    return [images] * T


# ---------------------------------------------------------------------------
# corruptions
# ---------------------------------------------------------------------------

SEVERITY_TABLE: dict[str, tuple[float, ...]] = {
    "gaussian_noise": (0.04, 0.08, 0.12, 0.18, 0.26),  # noise std
    "impulse_noise": (0.01, 0.02, 0.03, 0.05, 0.08),  # fraction of pixels flipped to 0 or 1
    "gaussian_blur": (1, 2, 3, 4, 5),  # 3x3 box-blur passes
    "brightness": (0.1, 0.2, 0.3, 0.4, 0.5),  # additive offset
    "rotation": (5, 10, 15, 20, 25),  # degrees
}
CORRUPTIONS = tuple(SEVERITY_TABLE)


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int

    def __post_init__(self):
        if self.kind not in SEVERITY_TABLE:
            raise ConfigError(f"unknown corruption {self.kind!r}; choose from {', '.join(CORRUPTIONS)}")
        if self.severity not in (1, 2, 3, 4, 5):
            raise ConfigError(f"severity must be 1..5, got {self.severity}")

    @property
    def level(self) -> float:
        return SEVERITY_TABLE[self.kind][self.severity - 1]

    @classmethod
    def parse(cls, text: str) -> CorruptionSpec:
        kind, _, sev = text.partition(":")
        try:
            return cls(kind, int(sev))
        except ValueError as exc:
            raise ConfigError(f"bad corruption spec {text!r}, expected kind:severity") from exc


def _rotate(images: np.ndarray, degrees: float, rng: Rng) -> np.ndarray:
    # alternate the direction per image so the shift is not a consistent bias
    signs = np.where(rng.random(len(images)) < 0.5, -1.0, 1.0)
    out = np.empty_like(images)
    for i, (img, sgn) in enumerate(zip(images, signs)):
        out[i] = ndimage.rotate(img, sgn * degrees, axes=(1, 2), reshape=False, order=1, mode="constant")
    return out


def corrupt(ds: Dataset, spec: CorruptionSpec, rng: Rng) -> Dataset:
    """Apply one corruption at one severity; output pixels are clipped to [0, 1]."""
    x = ds.images
    level = spec.level
    if spec.kind == "gaussian_noise":
        out = x + rng.normal(x.shape, scale=level)
    elif spec.kind == "impulse_noise":
        u = rng.random(x.shape)
        salt = rng.random(x.shape) < 0.5
        out = np.where(u < level, salt.astype(DTYPE), x)
    elif spec.kind == "gaussian_blur":
        out = x
        for _ in range(int(level)):
            out = ndimage.uniform_filter(out, size=(1, 1, 3, 3), mode="constant")
    elif spec.kind == "brightness":
        out = x + level
    elif spec.kind == "rotation":
        out = _rotate(x, level, rng)
    else:  # pragma: no cover - guarded by CorruptionSpec
        raise ConfigError(spec.kind)
    return replace(ds, images=np.clip(out, 0.0, 1.0), name=f"{ds.name}-{spec.kind}-{spec.severity}")
