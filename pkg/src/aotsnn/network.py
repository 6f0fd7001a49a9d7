"""Spiking encoder + classifier assembly, the time loop, and checkpoint I/O.

Topology::

    encoder:    [conv3x3 -> batchnorm -> spiking -> dropout] x n, avgpool2   (per downsampling module)
    classifier: flatten -> linear -> spiking -> dropout -> linear -> readout

With ``dropout_kind="drop_connect"`` the dropout layers are omitted and the
weights of every layer feeding a spiking layer are masked instead.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from .layers import (
    AvgPool,
    BatchNorm,
    Conv2d,
    Dropout,
    Flatten,
    Layer,
    Linear,
    MaskPolicy,
    Mode,
    Plif,
    Readout,
    RunContext,
    check_rate,
)
from .neurons import DEFAULT_ALPHA, DEFAULT_DECAY, DEFAULT_THETA, LifParams, SurrogateParams
from .tensor import DTYPE, ConfigError, DimensionError, Rng, StateError, Tensor, logit

DropoutKind = Literal["spike_dropout", "drop_connect"]
MAGIC = b"AOTSNN01"

LAYER_KINDS = ("conv_block", "avgpool", "linear", "spiking", "readout", "dropout", "dropconnect", "batchnorm", "flatten")


class CheckpointError(ValueError):
    pass


@dataclass
class LayerSpec:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        rate = self.params.get("rate")
        if rate is not None:
            check_rate(rate)


@dataclass
class NetworkConfig:
    input_shape: tuple[int, int, int] = (1, 28, 28)
    encoder: list[list[int]] = field(default_factory=lambda: [[16], [32]])
    hidden: int = 128
    num_classes: int = 10
    T: int = 8
    dropout_kind: DropoutKind = "spike_dropout"
    dropout_rate: float = 0.5
    theta: float = DEFAULT_THETA
    init_decay: float = DEFAULT_DECAY
    learnable_decay: bool = True
    reset_timing: str = "lagged"
    surrogate_alpha: float = DEFAULT_ALPHA
    readout_decay: float = 1.0
    input_mean: float = 0.1307
    input_std: float = 0.3081

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.encoder = [[int(c) for c in module] for module in self.encoder]
        if self.T < 1:
            raise ConfigError("T must be >= 1")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.dropout_kind not in ("spike_dropout", "drop_connect"):
            raise ConfigError(f"unknown dropout_kind {self.dropout_kind!r}")
        check_rate(self.dropout_rate)
        if len(self.input_shape) != 3:
            raise ConfigError("input_shape must be (C, H, W)")
        if any(len(m) == 0 for m in self.encoder):
            raise ConfigError("every downsampling module needs at least one conv block")

    def layer_specs(self) -> list[LayerSpec]:
        specs: list[LayerSpec] = []
        dc = self.dropout_kind == "drop_connect"
        c_in = self.input_shape[0]
        for module in self.encoder:
            for c_out in module:
                specs.append(LayerSpec("conv_block", {"c_in": c_in, "c_out": c_out}))
                if dc:
                    specs.append(LayerSpec("dropconnect", {"rate": self.dropout_rate}))
                else:
                    specs.append(LayerSpec("dropout", {"rate": self.dropout_rate}))
                c_in = c_out
            specs.append(LayerSpec("avgpool"))
        specs.append(LayerSpec("flatten"))
        specs.append(LayerSpec("linear", {"n_out": self.hidden}))
        specs.append(LayerSpec("spiking"))
        specs.append(LayerSpec("dropconnect" if dc else "dropout", {"rate": self.dropout_rate}))
        specs.append(LayerSpec("linear", {"n_out": self.num_classes}))
        specs.append(LayerSpec("readout", {"decay": self.readout_decay}))
        return specs

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d


def mnist_config(**overrides) -> NetworkConfig:
    """Two downsampling modules with one conv block each."""
    return NetworkConfig(**{"input_shape": (1, 28, 28), "encoder": [[16], [32]], **overrides})


def cifar_config(channels: int = 128, num_classes: int = 10, **overrides) -> NetworkConfig:
    """Two downsampling modules with three conv blocks each."""
    base = {
        "input_shape": (3, 32, 32),
        "encoder": [[channels] * 3, [channels] * 3],
        "hidden": 256,
        "num_classes": num_classes,
    }
    return NetworkConfig(**{**base, **overrides})


@dataclass
class NetworkState:
    """Per-pass mutable state for step-major inference."""

    slots: list[dict]
    step_eval_counter: int = 0
    mask_policy: MaskPolicy = "per_step"

    def reset(self) -> None:
        for slot in self.slots:
            slot.clear()


class Network:
    def __init__(self, config: NetworkConfig, layers: list[Layer], specs: list[LayerSpec]):
        self.config = config
        self.layers = layers
        self.specs = specs
        self._recorded_T: int | None = None

    # -- parameters -------------------------------------------------------

    def params(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.params()]

    def buffers(self) -> list[Tensor]:
        return [b for layer in self.layers for b in layer.buffers()]

    def state_tensors(self) -> list[Tensor]:
        """Every array a checkpoint must hold, in layer order."""
        out = []
        for layer in self.layers:
            out.extend(layer.params())
            out.extend(layer.buffers())
        return out

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def plif_layers(self) -> list[Plif]:
        return [layer for layer in self.layers if isinstance(layer, Plif)]

    def encoder_output_shape(self) -> tuple[int, ...]:
        shape = self.config.input_shape
        for layer in self.layers:
            if isinstance(layer, Flatten):
                return shape
            shape = layer.output_shape(shape)
        return shape

    # -- time loop --------------------------------------------------------

    def normalize(self, x: np.ndarray) -> np.ndarray:
        """Raw [0, 1] pixels to the standardized input current."""
        return (x - self.config.input_mean) / self.config.input_std

    def new_state(self, mask_policy: MaskPolicy = "per_step") -> NetworkState:
        return NetworkState([{} for _ in self.layers], 0, mask_policy)

    def forward(
        self,
        x: np.ndarray,
        mode: Mode,
        rng: Rng,
        *,
        T: int | None = None,
        mask_policy: MaskPolicy = "per_step",
        record: bool = False,
        state: NetworkState | None = None,
    ) -> np.ndarray:
        """Run all T steps layer by layer. Returns readout potentials ``(T, N, K)``.

        The same image is injected as input current at every step, so the
        input enters as a time-constant ``(1, N, C, H, W)`` sequence.
        """
        T = self.config.T if T is None else T
        x = np.asarray(x, dtype=DTYPE)
        if x.ndim == 3:
            x = x[None]
        if x.shape[1:] != self.config.input_shape:
            raise DimensionError(f"network expects inputs {self.config.input_shape}, got {x.shape[1:]}")
        run = RunContext(T, mode, rng, mask_policy, record)
        h = self.normalize(x)[None]
        for layer in self.layers:
            h = layer.forward(h, run)
        if h.shape[0] != T:
            h = np.broadcast_to(h, (T, *h.shape[1:])).copy()
        self._recorded_T = T if record else None
        if state is not None:
            state.step_eval_counter += T
        return h

    def backward(self, grad_potentials: np.ndarray) -> np.ndarray:
        """Backpropagate dL/dV (shape ``(T, N, K)``) through time; accumulates parameter grads."""
        if self._recorded_T is None:
            raise StateError("backward needs a preceding forward(..., record=True)")
        if grad_potentials.shape[0] != self._recorded_T:
            raise DimensionError("gradient time extent does not match the recorded forward")
        g = grad_potentials
        for layer in reversed(self.layers):
            g = layer.backward(g)
            if g is None:
                break
        return g

    def forward_step(
        self,
        x: np.ndarray,
        state: NetworkState,
        mode: Mode,
        rng: Rng,
        resample_masks: bool = True,
    ) -> np.ndarray:
        """Advance every layer by one time step; returns readout potentials ``(N, K)``.

        Masks are redrawn at each step when ``resample_masks`` is true and
        drawn once per pass otherwise (call ``state.reset()`` between passes).
        Step-major execution records no backward context, so train mode is refused.
        """
        if mode == "train":
            raise StateError("forward_step keeps no gradient context; train with Network.forward(record=True)")
        x = np.asarray(x, dtype=DTYPE)
        if x.ndim == 3:
            x = x[None]
        policy: MaskPolicy = "per_step" if resample_masks else "per_pass"
        run = RunContext(1, mode, rng, policy, False)
        h = self.normalize(x)
        for layer, slot in zip(self.layers, state.slots):
            h = layer.step(h, slot, run)
        state.step_eval_counter += 1
        return h

    # -- checkpoints ------------------------------------------------------

    def manifest(self) -> dict:
        return {
            "format": 1,
            "config": self.config.to_dict(),
            "layers": [{"kind": s.kind, "params": s.params} for s in self.specs],
            "tensors": [{"name": t.name, "shape": list(t.shape)} for t in self.state_tensors()],
            "byte_order": "little",
        }

    def to_bytes(self) -> bytes:
        man = json.dumps(self.manifest(), sort_keys=True).encode()
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<Q", len(man)))
        buf.write(man)
        for t in self.state_tensors():
            buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    @classmethod
    def from_bytes(cls, blob: bytes) -> Network:
        if blob[:8] != MAGIC:
            raise CheckpointError("not an AOTSNN01 checkpoint")
        if len(blob) < 16:
            raise CheckpointError("truncated header")
        (n,) = struct.unpack("<Q", blob[8:16])
        try:
            man = json.loads(blob[16 : 16 + n])
        except (ValueError, UnicodeDecodeError) as exc:
            raise CheckpointError(f"bad manifest: {exc}") from exc
        net = build_network(NetworkConfig(**man["config"]), Rng(0))
        tensors = net.state_tensors()
        if [list(t.shape) for t in tensors] != [e["shape"] for e in man["tensors"]]:
            raise CheckpointError("tensor shapes in manifest do not match the configured network")
        off = 16 + n
        for t in tensors:
            nbytes = t.size * 8
            if off + nbytes > len(blob):
                raise CheckpointError(f"truncated weight blob at byte {off}")
            t.data = np.frombuffer(blob[off : off + nbytes], dtype="<f8").astype(DTYPE).reshape(t.shape)
            off += nbytes
        if off != len(blob):
            raise CheckpointError(f"{len(blob) - off} trailing bytes")
        return net

    @classmethod
    def load(cls, path) -> Network:
        return cls.from_bytes(Path(path).read_bytes())

    def clone(self) -> Network:
        return Network.from_bytes(self.to_bytes())


def build_network(config: NetworkConfig, rng: Rng) -> Network:
    """Instantiate and initialize the layers described by ``config``."""
    lif = LifParams(config.theta, logit(config.init_decay), config.learnable_decay, config.reset_timing)
    sur = SurrogateParams(config.surrogate_alpha)
    dc_rate = config.dropout_rate if config.dropout_kind == "drop_connect" else 0.0
    layers: list[Layer] = []
    shape: tuple[int, ...] = config.input_shape
    specs = config.layer_specs()
    for idx, spec in enumerate(specs):
        where = f"layer {idx} ({spec.kind})"
        try:
            if spec.kind == "conv_block":
                conv = Conv2d(spec.params["c_in"], spec.params["c_out"], rng, dropconnect=dc_rate)
                shape = conv.output_shape(shape)
                layers += [conv, BatchNorm(spec.params["c_out"]), Plif(lif, sur)]
            elif spec.kind == "dropout":
                layers.append(Dropout(spec.params["rate"]))
            elif spec.kind == "dropconnect":
                pass  # realized inside the preceding weight layer
            elif spec.kind == "avgpool":
                pool = AvgPool()
                shape = pool.output_shape(shape)
                layers.append(pool)
            elif spec.kind == "flatten":
                fl = Flatten()
                shape = fl.output_shape(shape)
                layers.append(fl)
            elif spec.kind == "linear":
                feeds_spiking = idx + 1 < len(specs) and specs[idx + 1].kind == "spiking"
                lin = Linear(shape[0], spec.params["n_out"], rng, dropconnect=dc_rate if feeds_spiking else 0.0)
                shape = lin.output_shape(shape)
                layers.append(lin)
            elif spec.kind == "spiking":
                layers.append(Plif(lif, sur))
            elif spec.kind == "readout":
                layers.append(Readout(spec.params.get("decay", 1.0)))
            else:
                raise ConfigError(f"{spec.kind} cannot be placed here")
        except (DimensionError, ConfigError) as exc:
            raise ConfigError(f"{where}: {exc}") from exc
    first = next((layer for layer in layers if isinstance(layer, Conv2d)), None)
    if first is not None:
        first.need_input_grad = False
    if shape != (config.num_classes,):
        raise ConfigError(f"classifier ends with {shape}, expected ({config.num_classes},)")
    names = {}
    for layer_idx, layer in enumerate(layers):
        for t in layer.params() + layer.buffers():
            base = f"{layer_idx}.{t.name}"
            names[base] = names.get(base, 0) + 1
            t.name = base
    return Network(config, layers, specs)
