"""Architecture description, shape bookkeeping, and the assembled network.

An architecture is data: a stack of conv stages (each optionally followed
by 2x2x2 max pooling), a flatten, hidden dense layers, and a dense output
head.  ``shape_trace`` walks the stack symbolically so flatten dimensions
and per-stage extents can be checked without touching any arrays.

Pooling requests are honored only while the spatial extent is at least 2;
a 1-voxel map passes through unpooled.  Hidden dense layers default to
ReLU; saturating activations there stall the optimizer long before the
conv stack has learned anything.  The output head defaults to a sigmoid,
matching labels scaled into (0, 1); set ``output_activation`` to
"identity" to regress unscaled targets.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..errors import InvalidConfig, ShapeMismatch
from .layers import ACTIVATIONS, Conv3D, Dense, Flatten, MaxPool3D


@dataclass(frozen=True)
class ConvSpec:
    channels: int
    filter_size: int = 5
    pool: bool = True
    trainable: bool = True

    def __post_init__(self):
        if self.channels < 1:
            raise InvalidConfig(f"conv channels must be >= 1, got {self.channels}")
        if self.filter_size < 1 or self.filter_size % 2 == 0:
            raise InvalidConfig(f"filter size must be a positive odd integer, got {self.filter_size}")


@dataclass(frozen=True)
class FcSpec:
    width: int
    trainable: bool = True

    def __post_init__(self):
        if self.width < 1:
            raise InvalidConfig(f"dense width must be >= 1, got {self.width}")


@dataclass(frozen=True)
class NetworkArch:
    input_n: int
    conv: tuple[ConvSpec, ...]
    fc: tuple[FcSpec, ...]
    output_dim: int = 12
    fc_activation: str = "relu"
    output_activation: str = "sigmoid"
    output_trainable: bool = True

    def __post_init__(self):
        if self.input_n < 1:
            raise InvalidConfig(f"input extent must be >= 1, got {self.input_n}")
        if not self.conv:
            raise InvalidConfig("need at least one conv stage")
        if self.output_dim < 1:
            raise InvalidConfig(f"output dimension must be >= 1, got {self.output_dim}")
        for name in (self.fc_activation, self.output_activation):
            if name not in ACTIVATIONS:
                raise InvalidConfig(f"unknown activation {name!r}; expected one of {ACTIVATIONS}")

    def to_json_dict(self) -> dict:
        return {
            "input_n": self.input_n,
            "conv": [
                {
                    "channels": c.channels,
                    "filter_size": c.filter_size,
                    "pool": c.pool,
                    "trainable": c.trainable,
                }
                for c in self.conv
            ],
            "fc": [{"width": f.width, "trainable": f.trainable} for f in self.fc],
            "output_dim": self.output_dim,
            "fc_activation": self.fc_activation,
            "output_activation": self.output_activation,
            "output_trainable": self.output_trainable,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "NetworkArch":
        return cls(
            input_n=int(data["input_n"]),
            conv=tuple(
                ConvSpec(
                    channels=int(c["channels"]),
                    filter_size=int(c["filter_size"]),
                    pool=bool(c["pool"]),
                    trainable=bool(c["trainable"]),
                )
                for c in data["conv"]
            ),
            fc=tuple(FcSpec(width=int(f["width"]), trainable=bool(f["trainable"])) for f in data["fc"]),
            output_dim=int(data["output_dim"]),
            fc_activation=str(data["fc_activation"]),
            output_activation=str(data["output_activation"]),
            output_trainable=bool(data["output_trainable"]),
        )


@dataclass(frozen=True)
class ShapeTrace:
    """Per-stage (label, channels, extent) plus the flatten width."""

    stages: tuple[tuple[str, int, int], ...]
    flatten_dim: int

    @property
    def extents(self) -> tuple[int, ...]:
        return tuple(e for _, _, e in self.stages)

    def __str__(self) -> str:
        parts = [f"{label}: {ch} x {e}^3" for label, ch, e in self.stages]
        parts.append(f"flatten: {self.flatten_dim}")
        return " -> ".join(parts)


def shape_trace(arch: NetworkArch) -> ShapeTrace:
    stages = [("input", 1, arch.input_n)]
    extent = arch.input_n
    channels = 1
    for i, spec in enumerate(arch.conv):
        extent = extent - spec.filter_size + 1
        if extent < 1:
            raise ShapeMismatch(
                f"conv{i} filter {spec.filter_size} does not fit extent "
                f"{extent + spec.filter_size - 1}"
            )
        channels = spec.channels
        stages.append((f"conv{i}", channels, extent))
        if spec.pool and extent >= 2:
            extent //= 2
            stages.append((f"pool{i}", channels, extent))
    return ShapeTrace(stages=tuple(stages), flatten_dim=channels * extent**3)


def case_study_arch(input_n: int = 101) -> NetworkArch:
    """Three conv stages (16, 16, 32 channels) and a (64, 32) dense stack."""
    return NetworkArch(
        input_n=input_n,
        conv=(ConvSpec(16), ConvSpec(16), ConvSpec(32)),
        fc=(FcSpec(64), FcSpec(32)),
    )


def desk_arch(input_n: int = 33) -> NetworkArch:
    """Two conv stages (8, 16 channels) and a (32, 16) dense stack; sized
    for quick turnaround on 33-voxel grids."""
    return NetworkArch(
        input_n=input_n,
        conv=(ConvSpec(8), ConvSpec(16)),
        fc=(FcSpec(32), FcSpec(16)),
    )


def transfer_arch(
    base: NetworkArch,
    added_channels: int = 32,
    filter_size: int = 5,
    trainable_scope: str = "last_fc",
) -> NetworkArch:
    """Derive a fine-tuning architecture from a trained base.

    The base conv stack is kept (frozen) and one new trainable conv stage
    is appended; the dense stack keeps its widths but is re-dimensioned by
    the new flatten width.  ``trainable_scope`` picks which dense layers
    learn: "last_fc" (default) trains only the last hidden layer and the
    output head, "all_fc" trains every dense layer, "all" unfreezes the
    base conv stack as well.
    """
    if trainable_scope not in ("last_fc", "all_fc", "all"):
        raise InvalidConfig(f"unknown trainable_scope {trainable_scope!r}")
    base_frozen = trainable_scope != "all"
    conv = tuple(replace(c, trainable=not base_frozen) for c in base.conv)
    conv += (ConvSpec(added_channels, filter_size, pool=True, trainable=True),)
    if trainable_scope == "last_fc":
        fc = tuple(
            replace(f, trainable=(i == len(base.fc) - 1)) for i, f in enumerate(base.fc)
        )
    else:
        fc = tuple(replace(f, trainable=True) for f in base.fc)
    arch = replace(base, conv=conv, fc=fc, output_trainable=True)
    shape_trace(arch)  # raises if the extra stage does not fit
    return arch


class Network:
    """The layer stack with flat parameter access.

    Parameter order (used by optimizers and checkpoints): conv weights and
    bias per stage in order, then each hidden dense layer, then the output
    head.  Input grids enter as (B, 1, n, n, n) in the working dtype.
    """

    def __init__(self, arch: NetworkArch, layers: list, dtype):
        self.arch = arch
        self.layers = layers
        self.dtype = dtype
        self.trace = shape_trace(arch)
        for layer in layers:
            if isinstance(layer, Conv3D):
                layer.first_layer = layer is layers[0]
                break

    @classmethod
    def initialize(cls, arch: NetworkArch, seed: int, dtype=np.float32) -> "Network":
        """Build with uniform(-sqrt(6/fan_in), +sqrt(6/fan_in)) weights and
        zero biases, drawn layer by layer from one PCG64 stream."""
        rng = np.random.Generator(np.random.PCG64(seed))
        trace = shape_trace(arch)
        layers: list = []
        in_ch = 1
        extent = arch.input_n
        for spec in arch.conv:
            layers.append(
                Conv3D.create(rng, in_ch, spec.channels, spec.filter_size, dtype, spec.trainable)
            )
            extent = extent - spec.filter_size + 1
            in_ch = spec.channels
            if spec.pool and extent >= 2:
                layers.append(MaxPool3D())
                extent //= 2
        layers.append(Flatten())
        width = trace.flatten_dim
        for spec in arch.fc:
            layers.append(
                Dense.create(rng, width, spec.width, arch.fc_activation, dtype, spec.trainable)
            )
            width = spec.width
        layers.append(
            Dense.create(rng, width, arch.output_dim, arch.output_activation, dtype,
                         arch.output_trainable)
        )
        return cls(arch, layers, dtype)

    # -- passes ---------------------------------------------------------------

    def forward(self, x: np.ndarray, cache: bool = False) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x, cache=cache)
        return x

    def backward(self, grad_out: np.ndarray) -> None:
        grad = grad_out
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
            if grad is None:
                break

    def predict_grids(self, grids: np.ndarray, batch_size: int = 25) -> np.ndarray:
        """Forward occupancy grids (B, n, n, n) in evaluation batches."""
        grids = np.asarray(grids)
        if grids.ndim == 3:
            grids = grids[None]
        if grids.shape[1] != self.arch.input_n:
            raise ShapeMismatch(
                f"expected {self.arch.input_n}-voxel grids, got extent {grids.shape[1]}"
            )
        outs = []
        for lo in range(0, grids.shape[0], batch_size):
            x = grids[lo : lo + batch_size].astype(self.dtype)[:, None]
            outs.append(self.forward(x, cache=False))
        return np.concatenate(outs, axis=0)

    def conv_activations(self, grid: np.ndarray) -> list[np.ndarray]:
        """Post-ReLU activation volumes after each conv stage, batch of one."""
        x = np.asarray(grid).astype(self.dtype)[None, None]
        maps = []
        for layer in self.layers:
            x = layer.forward(x, cache=False)
            if isinstance(layer, Conv3D):
                maps.append(x[0])
        return maps

    # -- parameter plumbing ---------------------------------------------------

    def _param_layers(self) -> list:
        return [l for l in self.layers if isinstance(l, (Conv3D, Dense))]

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self._param_layers():
            out.append(layer.weights)
            out.append(layer.bias)
        return out

    def gradients(self) -> list[np.ndarray | None]:
        out = []
        for layer in self._param_layers():
            out.append(layer.grad_weights)
            out.append(layer.grad_bias)
        return out

    def trainable_mask(self) -> list[bool]:
        out = []
        for layer in self._param_layers():
            out.extend([layer.trainable, layer.trainable])
        return out

    def param_vector(self) -> np.ndarray:
        """All parameters as one float32 little-endian vector."""
        return np.concatenate([p.astype("<f4").ravel() for p in self.parameters()])

    def load_param_vector(self, vec: np.ndarray) -> None:
        params = self.parameters()
        total = sum(p.size for p in params)
        if vec.shape != (total,):
            raise ShapeMismatch(f"parameter vector has {vec.shape}, expected ({total},)")
        at = 0
        for p in params:
            p[...] = vec[at : at + p.size].reshape(p.shape).astype(p.dtype)
            at += p.size
