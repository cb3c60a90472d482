"""Network layers, written directly on numpy.

Array layout is channels-first throughout: activations have shape
(batch, channels, x, y, z) for volumetric layers and (batch, features)
after flattening.  Convolution is valid (no padding), stride 1, and applies
ReLU as part of the layer; dense layers take their activation by name.

Forward passes optionally cache what backward needs.  backward(grad) takes
the gradient w.r.t. the layer output and returns the gradient w.r.t. its
input, leaving parameter gradients on the layer (grad_weights, grad_bias).
Every reduction is an ordinary numpy GEMM or sum, so results are
reproducible bit for bit.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import InvalidConfig, ShapeMismatch

ACTIVATIONS = ("sigmoid", "relu", "identity")


def init_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> np.ndarray:
    """Symmetric uniform init with limit sqrt(6 / fan_in).

    Drawn in float64 and cast, so the realized values do not depend on the
    working dtype.
    """
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def sigmoid_pair(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """sigmoid(z) together with its complement sigmoid(-z).

    Each half is formed from the sign-split exponential, so both keep full
    relative precision however large |z| gets.  The complement matters for
    the derivative sigmoid(z) * sigmoid(-z): computing it as y * (1 - y)
    rounds to exactly zero once y rounds to 1, and a parameter whose
    gradient is exactly zero is permanently invisible to Adam (both moments
    decay and the step vanishes), so a unit that once saturates could never
    come back.  The paired form keeps the gradient tiny but truthful.
    """
    pos = z >= 0
    y = np.empty_like(z)
    comp = np.empty_like(z)
    ez = np.exp(-z[pos])
    y[pos] = 1.0 / (1.0 + ez)
    comp[pos] = ez / (1.0 + ez)
    ez = np.exp(z[~pos])
    y[~pos] = ez / (1.0 + ez)
    comp[~pos] = 1.0 / (1.0 + ez)
    return y, comp


def apply_activation(name: str, z: np.ndarray) -> np.ndarray:
    if name == "sigmoid":
        return sigmoid_pair(z)[0]
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "identity":
        return z
    raise InvalidConfig(f"unknown activation {name!r}; expected one of {ACTIVATIONS}")


def activation_gradient(name: str, y: np.ndarray, grad_y: np.ndarray) -> np.ndarray:
    """Gradient through an activation, expressed via the activation output.

    The sigmoid branch uses the y-based product, which degenerates to zero
    at hard float saturation; Dense prefers the paired form cached during
    forward and only falls back here for the other activations.
    """
    if name == "sigmoid":
        return grad_y * y * (1.0 - y)
    if name == "relu":
        return grad_y * (y > 0)
    if name == "identity":
        return grad_y
    raise InvalidConfig(f"unknown activation {name!r}; expected one of {ACTIVATIONS}")


class Conv3D:
    """Valid 3D convolution with fused ReLU.

    weights: (out_channels, in_channels, p, p, p) with odd p; bias per
    output channel.  The filter response at an output site is the plain
    inner product over the input window, then bias, then ReLU.
    """

    def __init__(self, weights: np.ndarray, bias: np.ndarray, trainable: bool = True):
        if weights.ndim != 5 or len(set(weights.shape[2:])) != 1:
            raise ShapeMismatch(f"conv weights must be (J, M, p, p, p), got {weights.shape}")
        if weights.shape[2] % 2 == 0:
            raise InvalidConfig(f"filter size must be odd, got {weights.shape[2]}")
        if bias.shape != (weights.shape[0],):
            raise ShapeMismatch(f"bias shape {bias.shape} does not match {weights.shape[0]} filters")
        self.weights = weights
        self.bias = bias
        self.trainable = trainable
        self.first_layer = False  # set by the network; skips the input gradient
        self.grad_weights = None
        self.grad_bias = None
        self._cols = None
        self._mask = None
        self._in_shape = None

    @classmethod
    def create(cls, rng, in_channels: int, out_channels: int, filter_size: int = 5,
               dtype=np.float32, trainable: bool = True) -> "Conv3D":
        fan_in = in_channels * filter_size**3
        w = init_uniform(rng, (out_channels, in_channels) + (filter_size,) * 3, fan_in, dtype)
        b = np.zeros(out_channels, dtype=dtype)
        return cls(w, b, trainable)

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    def forward(self, x: np.ndarray, cache: bool = False) -> np.ndarray:
        j, m, p = self.weights.shape[0], self.weights.shape[1], self.weights.shape[2]
        if x.ndim != 5 or x.shape[1] != m:
            raise ShapeMismatch(f"conv input must be (B, {m}, X, Y, Z), got {x.shape}")
        if min(x.shape[2:]) < p:
            raise ShapeMismatch(f"input extent {x.shape[2:]} smaller than filter {p}")
        b, o = x.shape[0], x.shape[2] - p + 1
        win = sliding_window_view(x, (p, p, p), axis=(2, 3, 4))
        # One contiguous copy serves the forward GEMM and the weight-gradient
        # GEMM in backward.
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 4, 1, 5, 6, 7)).reshape(
            b * o**3, m * p**3
        )
        z = cols @ self.weights.reshape(j, -1).T
        z += self.bias
        mask = z > 0
        y = np.where(mask, z, z.dtype.type(0))
        if cache:
            # cols only feeds the weight gradient; frozen layers skip it.
            self._cols = cols if self.trainable else None
            self._mask = mask
            self._in_shape = x.shape
        return np.ascontiguousarray(y.reshape(b, o, o, o, j).transpose(0, 4, 1, 2, 3))

    def backward(self, grad_y: np.ndarray) -> np.ndarray | None:
        if self._mask is None:
            raise ShapeMismatch("conv backward called without a cached forward pass")
        j, m, p = self.weights.shape[0], self.weights.shape[1], self.weights.shape[2]
        b = grad_y.shape[0]
        o = grad_y.shape[2]
        dz = grad_y.transpose(0, 2, 3, 4, 1).reshape(b * o**3, j) * self._mask
        if self.trainable:
            self.grad_weights = (dz.T @ self._cols).reshape(self.weights.shape)
            self.grad_bias = dz.sum(axis=0)
        if self.first_layer:
            self._cols = None
            self._mask = None
            return None
        dcols = (dz @ self.weights.reshape(j, -1)).reshape(b, o, o, o, m, p, p, p)
        dx = np.zeros(self._in_shape, dtype=grad_y.dtype)
        for px in range(p):
            for py in range(p):
                for pz in range(p):
                    dx[:, :, px : px + o, py : py + o, pz : pz + o] += np.moveaxis(
                        dcols[:, :, :, :, :, px, py, pz], 4, 1
                    )
        self._cols = None
        self._mask = None
        return dx


class MaxPool3D:
    """2x2x2 max pooling, stride 2, floor semantics.

    An odd trailing slice is dropped.  Ties inside a window go to the entry
    with the lowest linear index in the (C-ordered, z-fastest) input array.
    """

    window = 2

    def __init__(self):
        self._argmax = None
        self._in_shape = None

    @staticmethod
    def out_extent(extent: int) -> int:
        return extent // 2

    def forward(self, x: np.ndarray, cache: bool = False) -> np.ndarray:
        if x.ndim != 5:
            raise ShapeMismatch(f"pool input must be (B, C, X, Y, Z), got {x.shape}")
        m = x.shape[2] // 2
        if m < 1:
            raise ShapeMismatch(f"extent {x.shape[2]} too small to pool")
        b, c = x.shape[0], x.shape[1]
        v = x[:, :, : 2 * m, : 2 * m, : 2 * m].reshape(b, c, m, 2, m, 2, m, 2)
        w = v.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(b, c, m, m, m, 8)
        idx = w.argmax(axis=-1)
        y = np.take_along_axis(w, idx[..., None], axis=-1)[..., 0]
        if cache:
            self._argmax = idx
            self._in_shape = x.shape
        return y

    def backward(self, grad_y: np.ndarray) -> np.ndarray:
        if self._argmax is None:
            raise ShapeMismatch("pool backward called without a cached forward pass")
        b, c, m = grad_y.shape[0], grad_y.shape[1], grad_y.shape[2]
        dw = np.zeros((b, c, m, m, m, 8), dtype=grad_y.dtype)
        np.put_along_axis(dw, self._argmax[..., None], grad_y[..., None], axis=-1)
        dx = np.zeros(self._in_shape, dtype=grad_y.dtype)
        dx[:, :, : 2 * m, : 2 * m, : 2 * m] = (
            dw.reshape(b, c, m, m, m, 2, 2, 2)
            .transpose(0, 1, 2, 5, 3, 6, 4, 7)
            .reshape(b, c, 2 * m, 2 * m, 2 * m)
        )
        self._argmax = None
        return dx


class Flatten:
    """(B, C, X, Y, Z) -> (B, C * X * Y * Z), channel-major within a sample."""

    def __init__(self):
        self._in_shape = None

    def forward(self, x: np.ndarray, cache: bool = False) -> np.ndarray:
        if cache:
            self._in_shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_y: np.ndarray) -> np.ndarray:
        return grad_y.reshape(self._in_shape)


class Dense:
    """Fully connected layer with a named activation."""

    def __init__(self, weights: np.ndarray, bias: np.ndarray, activation: str = "sigmoid",
                 trainable: bool = True):
        if weights.ndim != 2:
            raise ShapeMismatch(f"dense weights must be (out, in), got {weights.shape}")
        if bias.shape != (weights.shape[0],):
            raise ShapeMismatch(f"bias shape {bias.shape} does not match {weights.shape[0]} units")
        if activation not in ACTIVATIONS:
            raise InvalidConfig(f"unknown activation {activation!r}; expected one of {ACTIVATIONS}")
        self.weights = weights
        self.bias = bias
        self.activation = activation
        self.trainable = trainable
        self.grad_weights = None
        self.grad_bias = None
        self._x = None
        self._y = None
        self._dact = None

    @classmethod
    def create(cls, rng, in_features: int, out_features: int, activation: str = "sigmoid",
               dtype=np.float32, trainable: bool = True) -> "Dense":
        w = init_uniform(rng, (out_features, in_features), in_features, dtype)
        b = np.zeros(out_features, dtype=dtype)
        return cls(w, b, activation, trainable)

    def forward(self, x: np.ndarray, cache: bool = False) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.weights.shape[1]:
            raise ShapeMismatch(
                f"dense input must be (B, {self.weights.shape[1]}), got {x.shape}"
            )
        z = x @ self.weights.T + self.bias
        if self.activation == "sigmoid":
            # Keep the derivative from the paired form; see sigmoid_pair.
            y, comp = sigmoid_pair(z)
            if cache:
                self._dact = y * comp
        else:
            y = apply_activation(self.activation, z)
        if cache:
            self._x = x
            self._y = y
        return y

    def backward(self, grad_y: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise ShapeMismatch("dense backward called without a cached forward pass")
        if self.activation == "sigmoid":
            dz = grad_y * self._dact
        else:
            dz = activation_gradient(self.activation, self._y, grad_y)
        if self.trainable:
            self.grad_weights = dz.T @ self._x
            self.grad_bias = dz.sum(axis=0)
        dx = dz @ self.weights
        self._x = None
        self._y = None
        self._dact = None
        return dx
