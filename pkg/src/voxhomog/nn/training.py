"""Loss, label scaling, Adam, and the training loop.

The loss is a mean over samples of the *summed* squared error across the
output vector; the component count does not enter the normalization.
Labels are scaled into (0, 1) per group (the six moduli pooled together,
the six Poisson's ratios pooled together) with min/max taken from the
training split only.

Training is deterministic for a fixed config: batch order comes from one
seeded generator, every reduction is a numpy GEMM or mean, and the kept
parameters are those of the best validation epoch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DegenerateRange, EmptySplit, InvalidConfig, ShapeMismatch
from .network import Network

MODULI_SLICE = slice(0, 6)
POISSON_SLICE = slice(6, 12)


def mse(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean over samples of the summed squared component error."""
    if pred.shape != target.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs target {target.shape}")
    diff = pred.astype(np.float64) - target.astype(np.float64)
    return float(np.mean(np.sum(diff * diff, axis=1)))


@dataclass(frozen=True)
class LabelScaling:
    """Pooled min/max ranges for the two label groups."""

    moduli_min: float
    moduli_max: float
    poisson_min: float
    poisson_max: float

    @classmethod
    def fit(cls, labels: np.ndarray) -> "LabelScaling":
        labels = np.asarray(labels, dtype=float)
        if labels.ndim != 2 or labels.shape[1] != 12:
            raise ShapeMismatch(f"labels must be (N, 12), got {labels.shape}")
        if labels.shape[0] == 0:
            raise EmptySplit("cannot fit label scaling on an empty split")
        mod = labels[:, MODULI_SLICE]
        poi = labels[:, POISSON_SLICE]
        out = cls(
            moduli_min=float(mod.min()),
            moduli_max=float(mod.max()),
            poisson_min=float(poi.min()),
            poisson_max=float(poi.max()),
        )
        if out.moduli_max <= out.moduli_min or out.poisson_max <= out.poisson_min:
            raise DegenerateRange("label group has zero spread; cannot min/max scale")
        return out

    def transform(self, labels: np.ndarray) -> np.ndarray:
        labels = np.asarray(labels, dtype=float)
        out = np.empty_like(labels)
        out[:, MODULI_SLICE] = (labels[:, MODULI_SLICE] - self.moduli_min) / (
            self.moduli_max - self.moduli_min
        )
        out[:, POISSON_SLICE] = (labels[:, POISSON_SLICE] - self.poisson_min) / (
            self.poisson_max - self.poisson_min
        )
        return out

    def inverse(self, scaled: np.ndarray) -> np.ndarray:
        scaled = np.asarray(scaled, dtype=float)
        out = np.empty_like(scaled)
        out[:, MODULI_SLICE] = scaled[:, MODULI_SLICE] * (
            self.moduli_max - self.moduli_min
        ) + self.moduli_min
        out[:, POISSON_SLICE] = scaled[:, POISSON_SLICE] * (
            self.poisson_max - self.poisson_min
        ) + self.poisson_min
        return out

    def to_json_dict(self) -> dict:
        return {
            "moduli": [self.moduli_min, self.moduli_max],
            "poisson": [self.poisson_min, self.poisson_max],
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "LabelScaling":
        return cls(
            moduli_min=float(data["moduli"][0]),
            moduli_max=float(data["moduli"][1]),
            poisson_min=float(data["poisson"][0]),
            poisson_max=float(data["poisson"][1]),
        )


class Adam:
    """Adam with bias correction, updating parameter arrays in place."""

    def __init__(self, params: list[np.ndarray], learning_rate: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if learning_rate <= 0.0:
            raise InvalidConfig(f"learning rate must be positive, got {learning_rate}")
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise InvalidConfig(f"betas must lie in [0, 1), got {beta1}, {beta2}")
        self.params = params
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, grads: list[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise ShapeMismatch(f"got {len(grads)} gradients for {len(self.params)} parameters")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g is None:
                raise ShapeMismatch("missing gradient for a trainable parameter")
            g = g.astype(p.dtype, copy=False)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int = 25
    learning_rate: float = 1e-3
    patience: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise InvalidConfig(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise InvalidConfig(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0.0:
            raise InvalidConfig(f"learning rate must be positive, got {self.learning_rate}")
        if self.patience < 1:
            raise InvalidConfig(f"patience must be >= 1, got {self.patience}")


@dataclass
class TrainingLog:
    train_loss: list[float]
    val_loss: list[float]
    best_epoch: int  # 1-based epoch whose parameters the network keeps

    def to_json_dict(self) -> dict:
        return {
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "best_epoch": self.best_epoch,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "TrainingLog":
        return cls(
            train_loss=[float(v) for v in data["train_loss"]],
            val_loss=[float(v) for v in data["val_loss"]],
            best_epoch=int(data["best_epoch"]),
        )


def _eval_loss(net: Network, grids: np.ndarray, targets: np.ndarray, batch_size: int) -> float:
    total = 0.0
    for lo in range(0, grids.shape[0], batch_size):
        x = grids[lo : lo + batch_size].astype(net.dtype)[:, None]
        pred = net.forward(x, cache=False)
        total += mse(pred, targets[lo : lo + batch_size]) * x.shape[0]
    return total / grids.shape[0]


def train_network(
    net: Network,
    train_grids: np.ndarray,
    train_targets: np.ndarray,
    val_grids: np.ndarray,
    val_targets: np.ndarray,
    config: TrainConfig,
) -> TrainingLog:
    """Mini-batch Adam training with best-epoch retention.

    ``train_targets`` / ``val_targets`` are already scaled.  Shuffling uses
    a generator seeded from ``config.seed`` alone.  Training stops early
    once ``patience`` epochs pass without a validation improvement; either
    way the network ends up holding the best-validation parameters.
    """
    if train_grids.shape[0] == 0 or val_grids.shape[0] == 0:
        raise EmptySplit("training and validation splits must be non-empty")
    if train_grids.shape[0] != train_targets.shape[0]:
        raise ShapeMismatch("training grids and targets disagree in length")
    if val_grids.shape[0] != val_targets.shape[0]:
        raise ShapeMismatch("validation grids and targets disagree in length")

    rng = np.random.Generator(np.random.PCG64(config.seed))
    params = net.parameters()
    mask = net.trainable_mask()
    live = [p for p, k in zip(params, mask) if k]
    if not live:
        raise InvalidConfig("no trainable parameters")
    adam = Adam(live, learning_rate=config.learning_rate)

    n = train_grids.shape[0]
    log = TrainingLog(train_loss=[], val_loss=[], best_epoch=0)
    best_val = np.inf
    best_params: list[np.ndarray] | None = None

    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(n)
        running = 0.0
        for lo in range(0, n, config.batch_size):
            batch = perm[lo : lo + config.batch_size]
            x = train_grids[batch].astype(net.dtype)[:, None]
            y = train_targets[batch]
            pred = net.forward(x, cache=True)
            running += mse(pred, y) * batch.size
            grad = (2.0 / batch.size) * (pred - y.astype(pred.dtype))
            net.backward(grad.astype(net.dtype))
            grads = net.gradients()
            adam.step([g for g, k in zip(grads, mask) if k])
        log.train_loss.append(running / n)
        val = _eval_loss(net, val_grids, val_targets, config.batch_size)
        log.val_loss.append(val)

        if val < best_val:
            best_val = val
            log.best_epoch = epoch
            best_params = [p.copy() for p in params]
        elif epoch - log.best_epoch >= config.patience:
            break

    if best_params is not None:
        for p, bp in zip(params, best_params):
            p[...] = bp
    return log
