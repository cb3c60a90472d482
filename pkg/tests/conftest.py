"""Shared test utilities: independent reference implementations.

Everything here is written the slow, obvious way (explicit loops, central
differences) so library results are checked against code that shares no
machinery with the implementation.
"""

from __future__ import annotations

import numpy as np
import pytest


def central_difference(loss_fn, param: np.ndarray, index: int, step: float) -> float:
    """d loss / d param[index] by symmetric finite differences."""
    flat = param.ravel()
    saved = flat[index]
    flat[index] = saved + step
    up = loss_fn()
    flat[index] = saved - step
    down = loss_fn()
    flat[index] = saved
    return (up - down) / (2.0 * step)


def relative_error(a: float, b: float) -> float:
    scale = max(abs(a), abs(b), 1e-12)
    return abs(a - b) / scale


def check_gradient_entries(loss_fn, param, grad, indices, step_scale=1e-6):
    """Worst relative error between analytic and numeric gradient entries."""
    worst = 0.0
    flat_grad = grad.ravel()
    for ix in indices:
        step = step_scale * max(1.0, abs(param.ravel()[ix]))
        numeric = central_difference(loss_fn, param, ix, step)
        worst = max(worst, relative_error(numeric, flat_grad[ix]))
    return worst


def reference_conv3d(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Valid-mode stride-1 convolution with ReLU, all loops."""
    b, m, nx, ny, nz = x.shape
    j, m2, p, _, _ = weights.shape
    assert m == m2
    ox, oy, oz = nx - p + 1, ny - p + 1, nz - p + 1
    out = np.zeros((b, j, ox, oy, oz), dtype=x.dtype)
    for bi in range(b):
        for ji in range(j):
            for ix in range(ox):
                for iy in range(oy):
                    for iz in range(oz):
                        acc = bias[ji]
                        for mi in range(m):
                            for px in range(p):
                                for py in range(p):
                                    for pz in range(p):
                                        acc += (
                                            weights[ji, mi, px, py, pz]
                                            * x[bi, mi, ix + px, iy + py, iz + pz]
                                        )
                        out[bi, ji, ix, iy, iz] = acc if acc > 0 else 0.0
    return out


def reference_maxpool(x: np.ndarray) -> np.ndarray:
    """2x2x2 stride-2 max pooling with floor semantics, all loops."""
    b, c, nx, ny, nz = x.shape
    m = nx // 2
    out = np.empty((b, c, m, m, m), dtype=x.dtype)
    for bi in range(b):
        for ci in range(c):
            for ix in range(m):
                for iy in range(m):
                    for iz in range(m):
                        block = x[
                            bi, ci, 2 * ix : 2 * ix + 2, 2 * iy : 2 * iy + 2, 2 * iz : 2 * iz + 2
                        ]
                        out[bi, ci, ix, iy, iz] = block.max()
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
