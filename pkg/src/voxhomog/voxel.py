"""Rasterize geometries onto cubic voxel grids, plus a small binary format.

A voxel belongs to a particle iff its center lies strictly inside the
particle surface; centers sit at ((i + 1/2) * spacing) per axis.  The grid
array has shape (n, n, n) indexed [ix, iy, iz] in C order.  On disk,
values are laid out x-fastest (Fortran ravel of that array), so byte k
maps to ix = k % n, iy = (k // n) % n, iz = k // n**2.

File layout: 16-byte header (magic b"PHGR", version u16 LE, n u16 LE,
8 reserved zero bytes) followed by the payload.  Version 1 stores the n**3
occupancy bytes raw; version 2 run-length encodes them as (count u32 LE,
value u8) pairs, which collapses the all-matrix background.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import InvalidConfig
from .microgeom import Ellipsoid, RveGeometry, Sphere

MAGIC = b"PHGR"
_HEADER = struct.Struct("<4sHH8x")


@dataclass(frozen=True)
class PhaseGrid:
    """Binary occupancy grid: 0 = matrix, 1 = inclusion."""

    values: np.ndarray  # (n, n, n) uint8, C order, indexed [ix, iy, iz]
    spacing: float

    def __post_init__(self):
        v = self.values
        if v.ndim != 3 or len(set(v.shape)) != 1:
            raise InvalidConfig(f"grid must be cubic, got shape {v.shape}")
        n = v.shape[0]
        if n < 3 or n % 2 == 0:
            raise InvalidConfig(f"grid edge must be an odd integer >= 3, got {n}")
        if v.dtype != np.uint8:
            raise InvalidConfig(f"grid dtype must be uint8, got {v.dtype}")
        if v.size and v.max() > 1:
            raise InvalidConfig("grid values must be 0 (matrix) or 1 (inclusion)")
        if self.spacing <= 0.0:
            raise InvalidConfig(f"spacing must be positive, got {self.spacing}")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def edge_length(self) -> float:
        return self.n * self.spacing

    def volume_fraction(self) -> float:
        return float(self.values.mean())


def voxelize(geometry: RveGeometry, n: int) -> PhaseGrid:
    """Sample the geometry at n**3 voxel centers.

    Strict interior test: a center exactly on a particle surface stays
    matrix.  Only the bounding box of each particle is visited.
    """
    if n < 3 or n % 2 == 0:
        raise InvalidConfig(f"grid edge must be an odd integer >= 3, got {n}")
    spacing = geometry.edge_length / n
    coords = (np.arange(n) + 0.5) * spacing
    values = np.zeros((n, n, n), dtype=np.uint8)

    for inc in geometry.inclusions:
        rb = inc.bounding_radius
        sl = []
        for ax in range(3):
            lo = max(int(np.floor((inc.center[ax] - rb) / spacing)) - 1, 0)
            hi = min(int(np.ceil((inc.center[ax] + rb) / spacing)) + 1, n)
            sl.append(slice(lo, hi))
        dx = coords[sl[0]] - inc.center[0]
        dy = coords[sl[1]] - inc.center[1]
        dz = coords[sl[2]] - inc.center[2]
        if isinstance(inc, Sphere):
            q = (
                dx[:, None, None] ** 2
                + dy[None, :, None] ** 2
                + dz[None, None, :] ** 2
            ) / inc.radius**2
        elif isinstance(inc, Ellipsoid):
            a, b, c = inc.semi_axes
            q = (
                (dx[:, None, None] / a) ** 2
                + (dy[None, :, None] / b) ** 2
                + (dz[None, None, :] / c) ** 2
            )
        else:
            raise InvalidConfig(f"unknown inclusion type {type(inc).__name__}")
        values[sl[0], sl[1], sl[2]] |= (q < 1.0).astype(np.uint8)

    return PhaseGrid(values=values, spacing=spacing)


def save_grid(grid: PhaseGrid, path, version: int = 2) -> None:
    if version not in (1, 2):
        raise InvalidConfig(f"unknown grid format version {version}")
    flat = grid.values.ravel(order="F")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, version, grid.n))
        if version == 1:
            fh.write(flat.tobytes())
        else:
            fh.write(_rle_encode(flat))


def load_grid(path, spacing: float | None = None, edge_length: float | None = None) -> PhaseGrid:
    """Read a grid file.  Physical size comes from ``spacing`` or
    ``edge_length`` (default: unit cell)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise InvalidConfig(f"{path}: truncated header")
    magic, version, n = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise InvalidConfig(f"{path}: bad magic {magic!r}")
    payload = raw[_HEADER.size :]
    if version == 1:
        if len(payload) != n**3:
            raise InvalidConfig(f"{path}: expected {n**3} payload bytes, got {len(payload)}")
        flat = np.frombuffer(payload, dtype=np.uint8)
    elif version == 2:
        flat = _rle_decode(payload, n**3, path)
    else:
        raise InvalidConfig(f"{path}: unknown grid format version {version}")
    if not np.all(flat <= 1):
        raise InvalidConfig(f"{path}: occupancy values must be 0 or 1")
    values = flat.reshape((n, n, n), order="F").copy(order="C")
    if spacing is None:
        spacing = (edge_length if edge_length is not None else 1.0) / n
    return PhaseGrid(values=values, spacing=spacing)


def _rle_encode(flat: np.ndarray) -> bytes:
    # Runs via change-point detection; counts fit u32 (n <= 65535 keeps n**3 < 2**48,
    # but single runs are capped at u32 max to stay within the field).
    out = bytearray()
    edges = np.flatnonzero(np.diff(flat)) + 1
    starts = np.concatenate(([0], edges))
    ends = np.concatenate((edges, [flat.size]))
    cap = 0xFFFFFFFF
    for s, e in zip(starts, ends):
        count = int(e - s)
        value = int(flat[s])
        while count > cap:
            out += struct.pack("<IB", cap, value)
            count -= cap
        out += struct.pack("<IB", count, value)
    return bytes(out)


def _rle_decode(payload: bytes, expected: int, path) -> np.ndarray:
    if len(payload) % 5 != 0:
        raise InvalidConfig(f"{path}: run-length payload is not a whole number of runs")
    pairs = np.frombuffer(payload, dtype=np.dtype([("count", "<u4"), ("value", "u1")]))
    counts = pairs["count"].astype(np.int64)
    total = int(counts.sum())
    if total != expected:
        raise InvalidConfig(f"{path}: runs cover {total} voxels, expected {expected}")
    return np.repeat(pairs["value"], counts)
