"""Random particle microstructures in a cubic cell.

Particles (spheres or axis-aligned ellipsoids) are placed by sequential
random insertion: draw a size, draw a position, keep the particle if it
clears every previously placed one, otherwise retry.  Two rules keep the
process both terminating and on target:

* hierarchical sizing: after ``max_attempts`` consecutive rejections the
  upper bound of the size interval shrinks by 10% and insertion continues,
  so late particles fill gaps the early large ones left;
* exact closure: once the remaining volume deficit fits a single particle,
  that particle's size is solved for analytically so the achieved volume
  fraction lands within ``vf_tolerance`` of the target.

All randomness comes from one seeded PCG64 generator; a geometry is fully
reproducible from (seed, parameters).  Draw order per trial is fixed: size
first, then the three center coordinates.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import InvalidConfig, PackingStalled

# Count bias toward low volume fractions: adjacent 2% bins differ by ~15%,
# giving a 10x ratio across a 26% span.
DEFAULT_DECAY = math.log(10.0) / 0.26

_SPHERE_KINDS = ("sphere", "ellipsoid")


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float

    kind = "sphere"

    def __post_init__(self):
        if len(self.center) != 3:
            raise InvalidConfig(f"center must have three coordinates, got {self.center}")
        if self.radius <= 0.0:
            raise InvalidConfig(f"sphere radius must be positive, got {self.radius}")

    @property
    def bounding_radius(self) -> float:
        return self.radius

    @property
    def volume(self) -> float:
        return 4.0 / 3.0 * math.pi * self.radius**3


@dataclass(frozen=True)
class Ellipsoid:
    """Axis-aligned ellipsoid; semi_axes are the semi-axis lengths along x, y, z."""

    center: tuple[float, float, float]
    semi_axes: tuple[float, float, float]

    kind = "ellipsoid"

    def __post_init__(self):
        if len(self.center) != 3:
            raise InvalidConfig(f"center must have three coordinates, got {self.center}")
        if len(self.semi_axes) != 3 or any(a <= 0.0 for a in self.semi_axes):
            raise InvalidConfig(f"semi-axes must be three positive lengths, got {self.semi_axes}")

    @property
    def bounding_radius(self) -> float:
        return max(self.semi_axes)

    @property
    def volume(self) -> float:
        a, b, c = self.semi_axes
        return 4.0 / 3.0 * math.pi * a * b * c


Inclusion = Union[Sphere, Ellipsoid]


@dataclass(frozen=True)
class RveGeometry:
    """A packed cell: cube edge length, particle list, and bookkeeping."""

    edge_length: float
    inclusions: tuple[Inclusion, ...]
    target_vf: float
    achieved_vf: float
    seed: int

    def to_json_dict(self) -> dict:
        incs = []
        for inc in self.inclusions:
            entry: dict = {"kind": inc.kind, "center": list(inc.center)}
            if isinstance(inc, Sphere):
                entry["radius"] = inc.radius
            else:
                entry["semi_axes"] = list(inc.semi_axes)
            incs.append(entry)
        return {
            "edge_length": self.edge_length,
            "seed": self.seed,
            "target_vf": self.target_vf,
            "achieved_vf": self.achieved_vf,
            "inclusions": incs,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "RveGeometry":
        incs: list[Inclusion] = []
        for entry in data["inclusions"]:
            center = tuple(float(c) for c in entry["center"])
            if entry["kind"] == "sphere":
                incs.append(Sphere(center, float(entry["radius"])))
            elif entry["kind"] == "ellipsoid":
                incs.append(Ellipsoid(center, tuple(float(a) for a in entry["semi_axes"])))
            else:
                raise InvalidConfig(f"unknown inclusion kind {entry['kind']!r}")
        return cls(
            edge_length=float(data["edge_length"]),
            inclusions=tuple(incs),
            target_vf=float(data["target_vf"]),
            achieved_vf=float(data["achieved_vf"]),
            seed=int(data["seed"]),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, sort_keys=True, separators=(",", ":"))
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "RveGeometry":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))


def analytic_vf(geometry: RveGeometry) -> float:
    """Exact particle volume fraction (particles never overlap or leave the cell)."""
    cell = geometry.edge_length**3
    return sum(inc.volume for inc in geometry.inclusions) / cell


def _sphere_volume(r: float) -> float:
    return 4.0 / 3.0 * math.pi * r**3


def _radius_for_volume(v: float) -> float:
    return (3.0 * v / (4.0 * math.pi)) ** (1.0 / 3.0)


def generate_rve(
    target_vf: float,
    r_range: tuple[float, float] = (0.05, 0.1),
    shape_kind: str = "sphere",
    edge_length: float = 1.0,
    seed: int = 0,
    *,
    vf_tolerance: float = 0.002,
    gap: float = 0.005,
    max_attempts: int = 5000,
) -> RveGeometry:
    """Pack a cube with non-overlapping particles at a target volume fraction.

    ``r_range`` bounds the sphere radius or each ellipsoid semi-axis.  The
    non-overlap test is conservative (bounding spheres plus ``gap``), and
    particles keep their whole bounding sphere inside the cell.  target_vf
    may be exactly 0.0, which returns an empty cell.
    """
    r_min, r_max = r_range
    if not (0.0 < r_min <= r_max < edge_length / 2.0):
        raise InvalidConfig(f"need 0 < r_min <= r_max < edge_length/2, got {r_range}")
    if not (0.0 <= target_vf <= 0.30):
        raise InvalidConfig(f"target_vf must lie in [0, 0.30], got {target_vf}")
    if shape_kind not in _SPHERE_KINDS:
        raise InvalidConfig(f"shape_kind must be one of {_SPHERE_KINDS}, got {shape_kind!r}")
    if edge_length <= 0.0:
        raise InvalidConfig(f"edge_length must be positive, got {edge_length}")

    cell_volume = edge_length**3
    rng = np.random.Generator(np.random.PCG64(seed))

    centers: list[tuple[float, float, float]] = []
    bounding: list[float] = []
    inclusions: list[Inclusion] = []
    placed_volume = 0.0

    r_hi = r_max  # current upper bound, shrinks when insertion stalls
    attempts = 0
    min_volume = _sphere_volume(r_min)

    while True:
        deficit = target_vf * cell_volume - placed_volume
        # Close enough that even the smallest admissible particle overshoots
        # more than it helps.
        if deficit <= 0.5 * min_volume:
            break

        closing = deficit <= _sphere_volume(r_hi)
        if closing:
            # Solve for the radius that closes the gap, within the current
            # (possibly shrunk) size interval.  A clamped closure undershoots;
            # the loop then keeps going with smaller particles.
            r_close = min(max(_radius_for_volume(deficit), r_min), r_hi)
            if shape_kind == "sphere":
                trial: Inclusion = Sphere((0.0, 0.0, 0.0), r_close)
            else:
                # Equal semi-axes make the closure volume exact.
                trial = Ellipsoid((0.0, 0.0, 0.0), (r_close, r_close, r_close))
        elif shape_kind == "sphere":
            trial = Sphere((0.0, 0.0, 0.0), float(rng.uniform(r_min, r_hi)))
        else:
            axes = tuple(float(a) for a in rng.uniform(r_min, r_hi, size=3))
            trial = Ellipsoid((0.0, 0.0, 0.0), axes)

        rb = trial.bounding_radius
        lo = rb
        hi = edge_length - rb
        center = tuple(float(c) for c in rng.uniform(lo, hi, size=3))
        trial = dataclasses.replace(trial, center=center)

        if _clears_all(center, rb, centers, bounding, gap):
            inclusions.append(trial)
            centers.append(center)
            bounding.append(rb)
            placed_volume += trial.volume
            attempts = 0
            continue

        attempts += 1
        if attempts >= max_attempts:
            if r_hi <= r_min:
                achieved = placed_volume / cell_volume
                raise PackingStalled(
                    f"no room after {max_attempts} consecutive rejections "
                    f"(placed {len(inclusions)}, vf {achieved:.4f} of {target_vf:.4f})",
                    placed=len(inclusions),
                    achieved_vf=achieved,
                    target_vf=target_vf,
                )
            r_hi = max(r_min, 0.9 * r_hi)
            attempts = 0

    geometry = RveGeometry(
        edge_length=edge_length,
        inclusions=tuple(inclusions),
        target_vf=target_vf,
        achieved_vf=placed_volume / cell_volume,
        seed=seed,
    )
    if abs(geometry.achieved_vf - target_vf) > vf_tolerance:
        raise PackingStalled(
            f"achieved vf {geometry.achieved_vf:.4f} misses target {target_vf:.4f} "
            f"by more than {vf_tolerance}",
            placed=len(inclusions),
            achieved_vf=geometry.achieved_vf,
            target_vf=target_vf,
        )
    return geometry


def _clears_all(center, rb, centers, bounding, gap) -> bool:
    if not centers:
        return True
    pts = np.asarray(centers)
    d2 = np.sum((pts - np.asarray(center)) ** 2, axis=1)
    limit = np.asarray(bounding) + rb + gap
    return bool(np.all(d2 > limit**2))


@dataclass(frozen=True)
class SampleSchedule:
    """Per-bin sample counts over a volume-fraction grid."""

    volume_fractions: tuple[float, ...]
    counts: tuple[int, ...]

    @property
    def total(self) -> int:
        return sum(self.counts)

    def items(self):
        return list(zip(self.volume_fractions, self.counts))


def sample_schedule(
    vf_min: float,
    vf_max: float,
    n_bins: int,
    total: int,
    decay: float = DEFAULT_DECAY,
) -> SampleSchedule:
    """Split ``total`` samples over evenly spaced vf bins, biased low.

    Ideal per-bin weights are exp(-decay * vf); integer counts come from
    largest-remainder rounding (ties to the lower vf bin), then a fix-up
    guarantees every bin at least one sample while keeping counts
    non-increasing in vf.
    """
    if n_bins < 1:
        raise InvalidConfig(f"n_bins must be >= 1, got {n_bins}")
    if total < n_bins:
        raise InvalidConfig(f"total ({total}) must cover every bin (n_bins={n_bins})")
    if not (0.0 <= vf_min <= vf_max <= 0.30):
        raise InvalidConfig(f"need 0 <= vf_min <= vf_max <= 0.30, got ({vf_min}, {vf_max})")
    if decay < 0.0:
        raise InvalidConfig(f"decay must be >= 0, got {decay}")
    if n_bins == 1:
        return SampleSchedule((vf_min,), (total,))

    vfs = np.linspace(vf_min, vf_max, n_bins)
    weights = np.exp(-decay * vfs)
    ideal = total * weights / weights.sum()
    counts = np.floor(ideal).astype(int)
    remainder = ideal - counts
    short = total - int(counts.sum())
    # Stable sort keeps ties at the lower vf bin.
    for ix in np.argsort(-remainder, kind="stable")[:short]:
        counts[ix] += 1

    # Give every empty bin one sample, taken from the last bin holding the
    # current maximum so counts stay non-increasing.
    for ix in range(n_bins):
        if counts[ix] == 0:
            donor = int(np.flatnonzero(counts == counts.max())[-1])
            counts[donor] -= 1
            counts[ix] += 1

    return SampleSchedule(tuple(float(v) for v in vfs), tuple(int(c) for c in counts))
