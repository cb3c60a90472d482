"""Geometry generation: volumes, packing invariants, schedules, round-trips."""

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxhomog.errors import InvalidConfig, PackingStalled
from voxhomog.microgeom import (
    DEFAULT_DECAY,
    Ellipsoid,
    RveGeometry,
    Sphere,
    analytic_vf,
    generate_rve,
    sample_schedule,
)


def test_sphere_volume_oracle():
    # 4/3 * pi * r^3 evaluated independently.
    assert Sphere((0.5, 0.5, 0.5), 0.1).volume == pytest.approx(4.1887902047863905e-3, rel=1e-12)
    assert Sphere((0.5, 0.5, 0.5), 0.1).bounding_radius == 0.1


def test_ellipsoid_volume_oracle():
    e = Ellipsoid((0.5, 0.5, 0.5), (0.05, 0.075, 0.1))
    assert e.volume == pytest.approx(1.5707963267948966e-3, rel=1e-12)
    assert e.bounding_radius == 0.1


def test_inclusion_validation():
    with pytest.raises(InvalidConfig):
        Sphere((0.0, 0.0, 0.0), 0.0)
    with pytest.raises(InvalidConfig):
        Sphere((0.0, 0.0), 0.1)
    with pytest.raises(InvalidConfig):
        Ellipsoid((0.0, 0.0, 0.0), (0.1, -0.1, 0.1))


def test_analytic_vf_sums_volumes():
    geom = RveGeometry(
        edge_length=2.0,
        inclusions=(Sphere((1.0, 1.0, 1.0), 0.2), Sphere((0.5, 0.5, 0.5), 0.1)),
        target_vf=0.0,
        achieved_vf=0.0,
        seed=0,
    )
    expect = (4.0 / 3.0) * math.pi * (0.2**3 + 0.1**3) / 8.0
    assert analytic_vf(geom) == pytest.approx(expect, rel=1e-12)


# Ellipsoid targets stay below the feasibility ceiling of the conservative
# bounding-sphere overlap test (actual-volume fractions above ~0.22 jam).
@pytest.mark.parametrize(
    "shape_kind, target",
    [
        ("sphere", 0.05),
        ("sphere", 0.15),
        ("sphere", 0.25),
        ("ellipsoid", 0.05),
        ("ellipsoid", 0.12),
        ("ellipsoid", 0.18),
    ],
)
def test_generate_rve_invariants(shape_kind, target):
    for seed in range(3):
        geom = generate_rve(target, shape_kind=shape_kind, seed=seed)
        # volume fraction within the advertised tolerance
        assert abs(geom.achieved_vf - target) <= 0.002
        assert geom.achieved_vf == pytest.approx(analytic_vf(geom), rel=1e-12)
        centers = np.array([inc.center for inc in geom.inclusions])
        radii = np.array([inc.bounding_radius for inc in geom.inclusions])
        # fully inside the cell
        assert np.all(centers - radii[:, None] >= 0.0)
        assert np.all(centers + radii[:, None] <= geom.edge_length)
        # pairwise separation with the minimum gap
        for i in range(len(radii)):
            d = np.linalg.norm(centers[i + 1 :] - centers[i], axis=1)
            assert np.all(d > radii[i + 1 :] + radii[i] + 0.005)


def test_generate_rve_size_range():
    geom = generate_rve(0.2, r_range=(0.06, 0.09), shape_kind="ellipsoid", seed=3)
    for inc in geom.inclusions:
        axes = np.asarray(inc.semi_axes)
        assert np.all(axes >= 0.06 - 1e-12)
        assert np.all(axes <= 0.09 + 1e-12)


def test_generate_rve_deterministic():
    a = generate_rve(0.22, seed=9)
    b = generate_rve(0.22, seed=9)
    assert a == b
    c = generate_rve(0.22, seed=10)
    assert c != a


def test_generate_rve_empty_and_validation():
    empty = generate_rve(0.0, seed=1)
    assert empty.inclusions == ()
    assert empty.achieved_vf == 0.0
    with pytest.raises(InvalidConfig):
        generate_rve(0.31)
    with pytest.raises(InvalidConfig):
        generate_rve(-0.1)
    with pytest.raises(InvalidConfig):
        generate_rve(0.1, r_range=(0.2, 0.1))
    with pytest.raises(InvalidConfig):
        generate_rve(0.1, r_range=(0.1, 0.6))
    with pytest.raises(InvalidConfig):
        generate_rve(0.1, shape_kind="cube")


def test_generate_rve_stalls_when_nothing_fits():
    # A gap wider than the cell makes any second particle impossible.
    with pytest.raises(PackingStalled) as info:
        generate_rve(0.1, seed=0, gap=2.0, max_attempts=50)
    assert info.value.placed >= 1
    assert info.value.achieved_vf < info.value.target_vf


def test_geometry_json_round_trip(tmp_path):
    geom = generate_rve(0.18, shape_kind="ellipsoid", seed=4)
    path = tmp_path / "geom.json"
    geom.save(path)
    again = RveGeometry.load(path)
    assert again == geom
    # the file itself is plain JSON with stable keys
    payload = json.loads(path.read_text())
    assert set(payload) == {"edge_length", "seed", "target_vf", "achieved_vf", "inclusions"}


def test_schedule_example():
    sched = sample_schedule(0.02, 0.28, 14, 2000)
    counts = np.array(sched.counts)
    assert counts.sum() == 2000
    assert np.all(counts >= 1)
    assert np.all(np.diff(counts) <= 0)
    # decay constant is calibrated for a 10x drop across the span
    assert counts[-1] / counts[0] == pytest.approx(0.1, abs=0.02)
    assert sched.volume_fractions[0] == pytest.approx(0.02)
    assert sched.volume_fractions[-1] == pytest.approx(0.28)
    assert DEFAULT_DECAY == pytest.approx(math.log(10.0) / 0.26, rel=1e-12)


def test_schedule_items_align():
    sched = sample_schedule(0.05, 0.25, 5, 37)
    pairs = list(sched.items())
    assert len(pairs) == 5
    assert sum(c for _, c in pairs) == 37
    assert sched.total == 37


@settings(max_examples=60, deadline=None)
@given(
    n_bins=st.integers(min_value=1, max_value=24),
    total=st.integers(min_value=1, max_value=5000),
    decay=st.floats(min_value=0.0, max_value=30.0, allow_nan=False),
)
def test_schedule_properties(n_bins, total, decay):
    if total < n_bins:
        with pytest.raises(InvalidConfig):
            sample_schedule(0.02, 0.28, n_bins, total, decay=decay)
        return
    sched = sample_schedule(0.02, 0.28, n_bins, total, decay=decay)
    counts = np.array(sched.counts)
    assert counts.sum() == total
    assert np.all(counts >= 1)
    assert np.all(np.diff(counts) <= 0)


def test_schedule_validation():
    with pytest.raises(InvalidConfig):
        sample_schedule(0.3, 0.2, 4, 100)
    with pytest.raises(InvalidConfig):
        sample_schedule(0.02, 0.28, 0, 100)
    with pytest.raises(InvalidConfig):
        sample_schedule(0.02, 0.28, 4, 100, decay=-1.0)
