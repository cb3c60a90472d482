"""Network assembly: shape algebra, initialization, parameter plumbing."""

import numpy as np
import pytest

from voxhomog.errors import InvalidConfig, ShapeMismatch
from voxhomog.microgeom import RveGeometry, Sphere
from voxhomog.nn.network import (
    ConvSpec,
    FcSpec,
    Network,
    NetworkArch,
    case_study_arch,
    desk_arch,
    shape_trace,
    transfer_arch,
)
from voxhomog.voxel import voxelize

# Untrained desk network (seed 0) on the centered-sphere grid; regenerated
# once and frozen.  Loose tolerance absorbs BLAS summation-order drift.
GOLDEN_UNTRAINED = np.array(
    [
        0.08162907, 0.31825414, 0.06619099, 0.7746688, 0.770361, 0.15379904,
        0.79095036, 0.618465, 0.5287365, 0.26052293, 0.30415145, 0.98046356,
    ],
    dtype=np.float32,
)


def test_case_study_trace():
    trace = shape_trace(case_study_arch(101))
    assert trace.extents == (101, 97, 48, 44, 22, 18, 9)
    assert trace.flatten_dim == 9**3 * 32
    assert trace.flatten_dim == 23328


def test_desk_trace():
    trace = shape_trace(desk_arch(33))
    assert trace.extents == (33, 29, 14, 10, 5)
    assert trace.flatten_dim == 5**3 * 16
    assert trace.flatten_dim == 2000


def test_pool_skipped_at_unit_extent():
    arch = NetworkArch(input_n=5, conv=(ConvSpec(4, filter_size=5),), fc=(FcSpec(8),))
    trace = shape_trace(arch)
    # 5 -> 1 after the conv; pooling a 1-extent volume is skipped
    assert trace.extents == (5, 1)
    assert trace.flatten_dim == 4


def test_shape_trace_rejects_too_small():
    arch = NetworkArch(input_n=9, conv=(ConvSpec(4), ConvSpec(4), ConvSpec(4)), fc=(FcSpec(8),))
    with pytest.raises(ShapeMismatch):
        shape_trace(arch)


def test_arch_json_round_trip():
    arch = case_study_arch(101)
    again = NetworkArch.from_json_dict(arch.to_json_dict())
    assert again == arch


def test_initialize_deterministic():
    a = Network.initialize(desk_arch(33), seed=11)
    b = Network.initialize(desk_arch(33), seed=11)
    assert np.array_equal(a.param_vector(), b.param_vector())
    c = Network.initialize(desk_arch(33), seed=12)
    assert not np.array_equal(a.param_vector(), c.param_vector())


def test_untrained_golden_output():
    net = Network.initialize(desk_arch(33), seed=0)
    geom = RveGeometry(1.0, (Sphere((0.5, 0.5, 0.5), 0.3),), 0.0, 0.0, 0)
    grid = voxelize(geom, 33)
    out = net.predict_grids(grid.values[None].astype(np.float32))
    assert out.shape == (1, 12)
    assert np.allclose(out[0], GOLDEN_UNTRAINED, rtol=1e-4, atol=1e-5)
    # sigmoid output head keeps everything in (0, 1)
    assert np.all(out > 0.0) and np.all(out < 1.0)


def test_predict_accepts_single_grid():
    net = Network.initialize(desk_arch(33), seed=0)
    grid = np.zeros((33, 33, 33), dtype=np.uint8)
    single = net.predict_grids(grid)
    batch = net.predict_grids(np.stack([grid, grid]))
    assert single.shape == (1, 12)
    assert np.array_equal(batch[0], batch[1])
    assert np.allclose(single[0], batch[0])


def test_predict_batching_invariant():
    net = Network.initialize(
        NetworkArch(input_n=9, conv=(ConvSpec(2, filter_size=3),), fc=(FcSpec(4),)), seed=3
    )
    rng = np.random.default_rng(0)
    grids = (rng.random((7, 9, 9, 9)) < 0.3).astype(np.float32)
    whole = net.predict_grids(grids, batch_size=7)
    split = net.predict_grids(grids, batch_size=3)
    assert np.allclose(whole, split, rtol=1e-6)


def test_predict_rejects_wrong_extent():
    net = Network.initialize(desk_arch(33), seed=0)
    with pytest.raises(ShapeMismatch):
        net.predict_grids(np.zeros((17, 17, 17), dtype=np.float32))


def test_param_vector_round_trip():
    net = Network.initialize(desk_arch(33), seed=5)
    vec = net.param_vector()
    assert vec.dtype == np.dtype("<f4")
    other = Network.initialize(desk_arch(33), seed=6)
    other.load_param_vector(vec)
    assert np.array_equal(other.param_vector(), vec)
    with pytest.raises(ShapeMismatch):
        other.load_param_vector(vec[:-1])


def test_trainable_mask_all_true_for_fresh_net():
    net = Network.initialize(desk_arch(33), seed=0)
    assert all(net.trainable_mask())
    params = net.parameters()
    # desk arch: 2 conv + 2 fc + output, each contributing (W, b)
    assert len(params) == 10


def test_conv_activations_shapes():
    net = Network.initialize(desk_arch(33), seed=0)
    grid = np.zeros((33, 33, 33), dtype=np.float32)
    stages = net.conv_activations(grid)
    assert [a.shape for a in stages] == [(8, 29, 29, 29), (16, 10, 10, 10)]
    # post-activation maps are never negative
    assert all(a.min() >= 0.0 for a in stages)


def test_transfer_arch_structure():
    base = desk_arch(33)
    tl = transfer_arch(base, added_channels=32, filter_size=1, trainable_scope="last_fc")
    assert len(tl.conv) == len(base.conv) + 1
    assert tl.conv[-1] == ConvSpec(32, filter_size=1, pool=True, trainable=True)
    assert all(not spec.trainable for spec in tl.conv[:-1])
    assert [spec.trainable for spec in tl.fc] == [False, True]
    assert tl.output_trainable
    trace = shape_trace(tl)
    assert trace.extents[-1] >= 1


def test_transfer_arch_scopes():
    base = desk_arch(33)
    all_fc = transfer_arch(base, added_channels=8, filter_size=1, trainable_scope="all_fc")
    assert [spec.trainable for spec in all_fc.fc] == [True, True]
    assert all(not spec.trainable for spec in all_fc.conv[:-1])
    everything = transfer_arch(base, added_channels=8, filter_size=1, trainable_scope="all")
    assert all(spec.trainable for spec in everything.conv)
    assert all(spec.trainable for spec in everything.fc)
    with pytest.raises(InvalidConfig):
        transfer_arch(base, trainable_scope="nothing")


def test_transfer_arch_must_fit():
    base = desk_arch(33)
    with pytest.raises(ShapeMismatch):
        transfer_arch(base, added_channels=8, filter_size=7)  # 7 > extent 5


def test_network_arch_validation():
    with pytest.raises(InvalidConfig):
        NetworkArch(input_n=33, conv=(), fc=(FcSpec(4),))
    # an empty fc stack is legal: flatten feeds the output head directly
    bare = NetworkArch(input_n=9, conv=(ConvSpec(2, filter_size=3),), fc=())
    assert shape_trace(bare).flatten_dim > 0
    with pytest.raises(InvalidConfig):
        NetworkArch(
            input_n=33, conv=(ConvSpec(4),), fc=(FcSpec(4),), fc_activation="softmax"
        )
