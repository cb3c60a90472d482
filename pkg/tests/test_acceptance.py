"""Acceptance gate: the end-to-end properties the package promises.

Each test covers one promise, prints a single PASS/FAIL line (visible
with -s, or in the captured output on failure), and enforces a wall-clock
budget.  The expensive artifacts (the 300-sample training set, the
ellipsoid set, the trained surrogate) are session fixtures shared across
tests; their build time is charged to the promise that needs them.

Run order matters only for readability; every test stands alone given its
fixtures.
"""

import contextlib
import json
import time

import numpy as np
import pytest

from conftest import central_difference, check_gradient_entries, relative_error
from voxhomog.cli import main as cli_main
from voxhomog.homog import (
    DEFAULT_INCLUSION,
    DEFAULT_MATRIX,
    DEFAULT_PHASES,
    EffectiveProperties,
    extract_engineering_constants,
    homogenize,
    isotropic_stiffness,
    voigt_reuss_bounds,
)
from voxhomog.microgeom import generate_rve
from voxhomog.nn.io import load_checkpoint
from voxhomog.nn.layers import Conv3D, Dense, Flatten, MaxPool3D
from voxhomog.nn.network import case_study_arch, desk_arch, shape_trace
from voxhomog.nn.training import TrainConfig
from voxhomog.pipeline import (
    DatasetConfig,
    UqConfig,
    build_dataset,
    evaluate_checkpoint,
    train_on_manifest,
    transfer_train,
    uq_run,
)
from voxhomog.voxel import PhaseGrid, voxelize

SPHERE_SET = DatasetConfig(total=300, split=(240, 30, 30), grid_n=33, seed=101)
ELLIPSOID_SET = DatasetConfig(
    total=120,
    split=(75, 23, 22),
    grid_n=33,
    shape_kind="ellipsoid",
    vf_min=0.02,
    vf_max=0.20,
    seed=202,
)


@contextlib.contextmanager
def _promise(name: str, budget_s: float, carried_s: float = 0.0):
    t0 = time.perf_counter()
    try:
        yield
    except BaseException:
        print(f"{name}: FAIL", flush=True)
        raise
    elapsed = carried_s + time.perf_counter() - t0
    assert elapsed < budget_s, f"{name} took {elapsed:.0f} s, budget {budget_s:.0f} s"
    print(f"{name}: PASS ({elapsed:.1f} s)", flush=True)


@pytest.fixture(scope="session")
def timings():
    return {}


@pytest.fixture(scope="session")
def sphere_dataset(tmp_path_factory, timings):
    t0 = time.perf_counter()
    manifest = build_dataset(SPHERE_SET, tmp_path_factory.mktemp("accept") / "spheres")
    timings["sphere_dataset"] = time.perf_counter() - t0
    return manifest


@pytest.fixture(scope="session")
def desk_checkpoint(sphere_dataset, tmp_path_factory, timings):
    t0 = time.perf_counter()
    out = tmp_path_factory.mktemp("accept-ckpt") / "desk.ckpt"
    cfg = TrainConfig(epochs=300, batch_size=25, seed=11)
    net, scaling, log = train_on_manifest(sphere_dataset, desk_arch(33), cfg, out_path=out)
    timings["desk_training"] = time.perf_counter() - t0
    return out, net, scaling, log


@pytest.fixture(scope="session")
def ellipsoid_dataset(tmp_path_factory, timings):
    t0 = time.perf_counter()
    manifest = build_dataset(ELLIPSOID_SET, tmp_path_factory.mktemp("accept-tl") / "ellipsoids")
    timings["ellipsoid_dataset"] = time.perf_counter() - t0
    return manifest


def test_1_single_phase_exactness():
    with _promise("single-phase exactness", 60.0):
        for phase, fill in ((DEFAULT_MATRIX, 0), (DEFAULT_INCLUSION, 1)):
            analytic = isotropic_stiffness(phase)
            for n in (17, 33):
                grid = PhaseGrid(np.full((n, n, n), fill, dtype=np.uint8), spacing=1.0 / n)
                result = homogenize(grid, DEFAULT_PHASES)
                err = np.max(np.abs(result.matrix - analytic)) / np.max(np.abs(analytic))
                assert err <= 1e-8, f"n={n} fill={fill}: stiffness error {err:.2e}"
                # uniform media carry no fluctuation, so CG never starts
                assert result.iterations == (0, 0, 0, 0, 0, 0)
            props = extract_engineering_constants(analytic).as_array()
            e, nu = phase.young_modulus, phase.poisson_ratio
            g = e / (2.0 * (1.0 + nu))
            assert np.all(np.abs(props[:3] - e) <= 1e-8 * e)
            assert np.all(np.abs(props[3:6] - g) <= 1e-8 * g)
            assert np.all(np.abs(props[6:] - nu) <= 1e-8)


def test_2_moduli_within_mixture_bounds():
    with _promise("mixture bounds", 20 * 60.0):
        reuss_hi, voigt_hi = voigt_reuss_bounds(DEFAULT_PHASES, 0.28)
        assert reuss_hi == pytest.approx(89.38, abs=5e-3)
        assert voigt_hi == pytest.approx(155.784, abs=1e-3)
        for i, vf in enumerate(np.linspace(0.02, 0.28, 20)):
            geom = generate_rve(float(vf), (0.05, 0.1), "sphere", 1.0, 404 + i)
            grid = voxelize(geom, 33)
            result = homogenize(grid, DEFAULT_PHASES)
            moduli = extract_engineering_constants(result.matrix).as_array()[:3]
            reuss, voigt = voigt_reuss_bounds(DEFAULT_PHASES, float(grid.values.mean()))
            assert np.all(moduli >= reuss - 1e-6), f"vf {vf:.3f}: {moduli} below {reuss}"
            assert np.all(moduli <= voigt + 1e-6), f"vf {vf:.3f}: {moduli} above {voigt}"


def test_3_gradient_oracle():
    with _promise("gradient oracle", 5 * 60.0):
        rng = np.random.default_rng(31)

        def scalar_loss(out):
            return float(np.sum(out * np.cos(np.arange(out.size).reshape(out.shape))))

        def loss_grad(out):
            return np.cos(np.arange(out.size).reshape(out.shape))

        conv = Conv3D.create(rng, 2, 3, filter_size=3, dtype=np.float64)
        x = rng.standard_normal((2, 2, 7, 7, 7))

        def conv_run():
            return scalar_loss(conv.forward(x, cache=True))

        conv.backward(loss_grad(conv.forward(x, cache=True)))
        idx = rng.choice(conv.weights.size, size=50, replace=False)
        worst = check_gradient_entries(conv_run, conv.weights, conv.grad_weights, idx)
        assert worst < 1e-6, f"conv weights: {worst:.2e}"
        worst = check_gradient_entries(
            conv_run, conv.bias, conv.grad_bias, np.arange(conv.bias.size)
        )
        assert worst < 1e-6, f"conv bias: {worst:.2e}"

        dense = Dense.create(rng, 30, 20, activation="sigmoid", dtype=np.float64)
        xd = rng.standard_normal((4, 30))

        def dense_run():
            return scalar_loss(dense.forward(xd, cache=True))

        dense.backward(loss_grad(dense.forward(xd, cache=True)))
        idx = rng.choice(dense.weights.size, size=50, replace=False)
        worst = check_gradient_entries(dense_run, dense.weights, dense.grad_weights, idx)
        assert worst < 1e-6, f"dense weights: {worst:.2e}"
        worst = check_gradient_entries(
            dense_run, dense.bias, dense.grad_bias, np.arange(dense.bias.size)
        )
        assert worst < 1e-6, f"dense bias: {worst:.2e}"

        # pooling and flattening carry no parameters; their backward passes
        # are exercised through the input gradient of a full stack
        conv2 = Conv3D.create(rng, 1, 2, filter_size=3, dtype=np.float64)
        pool, flat = MaxPool3D(), Flatten()
        dense2 = Dense.create(rng, 2 * 27, 5, activation="sigmoid", dtype=np.float64)
        xs = rng.standard_normal((2, 1, 8, 8, 8))

        def stack_run():
            h = flat.forward(pool.forward(conv2.forward(xs, cache=True), cache=True), cache=True)
            return scalar_loss(dense2.forward(h, cache=True))

        h = flat.forward(pool.forward(conv2.forward(xs, cache=True), cache=True), cache=True)
        out = dense2.forward(h, cache=True)
        dx = conv2.backward(pool.backward(flat.backward(dense2.backward(loss_grad(out)))))
        # ReLU and argmax kinks make differences meaningless when one sits
        # inside the stencil; two step widths agreeing flags a clean entry
        checked, worst = 0, 0.0
        for ix in rng.choice(xs.size, size=90, replace=False):
            step = 1e-6 * max(1.0, abs(xs.ravel()[ix]))
            d1 = central_difference(stack_run, xs, ix, step)
            d2 = central_difference(stack_run, xs, ix, 2.0 * step)
            if relative_error(d1, d2) > 1e-7:
                continue
            worst = max(worst, relative_error(d1, float(dx.ravel()[ix])))
            checked += 1
        assert checked >= 50, f"only {checked} entries clear of kinks"
        assert worst < 1e-6, f"stack input: {worst:.2e}"


def test_4_shape_algebra():
    with _promise("shape algebra", 60.0):
        big = shape_trace(case_study_arch(101))
        assert big.extents == (101, 97, 48, 44, 22, 18, 9)
        assert big.flatten_dim == 23328
        desk = shape_trace(desk_arch(33))
        assert desk.extents == (33, 29, 14, 10, 5)
        assert desk.flatten_dim == 2000


def test_5_desk_scale_learning(sphere_dataset, desk_checkpoint, timings):
    carried = timings["sphere_dataset"] + timings["desk_training"]
    with _promise("desk-scale learning", 4 * 3600.0, carried):
        out, _, _, log = desk_checkpoint
        assert len(log.train_loss) <= 300
        report = evaluate_checkpoint(load_checkpoint(out), sphere_dataset, "test")
        print(
            f"  test MARE: worst modulus {100 * report.moduli_max:.2f} %, "
            f"worst Poisson {100 * report.poisson_max:.2f} %",
            flush=True,
        )
        for name in EffectiveProperties.COMPONENTS[:6]:
            assert report.per_component[name] < 0.05, f"{name}: {report.per_component[name]:.4f}"
        for name in EffectiveProperties.COMPONENTS[6:]:
            assert report.per_component[name] < 0.03, f"{name}: {report.per_component[name]:.4f}"


def test_6_uncertainty_propagation(desk_checkpoint, timings):
    with _promise("uncertainty propagation", 3600.0):
        ckpt = load_checkpoint(desk_checkpoint[0])
        mid = uq_run(
            ckpt,
            UqConfig(vf_mean=0.14, vf_sd=0.007, n_samples=50, grid_n=33, seed=303),
            with_oracle=True,
        )
        for k in range(6):
            s, o = mid.surrogate[k], mid.oracle[k]
            mean_err = abs(s.mu - o.mu) / abs(o.mu)
            assert mean_err < 0.02, f"{s.component}: mean off by {100 * mean_err:.2f} %"
            ratio = s.sigma / o.sigma
            assert 0.5 <= ratio <= 1.5, f"{s.component}: sigma ratio {ratio:.2f}"
        # the predicted distributions shift the right way with the mean fraction
        lo = uq_run(
            ckpt,
            UqConfig(vf_mean=0.07, vf_sd=0.007, n_samples=50, grid_n=33, seed=304),
            with_oracle=False,
        )
        hi = uq_run(
            ckpt,
            UqConfig(vf_mean=0.21, vf_sd=0.007, n_samples=50, grid_n=33, seed=305),
            with_oracle=False,
        )
        for k in range(6):
            name = mid.surrogate[k].component
            assert lo.surrogate[k].mu < mid.surrogate[k].mu < hi.surrogate[k].mu, name
        for k in range(6, 12):
            name = mid.surrogate[k].component
            assert lo.surrogate[k].mu > mid.surrogate[k].mu > hi.surrogate[k].mu, name


def test_7_transfer_beats_scratch(desk_checkpoint, ellipsoid_dataset, timings, tmp_path):
    carried = timings["ellipsoid_dataset"]
    with _promise("transfer beats scratch", 2 * 3600.0, carried):
        base = load_checkpoint(desk_checkpoint[0])
        scratch_cfg = TrainConfig(epochs=200, batch_size=25, patience=200, seed=12)
        _, _, ts_log = train_on_manifest(ellipsoid_dataset, desk_arch(33), scratch_cfg)
        assert len(ts_log.val_loss) == 200

        tuned_cfg = TrainConfig(epochs=50, batch_size=25, patience=50, seed=13)
        tl_net, _, tl_log = transfer_train(
            base, ellipsoid_dataset, tuned_cfg, out_path=tmp_path / "tl.ckpt"
        )
        print(
            f"  epoch-1 val: tuned {tl_log.val_loss[0]:.6f} vs scratch {ts_log.val_loss[0]:.6f}; "
            f"tuned best {min(tl_log.val_loss):.6f} vs scratch final {ts_log.val_loss[-1]:.6f}",
            flush=True,
        )
        assert tl_log.val_loss[0] < ts_log.val_loss[0]
        assert min(tl_log.val_loss) <= ts_log.val_loss[-1]
        # the inherited conv stack stays bit-identical through fine-tuning
        base_convs = [l for l in base.build_network().layers if isinstance(l, Conv3D)]
        tl_convs = [l for l in tl_net.layers if isinstance(l, Conv3D)]
        assert len(tl_convs) == len(base_convs) + 1
        for src, dst in zip(base_convs, tl_convs):
            assert np.array_equal(dst.weights, src.weights)
            assert np.array_equal(dst.bias, src.bias)


def test_8_rerun_byte_determinism(tmp_path):
    with _promise("rerun determinism", 10 * 60.0):
        config = tmp_path / "run.json"
        config.write_text(
            json.dumps(
                {
                    "seed": 55,
                    "dataset": {
                        "total": 6, "split": [4, 1, 1], "grid_n": 17,
                        "vf_min": 0.04, "vf_max": 0.12, "n_bins": 3,
                    },
                    "network": {"conv": [{"channels": 2, "filter_size": 5}], "fc": [4]},
                    "training": {"epochs": 2, "batch_size": 2},
                    "uq": {"vf_mean": 0.10, "vf_sd": 0.01, "n_samples": 2, "oracle": True},
                }
            )
        )
        for run in ("a", "b"):
            data = tmp_path / run / "data"
            train = tmp_path / run / "train"
            uq = tmp_path / run / "uq"
            assert cli_main(["gen", "--config", str(config), "--out", str(data)]) == 0
            assert (
                cli_main(
                    ["train", "--config", str(config), "--data", str(data), "--out", str(train)]
                )
                == 0
            )
            assert (
                cli_main(
                    [
                        "uq",
                        "--config", str(config),
                        "--checkpoint", str(train / "checkpoint.ckpt"),
                        "--out", str(uq),
                    ]
                )
                == 0
            )
        for rel in (
            "data/manifest.json",
            "data/labels.csv",
            "train/checkpoint.ckpt",
            "train/config.resolved.json",
            "uq/uq.json",
        ):
            a = (tmp_path / "a" / rel).read_bytes()
            b = (tmp_path / "b" / rel).read_bytes()
            assert a == b, f"{rel} differs between identical reruns"
