"""Dataset production and the measurement loops built on top of it.

A dataset is a directory: a manifest (config echo, schedule, sample table,
split sizes), a labels CSV, and one geometry JSON plus one grid file per
sample.  Sample i is fully determined by the dataset seed and i, so
workers can build samples in any order and the result is byte-identical;
a stalled packing is retried up to three times with attempt-derived seeds.

The same module hosts what gets run against a trained surrogate: relative
error per output component, distribution summaries under input
uncertainty, and fine-tuning a checkpoint on a second dataset.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    EmptySplit,
    InvalidConfig,
    PackingStalled,
    TooFewSamples,
    ZeroLabel,
)
from .homog import (
    DEFAULT_INCLUSION,
    DEFAULT_MATRIX,
    EffectiveProperties,
    IsotropicPhase,
    extract_engineering_constants,
    homogenize,
)
from .microgeom import DEFAULT_DECAY, SampleSchedule, generate_rve, sample_schedule
from .nn.io import Checkpoint, save_checkpoint
from .nn.network import Network, NetworkArch, transfer_arch
from .nn.training import LabelScaling, TrainConfig, TrainingLog, train_network
from .rng import derive_seed
from .voxel import load_grid, save_grid, voxelize

MANIFEST_NAME = "manifest.json"
LABELS_NAME = "labels.csv"
_RETRIES = 3
# Seed stream for the split shuffle; sample indices stay below 2**32.
_SPLIT_STREAM = 2**32
# Lower clamp for volume-fraction draws (the upper clamp is the packing cap).
VF_FLOOR = 1e-6
VF_CAP = 0.30

LABEL_COLUMNS = ("sample_id", "vf") + EffectiveProperties.COMPONENTS + ("asymmetry",)


@dataclass(frozen=True)
class DatasetConfig:
    total: int
    split: tuple[int, int, int]
    grid_n: int = 33
    vf_min: float = 0.02
    vf_max: float = 0.28
    n_bins: int = 14
    decay: float = DEFAULT_DECAY
    shape_kind: str = "sphere"
    r_min: float = 0.05
    r_max: float = 0.1
    edge_length: float = 1.0
    seed: int = 0
    tol: float = 1e-8
    vf_tolerance: float = 0.002
    gap: float = 0.005
    max_attempts: int = 5000
    matrix: IsotropicPhase = DEFAULT_MATRIX
    inclusion: IsotropicPhase = DEFAULT_INCLUSION

    def __post_init__(self):
        if self.total < 1:
            raise InvalidConfig(f"total must be >= 1, got {self.total}")
        if len(self.split) != 3 or any(s < 0 for s in self.split):
            raise InvalidConfig(f"split must be three non-negative counts, got {self.split}")
        if sum(self.split) != self.total:
            raise InvalidConfig(
                f"split {self.split} sums to {sum(self.split)}, expected total {self.total}"
            )

    @property
    def phases(self) -> tuple[IsotropicPhase, IsotropicPhase]:
        return (self.matrix, self.inclusion)

    def schedule(self) -> SampleSchedule:
        return sample_schedule(self.vf_min, self.vf_max, self.n_bins, self.total, self.decay)

    def to_json_dict(self) -> dict:
        return {
            "total": self.total,
            "split": list(self.split),
            "grid_n": self.grid_n,
            "vf_min": self.vf_min,
            "vf_max": self.vf_max,
            "n_bins": self.n_bins,
            "decay": self.decay,
            "shape_kind": self.shape_kind,
            "r_min": self.r_min,
            "r_max": self.r_max,
            "edge_length": self.edge_length,
            "seed": self.seed,
            "tol": self.tol,
            "vf_tolerance": self.vf_tolerance,
            "gap": self.gap,
            "max_attempts": self.max_attempts,
            "matrix": [self.matrix.young_modulus, self.matrix.poisson_ratio],
            "inclusion": [self.inclusion.young_modulus, self.inclusion.poisson_ratio],
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "DatasetConfig":
        data = dict(data)
        data["split"] = tuple(data["split"])
        data["matrix"] = IsotropicPhase(*data["matrix"])
        data["inclusion"] = IsotropicPhase(*data["inclusion"])
        return cls(**data)


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    target_vf: float
    achieved_vf: float
    split: str
    geometry: str  # paths relative to the dataset directory
    grid: str


@dataclass
class DatasetManifest:
    config: DatasetConfig
    samples: list[SampleRecord]
    root: Path = field(default_factory=Path)

    def split_records(self, split: str) -> list[SampleRecord]:
        if split not in ("train", "val", "test"):
            raise InvalidConfig(f"split must be train/val/test, got {split!r}")
        return [s for s in self.samples if s.split == split]

    def to_json_dict(self) -> dict:
        sched = self.config.schedule()
        return {
            "format": "voxhomog-dataset",
            "version": 1,
            "config": self.config.to_json_dict(),
            "schedule": {
                "volume_fractions": list(sched.volume_fractions),
                "counts": list(sched.counts),
            },
            "splits": {
                "train": sum(1 for s in self.samples if s.split == "train"),
                "val": sum(1 for s in self.samples if s.split == "val"),
                "test": sum(1 for s in self.samples if s.split == "test"),
            },
            "labels_csv": LABELS_NAME,
            "samples": [
                {
                    "sample_id": s.sample_id,
                    "target_vf": s.target_vf,
                    "achieved_vf": s.achieved_vf,
                    "split": s.split,
                    "geometry": s.geometry,
                    "grid": s.grid,
                }
                for s in self.samples
            ],
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, sort_keys=True, separators=(",", ":"))
            fh.write("\n")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if data.get("format") != "voxhomog-dataset":
        raise InvalidConfig(f"{path}: not a dataset manifest")
    samples = [
        SampleRecord(
            sample_id=s["sample_id"],
            target_vf=float(s["target_vf"]),
            achieved_vf=float(s["achieved_vf"]),
            split=s["split"],
            geometry=s["geometry"],
            grid=s["grid"],
        )
        for s in data["samples"]
    ]
    ids = [s.sample_id for s in samples]
    if len(set(ids)) != len(ids):
        raise InvalidConfig(f"{path}: duplicate sample ids")
    manifest = DatasetManifest(
        config=DatasetConfig.from_json_dict(data["config"]),
        samples=samples,
        root=path.parent,
    )
    for s in samples:
        for rel in (s.geometry, s.grid):
            if not (manifest.root / rel).exists():
                raise InvalidConfig(f"{path}: missing sample file {rel}")
    return manifest


def _build_sample(task: tuple) -> tuple[str, float, list[float], float]:
    """Generate, voxelize and homogenize one sample; writes its two files.

    Module-level so process pools can pickle it.  Returns (sample_id,
    achieved_vf, 12 labels, asymmetry).
    """
    sample_id, index, target_vf, cfg, root = task
    geom = None
    for attempt in range(_RETRIES):
        seed = derive_seed(cfg.seed, index, attempt)
        try:
            geom = generate_rve(
                target_vf,
                (cfg.r_min, cfg.r_max),
                cfg.shape_kind,
                cfg.edge_length,
                seed,
                vf_tolerance=cfg.vf_tolerance,
                gap=cfg.gap,
                max_attempts=cfg.max_attempts,
            )
            break
        except PackingStalled:
            if attempt == _RETRIES - 1:
                raise
    grid = voxelize(geom, cfg.grid_n)
    result = homogenize(grid, cfg.phases, tol=cfg.tol)
    props = extract_engineering_constants(result.matrix)
    root = Path(root)
    geom.save(root / "geom" / f"{sample_id}.json")
    save_grid(grid, root / "grids" / f"{sample_id}.bin")
    return sample_id, geom.achieved_vf, [float(v) for v in props.as_array()], result.asymmetry


def build_dataset(config: DatasetConfig, out_dir, workers: int = 1) -> DatasetManifest:
    """Produce a dataset directory and return its manifest.

    ``workers`` > 1 distributes samples over processes; results are
    collected in sample order, so worker count never changes the output.
    """
    out_dir = Path(out_dir)
    (out_dir / "geom").mkdir(parents=True, exist_ok=True)
    (out_dir / "grids").mkdir(parents=True, exist_ok=True)

    sched = config.schedule()
    width = max(4, len(str(config.total - 1)))
    tasks = []
    index = 0
    for vf, count in sched.items():
        for _ in range(count):
            tasks.append((f"s{index:0{width}d}", index, vf, config, str(out_dir)))
            index += 1

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_build_sample, tasks, chunksize=1))
    else:
        results = [_build_sample(t) for t in tasks]

    # Seeded shuffle, then contiguous cuts in train/val/test order.
    rng = np.random.Generator(np.random.PCG64(derive_seed(config.seed, _SPLIT_STREAM)))
    order = rng.permutation(config.total)
    split_of = {}
    n_train, n_val, _ = config.split
    for pos, sample_ix in enumerate(order):
        if pos < n_train:
            split_of[sample_ix] = "train"
        elif pos < n_train + n_val:
            split_of[sample_ix] = "val"
        else:
            split_of[sample_ix] = "test"

    records = []
    rows = []
    for (sample_id, index, vf, _, _), (rid, achieved, labels, asym) in zip(tasks, results):
        assert rid == sample_id
        records.append(
            SampleRecord(
                sample_id=sample_id,
                target_vf=vf,
                achieved_vf=achieved,
                split=split_of[index],
                geometry=f"geom/{sample_id}.json",
                grid=f"grids/{sample_id}.bin",
            )
        )
        rows.append([sample_id, achieved] + labels + [asym])

    with open(out_dir / LABELS_NAME, "w", encoding="utf-8") as fh:
        fh.write(",".join(LABEL_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(row[0:1] + [repr(float(v)) for v in row[1:]]) + "\n")

    manifest = DatasetManifest(config=config, samples=records, root=out_dir)
    manifest.save(out_dir / MANIFEST_NAME)
    return manifest


def read_labels(manifest: DatasetManifest) -> dict[str, np.ndarray]:
    """sample_id -> the 12 label values, from the dataset's CSV."""
    out = {}
    with open(manifest.root / LABELS_NAME, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if tuple(header) != LABEL_COLUMNS:
            raise InvalidConfig(f"unexpected label columns {header}")
        for line in fh:
            parts = line.strip().split(",")
            out[parts[0]] = np.array([float(v) for v in parts[2:14]])
    return out


def load_split(manifest: DatasetManifest, split: str) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """(grids uint8 (N, n, n, n), labels (N, 12), ids) for one split."""
    records = manifest.split_records(split)
    if not records:
        raise EmptySplit(f"split {split!r} holds no samples")
    labels = read_labels(manifest)
    n = manifest.config.grid_n
    grids = np.empty((len(records), n, n, n), dtype=np.uint8)
    y = np.empty((len(records), 12))
    ids = []
    for i, rec in enumerate(records):
        grids[i] = load_grid(
            manifest.root / rec.grid, edge_length=manifest.config.edge_length
        ).values
        y[i] = labels[rec.sample_id]
        ids.append(rec.sample_id)
    return grids, y, ids


# -- training entry points -----------------------------------------------------


def train_on_manifest(
    manifest: DatasetManifest,
    arch: NetworkArch,
    config: TrainConfig,
    out_path=None,
) -> tuple[Network, LabelScaling, TrainingLog]:
    """Fit label scaling on the training split, train, optionally save."""
    train_g, train_y, _ = load_split(manifest, "train")
    val_g, val_y, _ = load_split(manifest, "val")
    scaling = LabelScaling.fit(train_y)
    net = Network.initialize(arch, seed=config.seed)
    log = train_network(
        net, train_g, scaling.transform(train_y), val_g, scaling.transform(val_y), config
    )
    if out_path is not None:
        save_checkpoint(out_path, net, seed=config.seed, scaling=scaling, log=log)
    return net, scaling, log


def transfer_train(
    base: Checkpoint,
    manifest: DatasetManifest,
    config: TrainConfig,
    added_channels: int = 32,
    filter_size: int = 5,
    trainable_scope: str = "last_fc",
    out_path=None,
) -> tuple[Network, LabelScaling, TrainingLog]:
    """Fine-tune a trained checkpoint on a new dataset.

    The base conv stack is copied bit for bit and (by default) frozen; one
    new conv stage and the re-dimensioned dense stack come from a fresh
    seeded init; only the last hidden layer and the output head train.
    """
    arch = transfer_arch(base.arch, added_channels, filter_size, trainable_scope)
    net = Network.initialize(arch, seed=config.seed)
    base_net = base.build_network()
    from .nn.layers import Conv3D  # local import keeps module deps one-way

    base_convs = [l for l in base_net.layers if isinstance(l, Conv3D)]
    new_convs = [l for l in net.layers if isinstance(l, Conv3D)]
    for src, dst in zip(base_convs, new_convs[: len(base_convs)]):
        dst.weights[...] = src.weights
        dst.bias[...] = src.bias

    train_g, train_y, _ = load_split(manifest, "train")
    val_g, val_y, _ = load_split(manifest, "val")
    scaling = LabelScaling.fit(train_y)
    log = train_network(
        net, train_g, scaling.transform(train_y), val_g, scaling.transform(val_y), config
    )
    provenance = {
        "base_params_sha256": hashlib.sha256(base.params.astype("<f4").tobytes()).hexdigest(),
        "trainable_scope": trainable_scope,
        "added_channels": added_channels,
    }
    if out_path is not None:
        save_checkpoint(
            out_path, net, seed=config.seed, scaling=scaling, log=log, provenance=provenance
        )
    return net, scaling, log


# -- evaluation ---------------------------------------------------------------


def predict_raw(checkpoint: Checkpoint, grids: np.ndarray) -> np.ndarray:
    """Surrogate predictions in physical units (needs a trained checkpoint)."""
    if checkpoint.scaling is None:
        raise InvalidConfig("checkpoint carries no label scaling; train it first")
    net = checkpoint.build_network()
    return checkpoint.scaling.inverse(net.predict_grids(grids))


def mean_absolute_relative_error(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Per-component mean of |pred - truth| / |truth| over samples."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise InvalidConfig(f"prediction {pred.shape} vs truth {truth.shape}")
    if np.any(truth == 0.0):
        raise ZeroLabel("reference labels contain zeros; relative error undefined")
    return np.mean(np.abs(pred - truth) / np.abs(truth), axis=0)


@dataclass(frozen=True)
class MareReport:
    per_component: dict[str, float]

    @property
    def moduli_max(self) -> float:
        return max(self.per_component[k] for k in EffectiveProperties.COMPONENTS[:6])

    @property
    def poisson_max(self) -> float:
        return max(self.per_component[k] for k in EffectiveProperties.COMPONENTS[6:])

    def to_json_dict(self) -> dict:
        return {
            "per_component": self.per_component,
            "moduli_max": self.moduli_max,
            "poisson_max": self.poisson_max,
        }


def evaluate_checkpoint(
    checkpoint: Checkpoint, manifest: DatasetManifest, split: str = "test"
) -> MareReport:
    grids, truth, _ = load_split(manifest, split)
    pred = predict_raw(checkpoint, grids)
    errs = mean_absolute_relative_error(pred, truth)
    return MareReport(
        per_component={
            name: float(e) for name, e in zip(EffectiveProperties.COMPONENTS, errs)
        }
    )


# -- uncertainty propagation ---------------------------------------------------


def gaussian_fit(samples) -> tuple[float, float]:
    """Sample mean and the unbiased (n-1 denominator) standard deviation."""
    values = np.asarray(samples, dtype=float)
    if values.ndim != 1 or values.size < 2:
        raise TooFewSamples(f"need at least 2 values, got shape {values.shape}")
    return float(values.mean()), float(values.std(ddof=1))


@dataclass(frozen=True)
class UqConfig:
    vf_mean: float
    vf_sd: float
    n_samples: int = 50
    grid_n: int = 33
    shape_kind: str = "sphere"
    r_min: float = 0.05
    r_max: float = 0.1
    edge_length: float = 1.0
    seed: int = 0
    tol: float = 1e-8
    histogram_bins: int = 20
    matrix: IsotropicPhase = DEFAULT_MATRIX
    inclusion: IsotropicPhase = DEFAULT_INCLUSION

    def __post_init__(self):
        if self.vf_sd <= 0.0:
            raise InvalidConfig(f"vf_sd must be positive, got {self.vf_sd}")
        if not (0.0 < self.vf_mean <= VF_CAP):
            raise InvalidConfig(f"vf_mean must lie in (0, {VF_CAP}], got {self.vf_mean}")
        if self.n_samples < 2:
            raise InvalidConfig(f"n_samples must be >= 2, got {self.n_samples}")
        if self.histogram_bins < 1:
            raise InvalidConfig(f"histogram_bins must be >= 1, got {self.histogram_bins}")


@dataclass(frozen=True)
class DistributionSummary:
    component: str
    bins: tuple[float, ...]  # edges, len = counts + 1
    counts: tuple[int, ...]
    mu: float
    sigma: float

    def to_json_dict(self) -> dict:
        return {
            "component": self.component,
            "bins": list(self.bins),
            "counts": list(self.counts),
            "mu": self.mu,
            "sigma": self.sigma,
        }


def _summaries(values: np.ndarray, bins: int) -> list[DistributionSummary]:
    out = []
    for k, name in enumerate(EffectiveProperties.COMPONENTS):
        col = values[:, k]
        counts, edges = np.histogram(col, bins=bins)
        mu, sigma = gaussian_fit(col)
        out.append(
            DistributionSummary(
                component=name,
                bins=tuple(float(e) for e in edges),
                counts=tuple(int(c) for c in counts),
                mu=mu,
                sigma=sigma,
            )
        )
    return out


@dataclass
class UqResult:
    config: UqConfig
    vf_draws: np.ndarray
    surrogate: list[DistributionSummary]
    oracle: list[DistributionSummary] | None
    surrogate_values: np.ndarray  # (n_samples, 12)
    oracle_values: np.ndarray | None

    def to_json_dict(self) -> dict:
        data = {
            "vf_mean": self.config.vf_mean,
            "vf_sd": self.config.vf_sd,
            "n_samples": self.config.n_samples,
            "seed": self.config.seed,
            "surrogate": [s.to_json_dict() for s in self.surrogate],
        }
        if self.oracle is not None:
            data["oracle"] = [s.to_json_dict() for s in self.oracle]
        return data


def _uq_sample_task(task: tuple) -> tuple[np.ndarray, list[float] | None]:
    index, cfg, with_oracle = task
    rng = np.random.Generator(np.random.PCG64(derive_seed(cfg.seed, index)))
    vf = float(np.clip(rng.normal(cfg.vf_mean, cfg.vf_sd), VF_FLOOR, VF_CAP))
    geom = None
    for attempt in range(_RETRIES):
        try:
            geom = generate_rve(
                vf,
                (cfg.r_min, cfg.r_max),
                cfg.shape_kind,
                cfg.edge_length,
                derive_seed(cfg.seed, index, attempt + 1),
            )
            break
        except PackingStalled:
            if attempt == _RETRIES - 1:
                raise
    grid = voxelize(geom, cfg.grid_n)
    labels = None
    if with_oracle:
        result = homogenize(grid, (cfg.matrix, cfg.inclusion), tol=cfg.tol)
        labels = [float(v) for v in extract_engineering_constants(result.matrix).as_array()]
    return grid.values, labels


def uq_run(
    checkpoint: Checkpoint,
    config: UqConfig,
    with_oracle: bool = True,
    workers: int = 1,
) -> UqResult:
    """Push Gaussian volume-fraction uncertainty through the surrogate.

    Draws are clamped into (0, 0.30].  The same microstructures feed the
    surrogate and (optionally) the reference solver, so the two output
    distributions are directly comparable.
    """
    draws = np.empty(config.n_samples)
    for i in range(config.n_samples):
        rng = np.random.Generator(np.random.PCG64(derive_seed(config.seed, i)))
        draws[i] = float(np.clip(rng.normal(config.vf_mean, config.vf_sd), VF_FLOOR, VF_CAP))

    tasks = [(i, config, with_oracle) for i in range(config.n_samples)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_uq_sample_task, tasks, chunksize=1))
    else:
        results = [_uq_sample_task(t) for t in tasks]

    grids = np.stack([g for g, _ in results])
    surrogate_values = predict_raw(checkpoint, grids)
    oracle_values = (
        np.array([labels for _, labels in results]) if with_oracle else None
    )
    return UqResult(
        config=config,
        vf_draws=draws,
        surrogate=_summaries(surrogate_values, config.histogram_bins),
        oracle=_summaries(oracle_values, config.histogram_bins) if with_oracle else None,
        surrogate_values=surrogate_values,
        oracle_values=oracle_values,
    )
