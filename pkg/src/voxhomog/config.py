"""Run configuration: one file, one seed, strictly validated.

Configs are TOML or JSON (picked by extension) with optional sections
[dataset], [phases], [solver], [network], [training], [uq], [transfer] and
top-level ``seed`` / ``threads``.  Unknown keys anywhere are rejected, so
typos fail loudly instead of silently falling back to defaults.  The fully
resolved configuration (defaults filled in) can be echoed next to any
produced artifact.

One seed drives a whole run; section-level generators derive their own
streams from it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

from .errors import InvalidConfig
from .homog import DEFAULT_INCLUSION, DEFAULT_MATRIX, IsotropicPhase
from .nn.network import (
    ConvSpec,
    FcSpec,
    NetworkArch,
    case_study_arch,
    desk_arch,
)
from .nn.training import TrainConfig
from .pipeline import DatasetConfig, UqConfig

_TOP_KEYS = {"seed", "threads", "dataset", "phases", "solver", "network", "training", "uq", "transfer"}

_DATASET_KEYS = {
    "total", "split", "grid_n", "vf_min", "vf_max", "n_bins", "decay", "shape_kind",
    "r_min", "r_max", "edge_length", "tol", "vf_tolerance", "gap", "max_attempts",
}
_PHASES_KEYS = {"matrix_young", "matrix_poisson", "inclusion_young", "inclusion_poisson"}
_SOLVER_KEYS = {"tol", "max_iters"}
_NETWORK_KEYS = {"preset", "conv", "fc", "fc_activation", "output_activation"}
_TRAINING_KEYS = {"epochs", "batch_size", "learning_rate", "patience"}
_UQ_KEYS = {
    "vf_mean", "vf_sd", "n_samples", "grid_n", "shape_kind", "r_min", "r_max",
    "edge_length", "tol", "histogram_bins", "oracle",
}
_TRANSFER_KEYS = {"added_channels", "filter_size", "trainable_scope"}

_PRESETS = ("desk", "case_study")


def _check_keys(data: dict, allowed: set, where: str) -> None:
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise InvalidConfig(f"unknown key(s) in {where}: {', '.join(unknown)}")


def _coerce(sec: dict, int_keys: set, passthrough: set) -> dict:
    """Integer keys to int, everything else numeric to float."""
    out = {}
    for key, value in sec.items():
        if key in passthrough:
            out[key] = value
        elif key in int_keys:
            out[key] = int(value)
        else:
            out[key] = float(value)
    return out


def _section(data: dict, name: str) -> dict:
    sec = data.get(name, {})
    if not isinstance(sec, dict):
        raise InvalidConfig(f"[{name}] must be a table/object")
    return sec


@dataclass(frozen=True)
class RunConfig:
    seed: int
    threads: int
    phases: tuple[IsotropicPhase, IsotropicPhase]
    solver_tol: float
    solver_max_iters: int | None
    dataset_section: dict  # raw validated keys, resolved lazily (total/split required)
    network_section: dict
    training_section: dict
    uq_section: dict
    transfer_section: dict

    def dataset_config(self) -> DatasetConfig:
        sec = dict(self.dataset_section)
        if "total" not in sec or "split" not in sec:
            raise InvalidConfig("[dataset] needs at least 'total' and 'split'")
        sec["split"] = tuple(int(v) for v in sec["split"])
        sec = _coerce(sec, {"total", "grid_n", "n_bins", "max_attempts"}, {"shape_kind", "split"})
        return DatasetConfig(
            seed=self.seed, matrix=self.phases[0], inclusion=self.phases[1], **sec
        )

    def train_config(self) -> TrainConfig:
        sec = dict(self.training_section)
        if "epochs" not in sec:
            raise InvalidConfig("[training] needs 'epochs'")
        sec = _coerce(sec, {"epochs", "batch_size", "patience"}, set())
        return TrainConfig(seed=self.seed, **sec)

    def uq_config(self, default_grid_n: int | None = None) -> UqConfig:
        sec = {k: v for k, v in self.uq_section.items() if k != "oracle"}
        if "vf_mean" not in sec or "vf_sd" not in sec:
            raise InvalidConfig("[uq] needs 'vf_mean' and 'vf_sd'")
        if "grid_n" not in sec and default_grid_n is not None:
            sec["grid_n"] = default_grid_n
        sec = _coerce(sec, {"n_samples", "grid_n", "histogram_bins"}, {"shape_kind"})
        return UqConfig(
            seed=self.seed, matrix=self.phases[0], inclusion=self.phases[1], **sec
        )

    @property
    def uq_oracle(self) -> bool:
        return bool(self.uq_section.get("oracle", True))

    def network_arch(self, input_n: int) -> NetworkArch:
        sec = self.network_section
        conv = sec.get("conv")
        fc = sec.get("fc")
        if conv is not None or fc is not None:
            if conv is None or fc is None:
                raise InvalidConfig("[network] custom stacks need both 'conv' and 'fc'")
            conv_specs = []
            for i, entry in enumerate(conv):
                if not isinstance(entry, dict):
                    raise InvalidConfig(f"[network].conv[{i}] must be a table/object")
                _check_keys(entry, {"channels", "filter_size", "pool"}, f"[network].conv[{i}]")
                if "channels" not in entry:
                    raise InvalidConfig(f"[network].conv[{i}] needs 'channels'")
                conv_specs.append(
                    ConvSpec(
                        channels=int(entry["channels"]),
                        filter_size=int(entry.get("filter_size", 5)),
                        pool=bool(entry.get("pool", True)),
                    )
                )
            arch = NetworkArch(
                input_n=input_n,
                conv=tuple(conv_specs),
                fc=tuple(FcSpec(int(w)) for w in fc),
            )
        else:
            preset = sec.get("preset", "desk")
            if preset not in _PRESETS:
                raise InvalidConfig(f"unknown [network] preset {preset!r}; expected one of {_PRESETS}")
            arch = desk_arch(input_n) if preset == "desk" else case_study_arch(input_n)
        from dataclasses import replace

        return replace(
            arch,
            fc_activation=sec.get("fc_activation", arch.fc_activation),
            output_activation=sec.get("output_activation", arch.output_activation),
        )

    def transfer_args(self) -> dict:
        sec = self.transfer_section
        return {
            "added_channels": int(sec.get("added_channels", 32)),
            "filter_size": int(sec.get("filter_size", 5)),
            "trainable_scope": str(sec.get("trainable_scope", "last_fc")),
        }

    def resolved_dict(self) -> dict:
        """Everything, defaults included, for provenance echo."""
        out = {
            "seed": self.seed,
            "threads": self.threads,
            "phases": {
                "matrix_young": self.phases[0].young_modulus,
                "matrix_poisson": self.phases[0].poisson_ratio,
                "inclusion_young": self.phases[1].young_modulus,
                "inclusion_poisson": self.phases[1].poisson_ratio,
            },
            "solver": {
                "tol": self.solver_tol,
                "max_iters": 0 if self.solver_max_iters is None else self.solver_max_iters,
            },
            "network": {
                "preset": self.network_section.get("preset", "desk"),
                "fc_activation": self.network_section.get("fc_activation", "relu"),
                "output_activation": self.network_section.get("output_activation", "sigmoid"),
            },
            "transfer": self.transfer_args(),
        }
        if self.network_section.get("conv") is not None:
            out["network"]["conv"] = self.network_section["conv"]
            out["network"]["fc"] = self.network_section["fc"]
        if self.dataset_section:
            out["dataset"] = self.dataset_config().to_json_dict()
        if self.training_section:
            cfg = self.train_config()
            out["training"] = {
                "epochs": cfg.epochs,
                "batch_size": cfg.batch_size,
                "learning_rate": cfg.learning_rate,
                "patience": cfg.patience,
            }
        if self.uq_section:
            uq = self.uq_config()
            out["uq"] = {
                "vf_mean": uq.vf_mean,
                "vf_sd": uq.vf_sd,
                "n_samples": uq.n_samples,
                "grid_n": uq.grid_n,
                "shape_kind": uq.shape_kind,
                "r_min": uq.r_min,
                "r_max": uq.r_max,
                "edge_length": uq.edge_length,
                "tol": uq.tol,
                "histogram_bins": uq.histogram_bins,
                "oracle": self.uq_oracle,
            }
        return out

    def echo(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "config.resolved.json", "w", encoding="utf-8") as fh:
            json.dump(self.resolved_dict(), fh, sort_keys=True, separators=(",", ":"))
            fh.write("\n")


def load_config(
    path=None, seed_override: int | None = None, threads_override: int | None = None
) -> RunConfig:
    """Parse and validate a config file; overrides beat file values.

    ``path`` may be None for an all-defaults run (commands then rely on
    their flags).
    """
    if path is None:
        data: dict = {}
    else:
        path = Path(path)
        if not path.exists():
            raise InvalidConfig(f"config file {path} does not exist")
        if path.suffix == ".toml":
            with open(path, "rb") as fh:
                try:
                    data = tomllib.load(fh)
                except tomllib.TOMLDecodeError as exc:
                    raise InvalidConfig(f"{path}: {exc}") from exc
        elif path.suffix == ".json":
            with open(path, "r", encoding="utf-8") as fh:
                try:
                    data = json.load(fh)
                except json.JSONDecodeError as exc:
                    raise InvalidConfig(f"{path}: {exc}") from exc
        else:
            raise InvalidConfig(f"config must be .toml or .json, got {path.suffix!r}")
        if not isinstance(data, dict):
            raise InvalidConfig(f"{path}: top level must be a table/object")

    _check_keys(data, _TOP_KEYS, "the top level")
    dataset = _section(data, "dataset")
    phases_sec = _section(data, "phases")
    solver = _section(data, "solver")
    network = _section(data, "network")
    training = _section(data, "training")
    uq = _section(data, "uq")
    transfer = _section(data, "transfer")
    _check_keys(dataset, _DATASET_KEYS, "[dataset]")
    _check_keys(phases_sec, _PHASES_KEYS, "[phases]")
    _check_keys(solver, _SOLVER_KEYS, "[solver]")
    _check_keys(network, _NETWORK_KEYS, "[network]")
    _check_keys(training, _TRAINING_KEYS, "[training]")
    _check_keys(uq, _UQ_KEYS, "[uq]")
    _check_keys(transfer, _TRANSFER_KEYS, "[transfer]")

    seed = int(data.get("seed", 0)) if seed_override is None else int(seed_override)
    threads = int(data.get("threads", 1)) if threads_override is None else int(threads_override)
    if threads < 1:
        raise InvalidConfig(f"threads must be >= 1, got {threads}")

    matrix = IsotropicPhase(
        young_modulus=float(phases_sec.get("matrix_young", DEFAULT_MATRIX.young_modulus)),
        poisson_ratio=float(phases_sec.get("matrix_poisson", DEFAULT_MATRIX.poisson_ratio)),
    )
    inclusion = IsotropicPhase(
        young_modulus=float(phases_sec.get("inclusion_young", DEFAULT_INCLUSION.young_modulus)),
        poisson_ratio=float(phases_sec.get("inclusion_poisson", DEFAULT_INCLUSION.poisson_ratio)),
    )
    max_iters = int(solver.get("max_iters", 0)) or None

    return RunConfig(
        seed=seed,
        threads=threads,
        phases=(matrix, inclusion),
        solver_tol=float(solver.get("tol", 1e-8)),
        solver_max_iters=max_iters,
        dataset_section=dataset,
        network_section=network,
        training_section=training,
        uq_section=uq,
        transfer_section=transfer,
    )
