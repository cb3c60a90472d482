"""Checkpoint container and feature-map export.

A checkpoint is one file: 4-byte magic, a u32 little-endian header length,
a JSON header (architecture, RNG seed, optional label scaling and training
log, optional provenance), then every parameter as little-endian float32
in the network's documented order.  Writing the same state twice yields
byte-identical files.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import IndexOutOfRange, InvalidConfig, ShapeMismatch
from .network import Network, NetworkArch
from .training import LabelScaling, TrainingLog

MAGIC = b"VHCK"
FORMAT_NAME = "voxhomog-checkpoint"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class Checkpoint:
    arch: NetworkArch
    params: np.ndarray  # float32 vector, the network's parameter order
    seed: int
    scaling: LabelScaling | None = None
    log: TrainingLog | None = None
    provenance: dict | None = None

    def build_network(self, dtype=np.float32) -> Network:
        net = Network.initialize(self.arch, seed=self.seed, dtype=dtype)
        net.load_param_vector(self.params)
        return net


def save_checkpoint(
    path,
    net: Network,
    seed: int,
    scaling: LabelScaling | None = None,
    log: TrainingLog | None = None,
    provenance: dict | None = None,
) -> None:
    params = net.param_vector()
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "arch": net.arch.to_json_dict(),
        "seed": int(seed),
        "scaling": scaling.to_json_dict() if scaling is not None else None,
        "log": log.to_json_dict() if log is not None else None,
        "param_count": int(params.size),
        "provenance": provenance,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(params.astype("<f4").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise InvalidConfig(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack_from("<I", raw, 4)
    if len(raw) < 8 + hlen:
        raise InvalidConfig(f"{path}: truncated header")
    header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    if header.get("format") != FORMAT_NAME:
        raise InvalidConfig(f"{path}: unknown format {header.get('format')!r}")
    if header.get("version") != FORMAT_VERSION:
        raise InvalidConfig(f"{path}: unsupported version {header.get('version')!r}")
    params = np.frombuffer(raw[8 + hlen :], dtype="<f4").copy()
    if params.size != header["param_count"]:
        raise ShapeMismatch(
            f"{path}: blob holds {params.size} parameters, header says {header['param_count']}"
        )
    return Checkpoint(
        arch=NetworkArch.from_json_dict(header["arch"]),
        params=params,
        seed=int(header["seed"]),
        scaling=LabelScaling.from_json_dict(header["scaling"]) if header["scaling"] else None,
        log=TrainingLog.from_json_dict(header["log"]) if header["log"] else None,
        provenance=header.get("provenance"),
    )


def export_feature_maps(
    net: Network,
    grid: np.ndarray,
    layer_index: int,
    axis: int = 2,
    index: int | None = None,
    out_dir=None,
) -> tuple[np.ndarray, dict]:
    """Slice the post-ReLU activations of one conv stage.

    Returns (channels, d1, d2) and a metadata dict; when ``out_dir`` is
    given, writes one CSV per channel plus an index JSON there.
    ``layer_index`` counts conv stages from 0; ``index`` defaults to the
    middle plane.
    """
    maps = net.conv_activations(grid)
    if not 0 <= layer_index < len(maps):
        raise IndexOutOfRange(
            f"conv stage {layer_index} does not exist (network has {len(maps)})"
        )
    vol = maps[layer_index]
    if axis not in (0, 1, 2):
        raise InvalidConfig(f"slice axis must be 0, 1 or 2, got {axis}")
    extent = vol.shape[1 + axis]
    if index is None:
        index = extent // 2
    if not 0 <= index < extent:
        raise IndexOutOfRange(f"slice index {index} outside extent {extent}")
    sl = [slice(None)] * 4
    sl[1 + axis] = index
    planes = np.ascontiguousarray(vol[tuple(sl)])

    meta = {
        "layer_index": layer_index,
        "axis": axis,
        "index": int(index),
        "channels": int(planes.shape[0]),
        "extent": int(extent),
    }
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        files = []
        for c in range(planes.shape[0]):
            name = f"featmap_l{layer_index}_c{c:02d}.csv"
            np.savetxt(out_dir / name, planes[c], fmt="%.8e", delimiter=",")
            files.append(name)
        meta["files"] = files
        with open(out_dir / "featmaps.json", "w", encoding="utf-8") as fh:
            json.dump(meta, fh, sort_keys=True, separators=(",", ":"))
            fh.write("\n")
    return planes, meta
