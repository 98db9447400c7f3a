"""Array-container checkpoints.

A container is a directory holding ``meta.json`` and one raw ``<name>.bin`` file
per array. ``meta.json`` records, for every array, its shape, the dtype
(always ``"<f4"``: little-endian float32) and the file name, plus a free-form
``info`` object. Arrays are stored C-contiguous with no header, so any tool
can read them with the shape from the metadata.
"""

from __future__ import annotations

import dataclasses
import json
import os
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

from mvinv.camera import CameraPose
from mvinv.generator import ToyGenerator, ToyGeneratorConfig
from mvinv.inversion import MultiLatentSet
from mvinv.editing import PcaBasis

FORMAT_VERSION = 1
DTYPE = "<f4"


class CheckpointError(ValueError):
    pass


def save_arrays(path: str | Path, arrays: Mapping[str, Any], kind: str, info: Mapping[str, Any] | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name, value in arrays.items():
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu().numpy()
        arr = np.ascontiguousarray(np.asarray(value, dtype=DTYPE))
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"array {name!r} has non-finite values")
        fname = f"{name}.bin"
        (path / fname).write_bytes(arr.tobytes())
        entries[name] = {"file": fname, "shape": list(arr.shape), "dtype": DTYPE}
    meta = {"format": FORMAT_VERSION, "kind": kind, "arrays": entries, "info": dict(info or {})}
    tmp = path / "meta.json.tmp"
    tmp.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path / "meta.json")
    return path


def load_arrays(path: str | Path, kind: str | None = None) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    path = Path(path)
    try:
        meta = json.loads((path / "meta.json").read_text())
    except FileNotFoundError as exc:
        raise CheckpointError(f"no checkpoint at {path}") from exc
    if kind is not None and meta.get("kind") != kind:
        raise CheckpointError(f"{path} holds a {meta.get('kind')!r} checkpoint, expected {kind!r}")
    arrays = {}
    for name, entry in meta["arrays"].items():
        raw = (path / entry["file"]).read_bytes()
        arr = np.frombuffer(raw, dtype=entry["dtype"])
        shape = tuple(entry["shape"])
        if arr.size != int(np.prod(shape)):
            raise CheckpointError(f"array {name!r} has {arr.size} values, expected shape {shape}")
        arrays[name] = arr.reshape(shape).copy()
    return arrays, meta["info"]


# ------------------------------------------------------------------ generator


def save_generator(path, gen: ToyGenerator, weights=None) -> Path:
    weights = gen.weights if weights is None else weights
    arrays = {f"weights.{k}": v for k, v in weights.items()}
    arrays.update(gen.mapping_arrays())
    return save_arrays(path, arrays, "generator", {"config": dataclasses.asdict(gen.config)})


def load_generator(path, dtype: torch.dtype = torch.float32) -> ToyGenerator:
    arrays, info = load_arrays(path, "generator")
    cfg = info["config"]
    cfg = ToyGeneratorConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in cfg.items()})
    gen = ToyGenerator(cfg, dtype)
    for name, arr in gen.mapping_arrays().items():
        if name not in arrays or not np.array_equal(arrays[name], arr.astype(DTYPE)):
            raise CheckpointError(f"mapping array {name!r} does not match the generator configuration")
    gen.set_weights({k.removeprefix("weights."): torch.from_numpy(v) for k, v in arrays.items()
                     if k.startswith("weights.")})
    return gen


# -------------------------------------------------------------------- latents


def _pose_dict(p: CameraPose) -> dict:
    return dataclasses.asdict(p)


def save_latents(path, model: torch.Tensor | MultiLatentSet, config_snapshot: Mapping | None = None) -> Path:
    """Latent checkpoint for a single W+ code or a multi-latent set."""
    if isinstance(model, MultiLatentSet):
        M, L, d = model.latents.shape
        info = {"type": "multi", "M": M, "L": L, "d_w": d, "anchor_poses": [_pose_dict(p) for p in model.poses]}
        arrays = {"w_init": model.w_init}
        arrays.update({f"w_{i + 1}": w for i, w in enumerate(model.latents)})
    else:
        L, d = model.shape
        info = {"type": "single", "M": 1, "L": L, "d_w": d, "anchor_poses": []}
        arrays = {"w": model}
    info["config"] = dict(config_snapshot or {})
    return save_arrays(path, arrays, "latents", info)


def load_latents(path, dtype: torch.dtype = torch.float32) -> tuple[torch.Tensor | MultiLatentSet, dict]:
    arrays, info = load_arrays(path, "latents")
    t = lambda a: torch.tensor(a, dtype=dtype)  # noqa: E731
    if info["type"] == "single":
        return t(arrays["w"]), info
    latents = torch.stack([t(arrays[f"w_{i + 1}"]) for i in range(info["M"])])
    poses = tuple(CameraPose(**p) for p in info["anchor_poses"])
    return MultiLatentSet(latents, poses, t(arrays["w_init"])), info


# ---------------------------------------------------------------------- basis


def save_basis(path, basis: PcaBasis) -> Path:
    arrays = {"components": basis.components, "singular_values": basis.singular_values, "mean": basis.mean}
    return save_arrays(path, arrays, "pca_basis",
                       {"num_samples": basis.num_samples, "total_variance": basis.total_variance})


def load_basis(path) -> PcaBasis:
    arrays, info = load_arrays(path, "pca_basis")
    f64 = lambda a: a.astype(np.float64)  # noqa: E731
    return PcaBasis(f64(arrays["components"]), f64(arrays["singular_values"]), f64(arrays["mean"]),
                    int(info["num_samples"]), float(info["total_variance"]))
