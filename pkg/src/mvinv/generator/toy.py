"""A small differentiable 3D-aware generator.

A W+ code is reduced to four style vectors, one per blob parameter group
(centers, log std-devs, densities, albedos). Each is a fixed weighted average of
the rows that favours one row, so every row matters and a W+ code has more
freedom than a W code. The styles are linearly decoded into the parameters of a
handful of anisotropic Gaussian density blobs that are volume rendered from the
requested camera.

The decoding matrices are the tunable generator weights; the mapping network
is frozen.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from mvinv.camera import CameraPose, pose_to_extrinsic
from mvinv.generator.raymarch import render_blobs

GeneratorWeights = dict[str, torch.Tensor]

# Blob layout of the canonical subject: center xyz, std-dev xyz, density, albedo rgb.
_BASE_BLOBS = (
    # head
    ((0.0, 0.0, 0.0), (0.30, 0.37, 0.29), 60.0, (0.85, 0.62, 0.50)),
    # eyes
    ((0.19, 0.12, 0.58), (0.06, 0.045, 0.05), 300.0, (0.10, 0.20, 0.45)),
    ((-0.19, 0.12, 0.58), (0.06, 0.045, 0.05), 300.0, (0.10, 0.20, 0.45)),
    # nose / mouth region
    ((0.0, -0.15, 0.62), (0.07, 0.12, 0.07), 200.0, (0.80, 0.35, 0.35)),
    # hair
    ((0.0, 0.30, -0.12), (0.36, 0.24, 0.32), 80.0, (0.30, 0.18, 0.08)),
)

# Decoder gains per raw parameter group (center, log std-dev, density, albedo),
# relative to a unit-scale W space.
_GAINS = (0.2, 0.4, 1.0, 1.2)
# W space is shrunk by this factor (mapping outputs scaled by it, decoder gains
# divided by it), leaving W codes spread ~0.1 per entry. Images as a function of
# z do not depend on it; it only sets how strongly the mean-squared latent
# regularizer competes with the image losses.
LATENT_SCALE = 0.33
_GROUPS = ("center", "log_std", "density", "albedo")


@dataclass(frozen=True)
class ToyGeneratorConfig:
    z_dim: int = 16
    w_dim: int = 16
    num_ws: int = 4
    resolution: int = 64
    num_blobs: int = 5
    samples: int = 32
    near: float = 1.7
    far: float = 3.7
    background: tuple[float, float, float] = (0.12, 0.12, 0.14)
    seed: int = 0


@dataclass
class RenderOutput:
    """RGB in [0, 1] of shape (..., H, W, 3) and expected ray-termination depth of shape (..., H, W)."""

    image: torch.Tensor
    depth: torch.Tensor

    def __getitem__(self, idx) -> "RenderOutput":
        return RenderOutput(self.image[idx], self.depth[idx])


def _group_row_mix(num_ws: int, groups: int = 4) -> np.ndarray:
    """(groups, num_ws) averaging weights; group g leans on row g * num_ws // groups."""
    mix = np.ones((groups, num_ws))
    for g in range(groups):
        mix[g, g * num_ws // groups] += 8.0 / 3.0
    return mix / mix.sum(axis=1, keepdims=True)


def _softplus_inv(y: float) -> float:
    return math.log(math.expm1(y))


def _sigmoid_inv(y: float) -> float:
    return math.log(y / (1.0 - y))


class ToyGenerator:
    """Gaussian-blob volume generator with a StyleGAN-like mapping / W+ interface."""

    def __init__(self, config: ToyGeneratorConfig | None = None, dtype: torch.dtype = torch.float32):
        self.config = cfg = config or ToyGeneratorConfig()
        if cfg.num_blobs > len(_BASE_BLOBS):
            raise ValueError(f"at most {len(_BASE_BLOBS)} blobs are supported")
        self.dtype = dtype
        rng = np.random.default_rng(cfg.seed)
        zd, wd, K = cfg.z_dim, cfg.w_dim, cfg.num_blobs
        self._mapping = {
            "fc0": rng.normal(size=(wd, zd)) * 1.5 / math.sqrt(zd),
            "fc1": rng.normal(size=(wd, wd)) * 0.4 * LATENT_SCALE / math.sqrt(wd),
            "canonical": rng.normal(size=wd) * 0.075 * LATENT_SCALE,
        }
        blobs = _BASE_BLOBS[:K]
        biases = {
            "center": [c for b in blobs for c in b[0]],
            "log_std": [math.log(s) for b in blobs for s in b[1]],
            "density": [_softplus_inv(b[2]) for b in blobs],
            "albedo": [_sigmoid_inv(a) for b in blobs for a in b[3]],
        }
        self._initial_weights = {}
        for (group, bias), gain in zip(biases.items(), _GAINS):
            gain = gain / LATENT_SCALE
            self._initial_weights[f"{group}_weight"] = rng.normal(size=(len(bias), wd)) * gain / math.sqrt(wd)
            self._initial_weights[f"{group}_bias"] = np.array(bias)
        self._row_mix = _group_row_mix(cfg.num_ws)
        self._bg = np.array(cfg.background, dtype=np.float64)
        self._weights = self.initial_weights()

    # ------------------------------------------------------------------ basics

    @property
    def z_dim(self) -> int:
        return self.config.z_dim

    @property
    def w_dim(self) -> int:
        return self.config.w_dim

    @property
    def num_ws(self) -> int:
        return self.config.num_ws

    @property
    def resolution(self) -> int:
        return self.config.resolution

    @property
    def near(self) -> float:
        return self.config.near

    @property
    def far(self) -> float:
        return self.config.far

    @property
    def weights(self) -> GeneratorWeights:
        """The generator's current weights (a fresh copy)."""
        return {k: v.clone() for k, v in self._weights.items()}

    def set_weights(self, weights: GeneratorWeights) -> None:
        self._check_weights(weights)
        self._weights = {k: v.detach().to(self.dtype).clone() for k, v in weights.items()}

    def initial_weights(self) -> GeneratorWeights:
        return {k: torch.tensor(v, dtype=self.dtype) for k, v in self._initial_weights.items()}

    def mapping_arrays(self) -> dict[str, np.ndarray]:
        return {f"mapping.{k}": v.copy() for k, v in self._mapping.items()}

    def to(self, dtype: torch.dtype) -> "ToyGenerator":
        gen = ToyGenerator(self.config, dtype)
        gen.set_weights(self._weights)
        return gen

    def _t(self, arr: np.ndarray) -> torch.Tensor:
        return torch.as_tensor(arr, dtype=self.dtype)

    def _check_weights(self, weights: GeneratorWeights) -> None:
        for name, ref in self._initial_weights.items():
            if name not in weights:
                raise ValueError(f"missing generator weight {name!r}")
            if tuple(weights[name].shape) != ref.shape:
                raise ValueError(f"weight {name!r} has shape {tuple(weights[name].shape)}, expected {ref.shape}")

    # ----------------------------------------------------------------- mapping

    def mapping(self, z: torch.Tensor) -> torch.Tensor:
        """Map z of shape (..., z_dim) to W+ codes of shape (..., num_ws, w_dim)."""
        z = torch.as_tensor(z, dtype=self.dtype)
        if z.shape[-1] != self.z_dim:
            raise ValueError(f"expected z of dimension {self.z_dim}, got {z.shape[-1]}")
        h = torch.tanh(z @ self._t(self._mapping["fc0"]).T)
        w = self._t(self._mapping["canonical"]) + h @ self._t(self._mapping["fc1"]).T
        return w.unsqueeze(-2).expand(*w.shape[:-1], self.num_ws, self.w_dim)

    def canonical_latent(self) -> torch.Tensor:
        return self.mapping(torch.zeros(self.z_dim, dtype=self.dtype))

    def average_latent(self, num_samples: int = 1024, seed: int = 0) -> torch.Tensor:
        """Mean of the mapping over ``num_samples`` standard-normal draws (PCG64 stream ``seed``)."""
        if num_samples < 1:
            raise ValueError("num_samples must be positive")
        z = np.random.default_rng(seed).standard_normal((num_samples, self.z_dim))
        with torch.no_grad():
            return self.mapping(self._t(z)).mean(dim=0)

    def sample_latents(self, num_samples: int, seed: int) -> torch.Tensor:
        z = np.random.default_rng(seed).standard_normal((num_samples, self.z_dim))
        with torch.no_grad():
            return self.mapping(self._t(z))

    # --------------------------------------------------------------- synthesis

    def decode(self, ws: torch.Tensor, weights: GeneratorWeights | None = None):
        """Blob parameters ``(mu, inv_std, density, albedo)`` for W+ codes of shape (B, num_ws, w_dim)."""
        weights = self._weights if weights is None else weights
        if ws.shape[-2:] != (self.num_ws, self.w_dim):
            raise ValueError(f"expected W+ codes of shape (..., {self.num_ws}, {self.w_dim}), got {tuple(ws.shape)}")
        K = self.config.num_blobs
        styles = torch.einsum("gl,bld->gbd", self._t(self._row_mix), ws)
        raw = [s @ weights[f"{g}_weight"].T + weights[f"{g}_bias"] for s, g in zip(styles, _GROUPS)]
        mu = raw[0].reshape(-1, K, 3)
        inv_std = torch.exp(-raw[1].reshape(-1, K, 3))
        density = F.softplus(raw[2])
        albedo = torch.sigmoid(raw[3].reshape(-1, K, 3))
        return mu, inv_std, density, albedo

    def rays(self, pose: CameraPose) -> tuple[torch.Tensor, torch.Tensor]:
        origin, dirs = _pinhole_rays(pose, self.resolution)
        return torch.tensor(origin, dtype=self.dtype), torch.tensor(dirs, dtype=self.dtype)

    def synthesize(self, w: torch.Tensor, pose: CameraPose, weights: GeneratorWeights | None = None) -> RenderOutput:
        """Render one W+ code of shape (num_ws, w_dim)."""
        return self.synthesize_batch(w.unsqueeze(0), [pose], weights)[0]

    def synthesize_batch(
        self, ws: torch.Tensor, poses: Sequence[CameraPose], weights: GeneratorWeights | None = None
    ) -> RenderOutput:
        """Render W+ codes (B, num_ws, w_dim), one camera per code, in a single pass."""
        if ws.ndim != 3 or ws.shape[0] != len(poses):
            raise ValueError(f"need one pose per code, got codes {tuple(ws.shape)} and {len(poses)} poses")
        if weights is not None:
            self._check_weights(weights)
        mu, inv_std, density, albedo = self.decode(ws, weights)
        rays = [self.rays(p) for p in poses]
        origin = torch.stack([r[0] for r in rays])
        dirs = torch.stack([r[1] for r in rays])
        cfg = self.config
        rgb, depth = render_blobs(
            mu, inv_std, density, albedo, origin, dirs, self._t(self._bg), cfg.near, cfg.far, cfg.samples
        )
        R = cfg.resolution
        return RenderOutput(rgb.reshape(-1, R, R, 3), depth.reshape(-1, R, R))


@functools.lru_cache(maxsize=4096)
def _pinhole_rays(pose: CameraPose, resolution: int) -> tuple[np.ndarray, np.ndarray]:
    c2w = pose_to_extrinsic(pose)
    half = math.tan(0.5 * pose.fov)
    centers = (np.arange(resolution) + 0.5) / resolution * 2.0 - 1.0
    x = np.broadcast_to(centers[None, :], (resolution, resolution)) * half
    y = np.broadcast_to(-centers[:, None], (resolution, resolution)) * half
    cam = np.stack([x, y, -np.ones_like(x)], axis=-1).reshape(-1, 3)
    dirs = cam @ c2w[:3, :3].T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origin = c2w[:3, 3].copy()
    origin.setflags(write=False)
    dirs.setflags(write=False)
    return origin, dirs
