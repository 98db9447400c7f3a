"""Reconstruction losses and the frozen feature extractors behind them.

Images are channels-last tensors of shape (..., H, W, 3). Every loss reduces the
trailing image dimensions only, so a batch of B image pairs yields B losses.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from mvinv.generator import RenderOutput


class ZeroEmbeddingError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_p: float = 1.0
    lambda_2: float = 0.1
    lambda_r: float = 1.0
    lambda_id: float = 1.0

    def __post_init__(self):
        for name, value in vars(self).items():
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {value}")


class FeatureExtractor(Protocol):
    name: str

    def __call__(self, images: torch.Tensor) -> torch.Tensor:
        """Map images (..., H, W, 3) to feature vectors (..., F)."""
        ...


def _to_nchw(images: torch.Tensor) -> tuple[torch.Tensor, tuple[int, ...]]:
    lead = images.shape[:-3]
    x = images.reshape(-1, *images.shape[-3:]).permute(0, 3, 1, 2)
    return x, lead


def _zero_mean_kernels(rng: np.random.Generator, c_out: int, c_in: int, gain: float) -> np.ndarray:
    k = rng.standard_normal((c_out, c_in, 3, 3))
    k -= k.mean(axis=(1, 2, 3), keepdims=True)
    return k * gain / np.sqrt(c_in * 9)


class PyramidFeatures:
    """Frozen random 3x3 convolutions applied to a 3-level image pyramid.

    Level ``l`` is the image average-pooled ``l`` times by a factor of two. Each
    level is convolved (zero padding 1, no bias) with its own set of zero-mean
    kernels and passed through ``tanh``. The flattened maps of all levels are
    concatenated.
    """

    name = "pyramid"

    def __init__(self, levels: int = 3, channels: int = 8, gain: float = 4.0, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.levels = levels
        self.kernels = [_zero_mean_kernels(rng, channels, 3, gain) for _ in range(levels)]

    def feature_maps(self, images: torch.Tensor) -> list[torch.Tensor]:
        x, lead = _to_nchw(images)
        maps = []
        for level, kernel in enumerate(self.kernels):
            if level:
                x = F.avg_pool2d(x, 2)
            k = torch.as_tensor(kernel, dtype=x.dtype)
            maps.append(torch.tanh(F.conv2d(x, k, padding=1)).reshape(*lead, -1))
        return maps

    def __call__(self, images: torch.Tensor) -> torch.Tensor:
        return torch.cat(self.feature_maps(images), dim=-1)


class IdentityEmbedding:
    """Frozen strided conv stack producing a unit-norm 64-d embedding.

    Three stride-2 3x3 convolutions (zero padding 1, no biases, ``tanh``) followed
    by a linear projection. All operations are odd, so the embedding of ``-x`` is
    the negated embedding of ``x``.
    """

    name = "identity"

    def __init__(self, dim: int = 64, channels: Sequence[int] = (8, 16, 16), gain: float = 3.0,
                 resolution: int = 64, seed: int = 1):
        rng = np.random.default_rng(seed)
        chans = (3, *channels)
        self.kernels = [_zero_mean_kernels(rng, chans[i + 1], chans[i], gain) for i in range(len(channels))]
        side = resolution
        for _ in channels:
            side = (side + 1) // 2
        flat = chans[-1] * side * side
        self.projection = rng.standard_normal((dim, flat)) / np.sqrt(flat)

    def raw(self, images: torch.Tensor) -> torch.Tensor:
        x, lead = _to_nchw(images)
        for kernel in self.kernels:
            x = torch.tanh(F.conv2d(x, torch.as_tensor(kernel, dtype=x.dtype), stride=2, padding=1))
        x = x.reshape(x.shape[0], -1)
        if x.shape[1] != self.projection.shape[1]:
            raise ValueError("image resolution does not match the embedding network")
        return (x @ torch.as_tensor(self.projection, dtype=x.dtype).T).reshape(*lead, -1)

    def __call__(self, images: torch.Tensor) -> torch.Tensor:
        e = self.raw(images)
        norm = e.norm(dim=-1, keepdim=True)
        if bool((norm < 1e-12).any()):
            raise ZeroEmbeddingError("identity embedding has zero norm")
        return e / norm


def _check_pair(img: torch.Tensor, target: torch.Tensor) -> None:
    if img.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(img.shape)} vs {tuple(target.shape)}")


def l2_loss(img: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    _check_pair(img, target)
    return ((img - target) ** 2).mean(dim=(-3, -2, -1))


def perceptual_loss(img: torch.Tensor, target: torch.Tensor, fx: FeatureExtractor) -> torch.Tensor:
    _check_pair(img, target)
    return ((fx(img) - fx(target)) ** 2).mean(dim=-1)


def id_loss(img: torch.Tensor, target: torch.Tensor, fx: FeatureExtractor) -> torch.Tensor:
    """1 - cosine similarity of the identity embeddings."""
    _check_pair(img, target)
    a, b = fx(img), fx(target)
    a = a / a.norm(dim=-1, keepdim=True)
    b = b / b.norm(dim=-1, keepdim=True)
    return 1.0 - (a * b).sum(dim=-1)


def latent_reg(w: torch.Tensor, w_avg: torch.Tensor) -> torch.Tensor:
    """Mean squared entrywise distance to the average latent."""
    if w.shape[-2:] != w_avg.shape[-2:]:
        raise ValueError(f"shape mismatch: {tuple(w.shape)} vs {tuple(w_avg.shape)}")
    return ((w - w_avg) ** 2).mean(dim=(-2, -1))


@dataclass
class Extractors:
    perceptual: FeatureExtractor
    identity: FeatureExtractor

    @classmethod
    def default(cls, resolution: int = 64, seed: int = 0) -> "Extractors":
        return cls(PyramidFeatures(seed=seed), IdentityEmbedding(resolution=resolution, seed=seed + 1))


def per_view_losses(
    images: torch.Tensor,
    targets: torch.Tensor,
    ws: torch.Tensor | None,
    w_avg: torch.Tensor | None,
    weights: LossWeights,
    extractors: Extractors,
    include_reg: bool = True,
) -> dict[str, torch.Tensor]:
    """Individual loss terms, each of shape (B,), for a batch of views."""
    terms = {}
    if weights.lambda_p:
        terms["perceptual"] = perceptual_loss(images, targets, extractors.perceptual)
    if weights.lambda_2:
        terms["l2"] = l2_loss(images, targets)
    if weights.lambda_id:
        terms["id"] = id_loss(images, targets, extractors.identity)
    if include_reg and weights.lambda_r:
        if ws is None or w_avg is None:
            raise ValueError("latent regularization needs the latents and the average latent")
        terms["reg"] = latent_reg(ws, w_avg).expand(images.shape[0])
    return terms


_TERM_WEIGHT = {"perceptual": "lambda_p", "l2": "lambda_2", "id": "lambda_id", "reg": "lambda_r"}


def weighted_sum(terms: dict[str, torch.Tensor], weights: LossWeights,
                 view_weights: torch.Tensor | None = None) -> torch.Tensor:
    total = sum(getattr(weights, _TERM_WEIGHT[name]) * value for name, value in terms.items())
    if isinstance(total, int):
        raise ValueError("all loss weights are zero")
    if view_weights is not None:
        total = total * view_weights
    return total.sum()


def combined_loss(
    renders: RenderOutput | Sequence[RenderOutput],
    targets: torch.Tensor | Sequence,
    w: torch.Tensor,
    w_avg: torch.Tensor,
    weights: LossWeights,
    extractors: Extractors,
    include_reg: bool = True,
    view_weights: Sequence[float] | torch.Tensor | None = None,
) -> torch.Tensor:
    """Sum over views of the weighted perceptual, pixel, identity and latent terms.

    ``renders`` is either a batched :class:`RenderOutput` or a list of single
    renders; ``targets`` are images or objects with an ``image`` attribute.
    ``w`` is one shared code (L, d) or one code per view (N, L, d).
    """
    images = _stack_images(renders)
    target_images = _stack_targets(targets, images)
    if images.shape[0] != target_images.shape[0]:
        raise ValueError(f"got {images.shape[0]} renders for {target_images.shape[0]} targets")
    if images.shape[0] == 0:
        raise ValueError("need at least one view")
    vw = None
    if view_weights is not None:
        vw = torch.as_tensor(view_weights, dtype=images.dtype)
        if vw.shape != (images.shape[0],):
            raise ValueError("need one weight per view")
    terms = per_view_losses(images, target_images, w, w_avg, weights, extractors, include_reg)
    return weighted_sum(terms, weights, vw)


def _stack_images(renders) -> torch.Tensor:
    if isinstance(renders, RenderOutput):
        img = renders.image
        return img if img.ndim == 4 else img.unsqueeze(0)
    if len(renders) == 0:
        raise ValueError("need at least one view")
    return torch.stack([r.image for r in renders])


def _stack_targets(targets, like: torch.Tensor) -> torch.Tensor:
    if isinstance(targets, torch.Tensor):
        return targets.to(like.dtype) if targets.ndim == 4 else targets.to(like.dtype).unsqueeze(0)
    if len(targets) == 0:
        raise ValueError("need at least one target")
    imgs = [t.image if hasattr(t, "image") else t for t in targets]
    return torch.stack([torch.as_tensor(np.asarray(i), dtype=like.dtype) for i in imgs])
