"""Principal-direction edits applied uniformly to every latent of an inverted subject."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from mvinv.generator import ToyGenerator
from mvinv.inversion import MultiLatentSet


class InsufficientSamplesError(ValueError):
    pass


@dataclass(frozen=True)
class PcaBasis:
    """Top-``k`` principal directions of flattened W+ codes.

    ``components`` are orthonormal rows (k, L*d_w), ``singular_values`` are those
    of the centered sample matrix (descending), and ``total_variance`` is the
    summed sample variance over all dimensions, so explained-variance ratios
    are available even though only ``k`` directions are kept.
    """

    components: np.ndarray
    singular_values: np.ndarray
    mean: np.ndarray
    num_samples: int
    total_variance: float

    @property
    def k(self) -> int:
        return self.components.shape[0]

    @property
    def stds(self) -> np.ndarray:
        """Sample standard deviation of the codes along each component."""
        return self.singular_values / np.sqrt(self.num_samples - 1)

    @property
    def explained_variance_ratio(self) -> np.ndarray:
        return self.stds**2 / self.total_variance


def pca_from_samples(samples: np.ndarray, k: int) -> PcaBasis:
    x = np.asarray(samples, dtype=np.float64)
    x = x.reshape(x.shape[0], -1)
    n = x.shape[0]
    if not 1 <= k:
        raise ValueError("k must be positive")
    if n <= k:
        raise InsufficientSamplesError(f"need more than {k} samples, got {n}")
    if k > x.shape[1]:
        raise ValueError(f"k={k} exceeds the dimension {x.shape[1]}")
    mean = x.mean(axis=0)
    centered = x - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    # sign convention: largest-magnitude entry of each component is positive
    flip = np.sign(vt[np.arange(len(vt)), np.abs(vt).argmax(axis=1)])
    vt = vt * flip[:, None]
    total = float((centered**2).sum() / (n - 1))
    return PcaBasis(vt[:k].copy(), s[:k].copy(), mean, n, total)


def compute_pca_basis(gen: ToyGenerator, num_samples: int, k: int, seed: int = 0) -> PcaBasis:
    """PCA of ``num_samples`` mapped standard-normal draws."""
    if num_samples <= k:
        raise InsufficientSamplesError(f"need more than {k} samples, got {num_samples}")
    with torch.no_grad():
        ws = gen.sample_latents(num_samples, seed)
    return pca_from_samples(ws.to(torch.float64).numpy(), k)


def edit_delta(basis: PcaBasis, component_index: int, magnitude: float, shape: tuple[int, int],
               row_mask=None) -> np.ndarray:
    """Latent offset for one edit, shaped (L, d_w)."""
    if not 0 <= component_index < basis.k:
        raise IndexError(f"component index {component_index} outside [0, {basis.k})")
    L, d = shape
    if basis.components.shape[1] != L * d:
        raise ValueError("basis dimension does not match the latent shape")
    delta = (magnitude * basis.stds[component_index] * basis.components[component_index]).reshape(L, d)
    if row_mask is not None:
        mask = np.asarray(row_mask, dtype=bool)
        if mask.shape != (L,):
            raise ValueError(f"row mask must have shape ({L},)")
        delta = delta * mask[:, None]
    return delta


def apply_edit(latent_set: MultiLatentSet, basis: PcaBasis, component_index: int, magnitude: float,
               row_mask=None) -> MultiLatentSet:
    """Shift every latent and ``w_init`` by the same scaled component; anchors are kept."""
    L, d = latent_set.latents.shape[1:]
    delta = edit_delta(basis, component_index, magnitude, (L, d), row_mask)
    if magnitude == 0:
        return latent_set.with_latents(latent_set.latents.detach().clone())
    dt = torch.as_tensor(delta, dtype=latent_set.latents.dtype)
    edited = latent_set.with_latents(latent_set.latents.detach() + dt)
    return MultiLatentSet(edited.latents, edited.poses, latent_set.w_init.detach() + dt)
