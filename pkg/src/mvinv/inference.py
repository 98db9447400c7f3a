"""View synthesis from a multi-latent set by camera-dependent latent interpolation."""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch

from mvinv.camera import CameraPose, angle_fraction, evenly_spaced_poses
from mvinv.generator import GeneratorWeights, RenderOutput, ToyGenerator
from mvinv.inversion import MultiLatentSet


def anchor_pair(latent_set: MultiLatentSet, c: CameraPose) -> tuple[int, int, float]:
    """Indices of the two anchors used for camera ``c`` and the blend factor towards the second.

    Cameras outside the anchor yaw range snap to the extreme anchor. Inside the
    range the adjacent anchors bracketing the camera's yaw are used, which are
    the two closest anchors for evenly spread anchors.
    """
    yaws = np.array([p.yaw for p in latent_set.poses])
    M = len(yaws)
    if M < 2:
        raise ValueError("interpolation needs at least two anchors")
    if c.yaw <= yaws[0]:
        return 0, 1, 0.0
    if c.yaw >= yaws[-1]:
        return M - 2, M - 1, 1.0
    hi = int(np.searchsorted(yaws, c.yaw, side="right"))
    lo = hi - 1
    return lo, hi, angle_fraction(c, latent_set.poses[lo], latent_set.poses[hi])


def interpolated_latent(latent_set: MultiLatentSet, c: CameraPose) -> torch.Tensor:
    lo, hi, t = anchor_pair(latent_set, c)
    w = latent_set.latents
    if t == 0.0:
        return w[lo]
    if t == 1.0:
        return w[hi]
    return torch.lerp(w[lo], w[hi], t)


def latent_for_pose(model: torch.Tensor | MultiLatentSet, c: CameraPose) -> torch.Tensor:
    """The W+ code a model uses at camera ``c``: fixed for a single code, interpolated for a set."""
    if isinstance(model, MultiLatentSet):
        return interpolated_latent(model, c)
    return model


def render_view(
    model: torch.Tensor | MultiLatentSet,
    c: CameraPose,
    gen: ToyGenerator,
    weights: GeneratorWeights | None = None,
) -> RenderOutput:
    return gen.synthesize(latent_for_pose(model, c), c, weights)


def render_views(
    model: torch.Tensor | MultiLatentSet,
    poses: Sequence[CameraPose],
    gen: ToyGenerator,
    weights: GeneratorWeights | None = None,
    chunk: int = 30,
) -> RenderOutput:
    """Batched :func:`render_view` over many cameras (no gradients)."""
    images, depths = [], []
    with torch.no_grad():
        for start in range(0, len(poses), chunk):
            part = list(poses[start:start + chunk])
            ws = torch.stack([latent_for_pose(model, p) for p in part])
            out = gen.synthesize_batch(ws, part, weights)
            images.append(out.image)
            depths.append(out.depth)
    return RenderOutput(torch.cat(images), torch.cat(depths))


def turntable_poses(model: torch.Tensor | MultiLatentSet, num_views: int,
                    yaw_range: tuple[float, float] | None = None, template: CameraPose | None = None
                    ) -> list[CameraPose]:
    if num_views < 1:
        raise ValueError("num_views must be positive")
    if template is None:
        template = model.poses[0] if isinstance(model, MultiLatentSet) else CameraPose(0.0)
    if yaw_range is None:
        if not isinstance(model, MultiLatentSet):
            raise ValueError("a yaw range is required for single-latent models")
        yaw_range = (model.poses[0].yaw, model.poses[-1].yaw)
    return evenly_spaced_poses(yaw_range[0], yaw_range[1], num_views, template.pitch, template.radius, template.fov)


def render_turntable(
    model: torch.Tensor | MultiLatentSet,
    gen: ToyGenerator,
    weights: GeneratorWeights | None = None,
    num_views: int = 180,
    yaw_range: tuple[float, float] | None = None,
) -> list[RenderOutput]:
    """Renders at evenly spaced yaws, left to right. Defaults to the anchor yaw range."""
    poses = turntable_poses(model, num_views, yaw_range)
    out = render_views(model, poses, gen, weights)
    return [out[i] for i in range(len(poses))]
