"""Image similarity, rotation-sweep evaluation and multi-latent consistency diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from mvinv.camera import PosedFrame, evenly_spaced_poses
from mvinv.generator import GeneratorWeights, ToyGenerator
from mvinv.inference import interpolated_latent, render_views
from mvinv.inversion import MultiLatentSet
from mvinv.losses import Extractors, FeatureExtractor, id_loss, l2_loss, perceptual_loss

# standard five-scale weights; trailing scales are dropped for small images
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
MS_SSIM_MIN_SIDE = 32


class ImageTooSmallError(ValueError):
    pass


def _gaussian_window(dtype) -> torch.Tensor:
    x = torch.arange(SSIM_WINDOW, dtype=torch.float64) - SSIM_WINDOW // 2
    g = torch.exp(-(x**2) / (2 * SSIM_SIGMA**2))
    return (g / g.sum()).to(dtype)


def _blur(x: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    c = x.shape[1]
    x = F.conv2d(x, g.view(1, 1, 1, -1).expand(c, 1, 1, -1), groups=c)
    return F.conv2d(x, g.view(1, 1, -1, 1).expand(c, 1, -1, 1), groups=c)


def _ssim_terms(x: torch.Tensor, y: torch.Tensor, g: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    mx, my = _blur(x, g), _blur(y, g)
    sxx = _blur(x * x, g) - mx * mx
    syy = _blur(y * y, g) - my * my
    sxy = _blur(x * y, g) - mx * my
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    lum = (2 * mx * my + c1) / (mx * mx + my * my + c1)
    return (lum * cs).mean(dim=(1, 2, 3)), cs.mean(dim=(1, 2, 3))


def ms_ssim_scales(side: int) -> int:
    """Number of pyramid scales used for an image whose shorter side is ``side``."""
    if side < MS_SSIM_MIN_SIDE:
        raise ImageTooSmallError(f"MS-SSIM needs images of at least {MS_SSIM_MIN_SIDE} pixels, got {side}")
    scales = 1
    while scales < len(MS_SSIM_WEIGHTS) and side // 2**scales >= SSIM_WINDOW:
        scales += 1
    return scales


def ms_ssim(img: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Multi-scale SSIM for images in [0, 1] of shape (..., H, W, 3).

    Gaussian window 11 / sigma 1.5, valid filtering, factor-2 average-pool
    downscaling. Only scales whose side still fits the window are kept and the
    standard weights of those scales are renormalized to sum to one (three
    scales at 64x64). Negative contrast terms are clipped at zero.
    """
    if img.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(img.shape)} vs {tuple(target.shape)}")
    lead = img.shape[:-3]
    x = img.reshape(-1, *img.shape[-3:]).permute(0, 3, 1, 2)
    y = target.reshape(-1, *target.shape[-3:]).permute(0, 3, 1, 2).to(x.dtype)
    scales = ms_ssim_scales(min(x.shape[-2:]))
    weights = torch.tensor(MS_SSIM_WEIGHTS[:scales], dtype=x.dtype)
    weights = weights / weights.sum()
    g = _gaussian_window(x.dtype)
    result = torch.ones(x.shape[0], dtype=x.dtype)
    for s in range(scales):
        if s:
            x, y = F.avg_pool2d(x, 2), F.avg_pool2d(y, 2)
        ssim, cs = _ssim_terms(x, y, g)
        term = ssim if s == scales - 1 else cs
        result = result * torch.relu(term) ** weights[s]
    return result.reshape(lead)


def id_similarity(img: torch.Tensor, target: torch.Tensor, fx: FeatureExtractor) -> torch.Tensor:
    """Cosine similarity of identity embeddings."""
    return 1.0 - id_loss(img, target, fx)


@dataclass
class MetricsReport:
    """Per-angle metric rows sorted by yaw, their column means, and the frontal row."""

    per_angle: list[tuple[float, float, float, float, float]]
    frontal: tuple[float, float, float, float, float]
    perceptual_name: str = "pyramid"
    aggregates: dict[str, float] = field(init=False)

    COLUMNS = ("mse", "perceptual", "ms_ssim", "id_similarity")

    def __post_init__(self):
        self.per_angle = sorted(self.per_angle, key=lambda r: r[0])
        arr = np.array([r[1:] for r in self.per_angle], dtype=np.float64)
        self.aggregates = {name: float(arr[:, i].mean()) for i, name in enumerate(self.COLUMNS)}

    def column(self, name: str) -> np.ndarray:
        i = self.COLUMNS.index(name) + 1
        return np.array([r[i] for r in self.per_angle])

    @property
    def yaws(self) -> np.ndarray:
        return np.array([r[0] for r in self.per_angle])

    def header(self) -> list[str]:
        return ["yaw_deg", "mse", f"perceptual_{self.perceptual_name}", "ms_ssim", "id_similarity"]

    def to_text(self) -> str:
        """Tab-separated per-angle table followed by a ``#``-prefixed summary block."""
        lines = ["\t".join(self.header())]
        for yaw, *vals in self.per_angle:
            lines.append("\t".join([f"{math.degrees(yaw):.10g}"] + [f"{v:.8g}" for v in vals]))
        lines.append("# summary")
        lines.append("# " + "\t".join(["scope"] + self.header()[1:]))
        lines.append("# " + "\t".join(["frontal"] + [f"{v:.8g}" for v in self.frontal[1:]]))
        lines.append("# " + "\t".join(["rotation"] + [f"{self.aggregates[c]:.8g}" for c in self.COLUMNS]))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricsReport":
        rows, frontal, name = [], None, "pyramid"
        for line in text.splitlines():
            if not line.strip():
                continue
            if line.startswith("yaw_deg"):
                name = line.split("\t")[2].removeprefix("perceptual_")
                continue
            if line.startswith("#"):
                parts = line[2:].split("\t")
                if parts[0] == "frontal":
                    frontal = tuple(float(v) for v in parts[1:])
                continue
            vals = [float(v) for v in line.split("\t")]
            rows.append((math.radians(vals[0]), *vals[1:]))
        if frontal is None or not rows:
            raise ValueError("not a metrics report")
        yaws = [r[0] for r in rows]
        front_yaw = yaws[int(np.argmin(np.abs(yaws)))]
        return cls(rows, (front_yaw, *frontal), name)


def rotation_metrics(
    model: torch.Tensor | MultiLatentSet,
    eval_frames: Sequence[PosedFrame],
    gen: ToyGenerator,
    weights: GeneratorWeights | None = None,
    extractors: Extractors | None = None,
) -> MetricsReport:
    """Render every evaluation frame's camera with the model and score it against the frame."""
    if not eval_frames:
        raise ValueError("need evaluation frames")
    extractors = extractors or Extractors.default(gen.resolution)
    frames = sorted(eval_frames, key=lambda f: f.pose.yaw)
    poses = [f.pose for f in frames]
    renders = render_views(model, poses, gen, weights).image.to(torch.float64)
    targets = torch.stack([torch.as_tensor(np.asarray(f.image), dtype=torch.float64) for f in frames])
    with torch.no_grad():
        mse = l2_loss(renders, targets)
        perc = perceptual_loss(renders, targets, extractors.perceptual)
        ssim = ms_ssim(renders, targets)
        ids = id_similarity(renders, targets, extractors.identity)
    rows = [(p.yaw, float(a), float(b), float(c), float(d)) for p, a, b, c, d in zip(poses, mse, perc, ssim, ids)]
    k = int(np.argmin([abs(p.yaw) for p in poses]))
    return MetricsReport(rows, rows[k], getattr(extractors.perceptual, "name", "perceptual"))


def id_vs_angle_curve(report: MetricsReport) -> list[tuple[float, float]]:
    return [(math.degrees(r[0]), r[4]) for r in report.per_angle]


def write_curve(path, curve: Sequence[tuple[float, float]], header: tuple[str, str] = ("yaw_deg", "id_similarity")):
    with open(path, "w") as fh:
        fh.write("\t".join(header) + "\n")
        for x, y in curve:
            fh.write(f"{x:.6f}\t{y:.8g}\n")


def depth_consistency(
    latent_set: MultiLatentSet,
    gen: ToyGenerator,
    weights: GeneratorWeights | None = None,
    num_viewpoints: int = 60,
) -> float:
    """Mean over viewpoints of the pixel-averaged standard deviation of depth across interpolated latents.

    Viewpoints are evenly spaced over the anchor yaw range; latent ``j`` is the
    interpolated code for viewpoint ``j``. Standard deviations use the
    population normalization.
    """
    if num_viewpoints < 2:
        raise ValueError("need at least two viewpoints")
    first = latent_set.poses[0]
    poses = evenly_spaced_poses(first.yaw, latent_set.poses[-1].yaw, num_viewpoints,
                                first.pitch, first.radius, first.fov)
    with torch.no_grad():
        ws = torch.stack([interpolated_latent(latent_set, p) for p in poses])
        return depth_std_over_latents(ws, poses, gen, weights)


def depth_std_over_latents(ws: torch.Tensor, poses, gen: ToyGenerator, weights=None) -> float:
    sigmas = []
    with torch.no_grad():
        for pose in poses:
            depth = gen.synthesize_batch(ws, [pose] * len(ws), weights).depth.to(torch.float64)
            sigma = depth.std(dim=0, unbiased=False)
            sigmas.append(float(sigma.mean()))
    return float(np.mean(sigmas))


def neighbor_latent_distance(latent_set: MultiLatentSet) -> float:
    """Mean Euclidean distance between consecutive latents (flattened W+)."""
    if len(latent_set) < 2:
        raise ValueError("need at least two latents")
    w = latent_set.latents.detach().to(torch.float64).flatten(1)
    return float((w[1:] - w[:-1]).norm(dim=1).mean())
