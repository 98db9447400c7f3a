"""Latent optimization, pivotal tuning and multi-latent optimization.

All stages share one loss: for every view the weighted sum of a perceptual,
a pixel, an identity and a latent-regularization term, summed over views.
Latents are updated by plain gradient descent with the schedule of
:func:`lr_at`; generator weights are tuned with Adam.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import torch

from mvinv.camera import CameraPose, PosedFrame
from mvinv.generator import GeneratorWeights, ToyGenerator
from mvinv.losses import Extractors, LossWeights, per_view_losses, weighted_sum

TargetView = PosedFrame

LogFn = Callable[[dict], None]

_STREAMS = {"init": 0, "sampling": 1, "reg-sampling": 2, "data": 3}


class NumericalError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent named random stream derived from a root seed."""
    return np.random.default_rng([seed, _STREAMS[name]])


def stream_seed(seed: int, name: str) -> int:
    return int(rng_stream(seed, name).integers(2**31))


@dataclass(frozen=True)
class RegWeights:
    lambda_dist: float = 1e-3
    lambda_interp: float = 1.0
    lambda_depth: float = 1.0

    def __post_init__(self):
        for name, value in vars(self).items():
            if not math.isfinite(value) or value < 0:
                raise ConfigError(f"{name} must be finite and non-negative, got {value}")


@dataclass(frozen=True)
class OptimizationConfig:
    steps: int = 500
    initial_lr: float = 0.1
    warmup_fraction: float = 0.05
    rampdown_fraction: float = 0.25
    loss_weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    reg_weights: RegWeights = field(default_factory=RegWeights)
    pti_steps: int = 350
    pti_lr: float = 3e-4
    depth_reg_samples: int = 3
    w_avg_samples: int = 1024

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.pti_steps < 0:
            raise ConfigError("pti_steps must be >= 0")
        if not self.initial_lr > 0 or not self.pti_lr > 0:
            raise ConfigError("learning rates must be positive")
        for name in ("warmup_fraction", "rampdown_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.depth_reg_samples < 1 or self.w_avg_samples < 1:
            raise ConfigError("sample counts must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "OptimizationConfig":
        data = dict(data)
        if "loss_weights" in data:
            data["loss_weights"] = LossWeights(**data["loss_weights"])
        if "reg_weights" in data:
            data["reg_weights"] = RegWeights(**data["reg_weights"])
        return cls(**data)


def lr_at(step: int, config: OptimizationConfig) -> float:
    """Linear warm-up, flat, then cosine ramp-down towards zero."""
    t = step / config.steps
    ramp = 1.0
    if config.rampdown_fraction > 0:
        ramp = min(1.0, (1.0 - t) / config.rampdown_fraction)
        ramp = 0.5 - 0.5 * math.cos(ramp * math.pi)
    if config.warmup_fraction > 0:
        ramp *= min(1.0, (step + 1) / (config.warmup_fraction * config.steps))
    return config.initial_lr * ramp


@dataclass
class MultiLatentSet:
    """One W+ code per anchor camera, anchors sorted by strictly increasing yaw."""

    latents: torch.Tensor
    poses: tuple[CameraPose, ...]
    w_init: torch.Tensor

    def __post_init__(self):
        self.poses = tuple(self.poses)
        if self.latents.ndim != 3 or self.latents.shape[0] != len(self.poses):
            raise ValueError(f"need one (L, d) latent per pose, got {tuple(self.latents.shape)} "
                             f"for {len(self.poses)} poses")
        if self.latents.shape[0] < 1:
            raise ValueError("a latent set needs at least one entry")
        if tuple(self.w_init.shape) != tuple(self.latents.shape[1:]):
            raise ValueError("w_init must match the latent shape")
        yaws = [p.yaw for p in self.poses]
        if any(b <= a for a, b in zip(yaws, yaws[1:])):
            raise ValueError("anchor yaws must be strictly increasing")

    def __len__(self) -> int:
        return len(self.poses)

    @property
    def entries(self) -> list[tuple[torch.Tensor, CameraPose]]:
        return list(zip(self.latents, self.poses))

    def detach(self) -> "MultiLatentSet":
        return MultiLatentSet(self.latents.detach().clone(), self.poses, self.w_init.detach().clone())

    def with_latents(self, latents: torch.Tensor) -> "MultiLatentSet":
        return MultiLatentSet(latents, self.poses, self.w_init)


@dataclass
class InversionResult:
    latents: torch.Tensor | MultiLatentSet
    tuned_weights: GeneratorWeights | None
    loss_trace: list[float]
    config: OptimizationConfig
    pti_trace: list[float] = field(default_factory=list)


# --------------------------------------------------------------------- helpers


def _target_images(targets: Sequence[TargetView], gen: ToyGenerator) -> torch.Tensor:
    imgs = torch.stack([torch.as_tensor(np.asarray(t.image), dtype=gen.dtype) for t in targets])
    expected = (gen.resolution, gen.resolution, 3)
    if tuple(imgs.shape[1:]) != expected:
        raise ValueError(f"target images have shape {tuple(imgs.shape[1:])}, generator renders {expected}")
    return imgs


def _check_finite(value: torch.Tensor, what: str, step: int) -> None:
    if not torch.isfinite(value).all():
        raise NumericalError(f"non-finite {what} at step {step}")


def average_latent(gen: ToyGenerator, config: OptimizationConfig) -> torch.Tensor:
    return gen.average_latent(config.w_avg_samples, seed=stream_seed(config.seed, "init"))


def _current_weights(gen: ToyGenerator, weights: GeneratorWeights | None) -> GeneratorWeights:
    return gen.weights if weights is None else {k: v.detach() for k, v in weights.items()}


def multi_view_loss(
    w: torch.Tensor,
    targets: Sequence[TargetView],
    gen: ToyGenerator,
    w_avg: torch.Tensor,
    loss_weights: LossWeights,
    extractors: Extractors,
    weights: GeneratorWeights | None = None,
    view_weights: torch.Tensor | None = None,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Summed per-view loss of one shared code ``w`` against all targets."""
    poses = [t.pose for t in targets]
    out = gen.synthesize_batch(w.expand(len(targets), *w.shape), poses, weights)
    terms = per_view_losses(out.image, _target_images(targets, gen), w, w_avg, loss_weights, extractors)
    return weighted_sum(terms, loss_weights, view_weights), terms


def _log_line(log: LogFn | None, stage: str, step: int, lr: float, loss: float, terms: dict) -> None:
    if log is None:
        return
    rec = {"stage": stage, "step": step, "lr": lr, "loss": loss}
    rec.update({k: float(v.detach().sum()) for k, v in terms.items()})
    log(rec)


# ------------------------------------------------------------ latent inversion


def invert_multi_view(
    targets: Sequence[TargetView],
    gen: ToyGenerator,
    config: OptimizationConfig,
    extractors: Extractors | None = None,
    weights: GeneratorWeights | None = None,
    view_weights: Sequence[float] | None = None,
    log: LogFn | None = None,
) -> InversionResult:
    """Optimize one shared W+ code against all targets at once, starting from the average latent."""
    if len(targets) == 0:
        raise ValueError("need at least one target view")
    extractors = extractors or Extractors.default(gen.resolution)
    weights = _current_weights(gen, weights)
    vw = None if view_weights is None else torch.as_tensor(view_weights, dtype=gen.dtype)
    w_avg = average_latent(gen, config)
    w = w_avg.clone()
    best_loss, best_w = math.inf, w.clone()
    trace = []
    for step in range(config.steps):
        w.requires_grad_(True)
        loss, terms = multi_view_loss(w, targets, gen, w_avg, config.loss_weights, extractors, weights, vw)
        _check_finite(loss, "loss", step)
        (grad,) = torch.autograd.grad(loss, w)
        value = float(loss.detach())
        trace.append(value)
        if value < best_loss:
            best_loss, best_w = value, w.detach().clone()
        lr = lr_at(step, config)
        _log_line(log, "latent", step, lr, value, terms)
        w = (w - lr * grad).detach()
    return InversionResult(best_w, None, trace, config)


def invert_single_view(
    target: TargetView,
    gen: ToyGenerator,
    config: OptimizationConfig,
    extractors: Extractors | None = None,
    weights: GeneratorWeights | None = None,
    log: LogFn | None = None,
) -> InversionResult:
    return invert_multi_view([target], gen, config, extractors, weights, log=log)


# --------------------------------------------------------------- pivotal tuning


def pivotal_tune(
    latents: torch.Tensor | MultiLatentSet,
    targets: Sequence[TargetView],
    gen: ToyGenerator,
    config: OptimizationConfig,
    extractors: Extractors | None = None,
    weights: GeneratorWeights | None = None,
    log: LogFn | None = None,
    trace: list[float] | None = None,
) -> GeneratorWeights:
    """Fine-tune generator weights around frozen latents, without the latent regularizer.

    A single code is shared by all targets; a :class:`MultiLatentSet` renders
    target ``i`` with its own code ``w_i``. The best weights seen are returned.
    """
    if len(targets) == 0:
        raise ValueError("need at least one target view")
    extractors = extractors or Extractors.default(gen.resolution)
    start = _current_weights(gen, weights)
    if isinstance(latents, MultiLatentSet):
        if len(latents) != len(targets):
            raise ValueError(f"{len(latents)} latents for {len(targets)} targets")
        ws = latents.latents.detach()
    else:
        ws = latents.detach().expand(len(targets), *latents.shape[-2:])
    poses = [t.pose for t in targets]
    target_imgs = _target_images(targets, gen)
    if config.pti_steps == 0:
        return start

    params = {k: v.clone().requires_grad_(True) for k, v in start.items()}
    opt = torch.optim.Adam(list(params.values()), lr=config.pti_lr)

    def evaluate():
        out = gen.synthesize_batch(ws, poses, params)
        terms = per_view_losses(out.image, target_imgs, None, None, config.loss_weights, extractors,
                                include_reg=False)
        return weighted_sum(terms, config.loss_weights), terms

    best_loss, best = math.inf, start
    for step in range(config.pti_steps):
        opt.zero_grad(set_to_none=True)
        loss, terms = evaluate()
        _check_finite(loss, "PTI loss", step)
        loss.backward()
        value = float(loss.detach())
        if trace is not None:
            trace.append(value)
        if value < best_loss:
            best_loss, best = value, {k: v.detach().clone() for k, v in params.items()}
        _log_line(log, "pti", step, config.pti_lr, value, terms)
        opt.step()
    with torch.no_grad():
        final, _ = evaluate()
    if float(final) < best_loss:
        best = {k: v.detach().clone() for k, v in params.items()}
    return best


# ------------------------------------------------------------- multi-latent


def init_multi_latents(w_init: torch.Tensor, anchor_poses: Sequence[CameraPose]) -> MultiLatentSet:
    """Copy ``w_init`` into one entry per anchor; anchors are sorted by yaw."""
    if len(anchor_poses) < 2:
        raise ConfigError("multi-latent sets need at least two anchors")
    poses = sorted(anchor_poses, key=lambda p: p.yaw)
    if any(b.yaw == a.yaw for a, b in zip(poses, poses[1:])):
        raise ValueError("anchor poses must have distinct yaws")
    w_init = w_init.detach().clone()
    latents = w_init.unsqueeze(0).repeat(len(poses), 1, 1)
    return MultiLatentSet(latents, tuple(poses), w_init)


def latent_distance_reg(latent_set: MultiLatentSet) -> torch.Tensor:
    """Sum over entries of the squared distance to the initial code."""
    diff = latent_set.latents - latent_set.w_init
    return (diff * diff).sum()


def _midpoint_pose(a: CameraPose, b: CameraPose) -> CameraPose:
    return CameraPose(0.5 * (a.yaw + b.yaw), 0.5 * (a.pitch + b.pitch), a.radius, a.fov)


def nearest_frame(frames: Sequence[PosedFrame], yaw: float) -> PosedFrame:
    return min(frames, key=lambda f: (abs(f.pose.yaw - yaw), f.frame_index))


def interpolation_reg_step(
    latent_set: MultiLatentSet,
    frames: Sequence[PosedFrame],
    gen: ToyGenerator,
    weights: GeneratorWeights | None,
    loss_weights: LossWeights,
    rng: np.random.Generator,
    extractors: Extractors | None = None,
    w_avg: torch.Tensor | None = None,
) -> torch.Tensor:
    """Loss of the midpoint of one random adjacent pair, against the frame nearest the midpoint yaw.

    The latent regularizer is included only when ``w_avg`` is given.
    """
    if not frames:
        raise ValueError("interpolation regularization needs frames")
    if len(latent_set) < 2:
        raise ConfigError("interpolation regularization needs at least two latents")
    extractors = extractors or Extractors.default(gen.resolution)
    i = int(rng.integers(len(latent_set) - 1))
    w_mid = 0.5 * (latent_set.latents[i] + latent_set.latents[i + 1])
    pose = _midpoint_pose(latent_set.poses[i], latent_set.poses[i + 1])
    target = nearest_frame(frames, pose.yaw)
    out = gen.synthesize_batch(w_mid.unsqueeze(0), [pose], weights)
    lw = loss_weights if w_avg is not None else replace(loss_weights, lambda_r=0.0)
    terms = per_view_losses(out.image, _target_images([target], gen), w_mid, w_avg, lw, extractors,
                            include_reg=w_avg is not None)
    return weighted_sum(terms, lw)


def depth_reg(
    latent_set: MultiLatentSet,
    gen: ToyGenerator,
    weights: GeneratorWeights | None,
    sample_count: int,
    rng: np.random.Generator,
    own_depths: torch.Tensor | None = None,
) -> torch.Tensor:
    """Depth agreement between every anchor's own depth map and the mean depth of all latents there.

    For anchor ``i`` the mean over the ``M`` latents is estimated from latent
    ``i`` plus ``sample_count - 1`` others drawn without replacement. The squared
    deviation is corrected by the sampling variance of that estimate, which keeps
    the estimator unbiased when at least two others are drawn; with
    ``sample_count == M`` the exact value is returned. Squared errors are
    averaged over pixels and summed over anchors.

    ``own_depths`` (M, H, W) may pass in already rendered depth maps of latent
    ``i`` at anchor ``i``.
    """
    M = len(latent_set)
    if M < 2:
        raise ConfigError("depth regularization needs at least two latents")
    if not 1 <= sample_count <= M:
        raise ValueError(f"sample_count must lie in [1, {M}]")
    n = sample_count - 1
    if n == 0:
        return latent_set.latents.sum() * 0.0
    others = []
    for i in range(M):
        pool = [j for j in range(M) if j != i]
        picked = pool if n == M - 1 else sorted(rng.choice(pool, size=n, replace=False).tolist())
        others.append(picked)
    ws = latent_set.latents
    idx = [j for picked in others for j in picked]
    poses = [latent_set.poses[i] for i, picked in enumerate(others) for _ in picked]
    other_depth = gen.synthesize_batch(ws[idx], poses, weights).depth
    other_depth = other_depth.reshape(M, n, *other_depth.shape[-2:])
    if own_depths is None:
        own_depths = gen.synthesize_batch(ws, list(latent_set.poses), weights).depth
    scale = ((M - 1) / M) ** 2
    mean_others = other_depth.mean(dim=1)
    dev = scale * (own_depths - mean_others) ** 2
    if 2 <= n < M - 1:
        var = other_depth.var(dim=1, unbiased=True)
        dev = dev - scale * (1.0 - n / (M - 1)) * var / n
    per_anchor = dev.mean(dim=(-2, -1))
    if n < M - 1:
        per_anchor = per_anchor.clamp_min(0.0)
    return per_anchor.sum()


def invert_multi_latent(
    frames: Sequence[PosedFrame],
    targets: Sequence[TargetView],
    w_init: torch.Tensor,
    gen: ToyGenerator,
    config: OptimizationConfig,
    extractors: Extractors | None = None,
    weights: GeneratorWeights | None = None,
    log: LogFn | None = None,
) -> InversionResult:
    """Optimize one code per target view with the three consistency regularizers, then tune weights."""
    if len(targets) < 2:
        raise ConfigError("multi-latent inversion needs at least two targets")
    extractors = extractors or Extractors.default(gen.resolution)
    weights = _current_weights(gen, weights)
    targets = sorted(targets, key=lambda t: t.pose.yaw)
    start = init_multi_latents(w_init, [t.pose for t in targets])
    poses = list(start.poses)
    target_imgs = _target_images(targets, gen)
    w_avg = average_latent(gen, config)
    reg = config.reg_weights
    lw = config.loss_weights
    # separate streams so switching one regularizer off leaves the other's draws intact
    reg_rng = rng_stream(config.seed, "reg-sampling")
    interp_rng = np.random.default_rng(reg_rng.integers(2**63))
    depth_rng = np.random.default_rng(reg_rng.integers(2**63))
    sample_count = min(config.depth_reg_samples, len(targets))

    ws = start.latents.clone()
    best_loss, best_ws = math.inf, ws.clone()
    trace = []
    for step in range(config.steps):
        ws.requires_grad_(True)
        cur = start.with_latents(ws)
        out = gen.synthesize_batch(ws, poses, weights)
        terms = per_view_losses(out.image, target_imgs, ws, w_avg, lw, extractors)
        loss = weighted_sum(terms, lw)
        if reg.lambda_dist:
            terms["dist"] = latent_distance_reg(cur)
            loss = loss + reg.lambda_dist * terms["dist"]
        if reg.lambda_interp:
            terms["interp"] = interpolation_reg_step(cur, frames, gen, weights, lw, interp_rng, extractors, w_avg)
            loss = loss + reg.lambda_interp * terms["interp"]
        if reg.lambda_depth:
            terms["depth"] = depth_reg(cur, gen, weights, sample_count, depth_rng, own_depths=out.depth)
            loss = loss + reg.lambda_depth * terms["depth"]
        _check_finite(loss, "loss", step)
        (grad,) = torch.autograd.grad(loss, ws)
        value = float(loss.detach())
        trace.append(value)
        if value < best_loss:
            best_loss, best_ws = value, ws.detach().clone()
        lr = lr_at(step, config)
        _log_line(log, "multi-latent", step, lr, value, terms)
        ws = (ws - lr * grad).detach()

    result_set = start.with_latents(best_ws)
    pti_trace: list[float] = []
    tuned = pivotal_tune(result_set, targets, gen, config, extractors, weights, log=log, trace=pti_trace)
    return InversionResult(result_set, tuned, trace, config, pti_trace)
