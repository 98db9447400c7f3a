"""Synthetic head-turn videos rendered from a known latent.

Frame ``i`` is rendered from ``w* + delta_i``. The perturbations are smooth in
the frame index: each is a sum of the lowest ``num_modes`` DCT-II cosines over
the frame range with Gaussian coefficient matrices, scaled by ``epsilon`` times
the per-entry standard deviation of mapped W codes (so ``epsilon`` is relative
to the natural spread of the latent space).
Every cosine of order >= 1 sums to zero over the frames, so the perturbations
are zero-mean. They stand in for the small expression and pose changes of a
real subject turning their head.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from mvinv.camera import PosedFrame, read_camera_file, write_camera_file, CameraPose
from mvinv.checkpoint import load_arrays, save_arrays
from mvinv.generator import ToyGenerator

FRAME_PATTERN = "frame_{:05d}.png"
CAMERA_FILE = "cameras.jsonl"
GROUND_TRUTH_DIR = "ground_truth"


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticSubjectSpec:
    seed: int = 0
    epsilon: float = 0.0
    frame_count: int = 240
    yaw_range_deg: tuple[float, float] = (-45.0, 45.0)
    pitch_jitter_deg: float = 0.0
    num_modes: int = 3
    truncation: float = 1.0

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ValueError("epsilon must be non-negative")
        if self.frame_count < 2:
            raise ValueError("need at least two frames")
        lo, hi = self.yaw_range_deg
        if not -180 < lo < hi < 180:
            raise ValueError("yaw range must be increasing within (-180, 180)")
        if self.pitch_jitter_deg < 0 or self.num_modes < 1:
            raise ValueError("pitch jitter must be >= 0 and num_modes >= 1")
        if not 0 < self.truncation <= 1:
            raise ValueError("truncation must lie in (0, 1]")

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticSubjectSpec":
        data = dict(data)
        if "yaw_range_deg" in data:
            data["yaw_range_deg"] = tuple(data["yaw_range_deg"])
        return cls(**data)


@dataclass
class SyntheticSubject:
    w_star: np.ndarray
    perturbations: np.ndarray
    poses: list[CameraPose]
    smoothness_bound: np.ndarray

    def latent(self, i: int) -> np.ndarray:
        return self.w_star + self.perturbations[i]


def dct_modes(frame_count: int, num_modes: int) -> np.ndarray:
    """(num_modes, frame_count) DCT-II cosines of orders 1..num_modes."""
    i = np.arange(frame_count) + 0.5
    k = np.arange(1, num_modes + 1)[:, None]
    return np.cos(np.pi * k * i / frame_count)


def build_subject(spec: SyntheticSubjectSpec, gen: ToyGenerator) -> SyntheticSubject:
    rng = np.random.default_rng([spec.seed, 3])
    z = rng.standard_normal((1, gen.z_dim))
    with torch.no_grad():
        w = gen.mapping(torch.as_tensor(z, dtype=torch.float64).to(gen.dtype))[0].double().numpy()
        samples = gen.sample_latents(1024, seed=0).double().numpy()
    w_avg = samples.mean(axis=0)
    spread = float(samples.std())
    w_star = w_avg + spec.truncation * (w - w_avg)
    L, d = w_star.shape
    coeffs = rng.standard_normal((spec.num_modes, L, d)) / math.sqrt(spec.num_modes)
    modes = dct_modes(spec.frame_count, spec.num_modes)
    scale = spec.epsilon * spread
    perturb = scale * np.einsum("kf,kld->fld", modes, coeffs)
    # |cos(a) - cos(b)| <= |a - b| per mode
    k = np.arange(1, spec.num_modes + 1)[:, None, None]
    bound = scale * (np.pi / spec.frame_count) * (k * np.abs(coeffs)).sum(axis=0)
    yaws = np.radians(np.linspace(*spec.yaw_range_deg, spec.frame_count))
    pitches = np.radians(spec.pitch_jitter_deg) * rng.standard_normal(spec.frame_count)
    pitches = np.clip(pitches, -1.2, 1.2)
    poses = [CameraPose(float(y), float(p)) for y, p in zip(yaws, pitches)]
    return SyntheticSubject(w_star, perturb, poses, bound)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def render_subject_frames(subject: SyntheticSubject, gen: ToyGenerator, chunk: int = 30) -> np.ndarray:
    """Float renders (F, H, W, 3) of every frame."""
    ws = torch.as_tensor(subject.w_star[None] + subject.perturbations).to(gen.dtype)
    out = []
    with torch.no_grad():
        for s in range(0, len(ws), chunk):
            out.append(gen.synthesize_batch(ws[s:s + chunk], subject.poses[s:s + chunk]).image)
    return torch.cat(out).double().numpy()


def generate_synthetic_subject(spec: SyntheticSubjectSpec, gen: ToyGenerator, out_dir: str | Path) -> Path:
    """Write 8-bit PNG frames, the camera file and the ground-truth container to ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    subject = build_subject(spec, gen)
    images = render_subject_frames(subject, gen)
    for i, img in enumerate(images):
        Image.fromarray(to_uint8(img), mode="RGB").save(out_dir / FRAME_PATTERN.format(i))
    write_camera_file(out_dir / CAMERA_FILE, enumerate(subject.poses))
    save_arrays(out_dir / GROUND_TRUTH_DIR,
                {"w_star": subject.w_star, "perturbations": subject.perturbations,
                 "smoothness_bound": subject.smoothness_bound},
                "ground_truth", {"spec": dataclasses.asdict(spec)})
    return out_dir


def load_ground_truth(data_dir: str | Path) -> tuple[dict[str, np.ndarray], SyntheticSubjectSpec]:
    arrays, info = load_arrays(Path(data_dir) / GROUND_TRUTH_DIR, "ground_truth")
    return arrays, SyntheticSubjectSpec.from_dict(info["spec"])


def load_frames(data_dir: str | Path) -> list[PosedFrame]:
    """Frames of a frame directory, sorted by frame index, as floats in [0, 1]."""
    data_dir = Path(data_dir)
    cam_path = data_dir / CAMERA_FILE
    if not cam_path.exists():
        raise DataError(f"missing camera file {cam_path}")
    try:
        poses = read_camera_file(cam_path)
    except (ValueError, KeyError) as exc:
        raise DataError(str(exc)) from exc
    frames = []
    for index in sorted(poses):
        path = data_dir / FRAME_PATTERN.format(index)
        if not path.exists():
            raise DataError(f"missing frame {path}")
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        frames.append(PosedFrame(arr, poses[index], index))
    if not frames:
        raise DataError(f"no frames listed in {cam_path}")
    return frames
