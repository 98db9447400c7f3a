"""Orbit cameras, pose/matrix conversion and target-frame selection.

Convention: right-handed world, +y up, the subject sits at the origin facing +z.
A camera with yaw 0 and pitch 0 sits on the +z axis. Positive yaw moves it
towards +x (the subject's left), positive pitch moves it up. Camera-to-world
matrices follow the OpenGL layout (camera looks down its local -z axis).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

CAMERA_FILE_KEYS = ("frame_index", "yaw", "pitch", "radius", "fov")


class InsufficientFramesError(ValueError):
    pass


class DegenerateAnchorsError(ValueError):
    pass


@dataclass(frozen=True)
class CameraPose:
    """Orbit camera looking at the origin. Angles are in radians."""

    yaw: float
    pitch: float = 0.0
    radius: float = 2.7
    fov: float = 0.75

    def __post_init__(self):
        vals = (self.yaw, self.pitch, self.radius, self.fov)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite camera parameters: {vals}")
        if not abs(self.yaw) < math.pi:
            raise ValueError(f"yaw must lie in (-pi, pi), got {self.yaw}")
        if not abs(self.pitch) < math.pi / 2:
            raise ValueError(f"pitch must lie in (-pi/2, pi/2), got {self.pitch}")
        if not self.radius > 0:
            raise ValueError(f"radius must be positive, got {self.radius}")
        if not 0 < self.fov < math.pi:
            raise ValueError(f"fov must lie in (0, pi), got {self.fov}")

    @property
    def position(self) -> np.ndarray:
        return self.radius * view_direction(self)

    def with_yaw(self, yaw: float) -> "CameraPose":
        return CameraPose(yaw, self.pitch, self.radius, self.fov)


@dataclass(frozen=True)
class PosedFrame:
    """An RGB frame in [0, 1] with its camera. Used both as video frame and as inversion target."""

    image: np.ndarray
    pose: CameraPose
    frame_index: int

    def __post_init__(self):
        img = np.asarray(self.image)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError(f"expected an HxWx3 image, got shape {img.shape}")
        if img.shape[0] < 16 or img.shape[1] < 16:
            raise ValueError(f"frames must be at least 16x16, got {img.shape[:2]}")
        if not np.all(np.isfinite(img)) or img.min() < 0.0 or img.max() > 1.0:
            raise ValueError("frame values must be finite and within [0, 1]")


def view_direction(pose: CameraPose) -> np.ndarray:
    """Unit vector from the origin towards the camera."""
    cp = math.cos(pose.pitch)
    return np.array([cp * math.sin(pose.yaw), math.sin(pose.pitch), cp * math.cos(pose.yaw)])


def pose_to_extrinsic(pose: CameraPose) -> np.ndarray:
    """Camera-to-world 4x4 matrix for a look-at camera with world up = +y."""
    eye = pose.position
    forward = -eye / np.linalg.norm(eye)
    right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    up = np.cross(right, forward)
    mat = np.eye(4)
    mat[:3, 0] = right
    mat[:3, 1] = up
    mat[:3, 2] = -forward
    mat[:3, 3] = eye
    return mat


def angle_between(a: CameraPose, b: CameraPose) -> float:
    """Great-circle angle between the view directions of two cameras."""
    da, db = view_direction(a), view_direction(b)
    # atan2 form stays accurate for nearly parallel directions
    return float(math.atan2(np.linalg.norm(np.cross(da, db)), float(np.dot(da, db))))


def angle_fraction(c: CameraPose, c1: CameraPose, c2: CameraPose) -> float:
    """Normalized angle of ``c`` measured from ``c1`` towards ``c2``, clamped to [0, 1]."""
    span = angle_between(c1, c2)
    if span < 1e-9:
        raise DegenerateAnchorsError("anchor cameras share a view direction")
    return min(1.0, max(0.0, angle_between(c1, c) / span))


def select_target_frames(frames: Sequence[PosedFrame], n: int) -> list[PosedFrame]:
    """Pick ``n`` frames closest to yaws evenly spread over the observed yaw range.

    Directions are handled left to right. Ties go to the lower frame index, and a
    frame already taken by an earlier direction is skipped in favour of the next
    nearest one. The result is sorted by yaw.
    """
    if n < 1:
        raise ValueError("n must be positive")
    if len(frames) < n:
        raise InsufficientFramesError(f"need {n} frames, got {len(frames)}")
    ordered = sorted(frames, key=lambda f: f.frame_index)
    yaws = np.array([f.pose.yaw for f in ordered])
    if n == 1:
        ideal = np.array([0.5 * (yaws.min() + yaws.max())])
    else:
        ideal = np.linspace(yaws.min(), yaws.max(), n)
    taken: set[int] = set()
    chosen = []
    for target in ideal:
        order = sorted(range(len(ordered)), key=lambda i: (abs(yaws[i] - target), ordered[i].frame_index))
        pick = next((i for i in order if i not in taken), None)
        if pick is None:
            raise InsufficientFramesError("could not assign distinct frames to every direction")
        taken.add(pick)
        chosen.append(ordered[pick])
    return sorted(chosen, key=lambda f: (f.pose.yaw, f.frame_index))


def evenly_spaced_poses(
    yaw_min: float, yaw_max: float, count: int, pitch: float = 0.0, radius: float = 2.7, fov: float = 0.75
) -> list[CameraPose]:
    if count == 1:
        yaws = [0.5 * (yaw_min + yaw_max)]
    else:
        yaws = np.linspace(yaw_min, yaw_max, count).tolist()
    return [CameraPose(float(y), pitch, radius, fov) for y in yaws]


def write_camera_file(path: str | Path, records: Iterable[tuple[int, CameraPose]]) -> None:
    """Write one JSON object per line with keys ``frame_index, yaw, pitch, radius, fov``."""
    with open(path, "w") as fh:
        for index, pose in records:
            fh.write(json.dumps({"frame_index": int(index), **asdict(pose)}) + "\n")


def read_camera_file(path: str | Path) -> dict[int, CameraPose]:
    poses = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            missing = [k for k in CAMERA_FILE_KEYS if k not in rec]
            if missing:
                raise ValueError(f"{path}:{lineno}: missing keys {missing}")
            poses[int(rec["frame_index"])] = CameraPose(
                float(rec["yaw"]), float(rec["pitch"]), float(rec["radius"]), float(rec["fov"])
            )
    return poses
