"""Experiment orchestration.

Run directory layout::

    config.json          resolved configuration snapshot (rerunning it reproduces the run)
    data/                synthetic frames, only when the config names a synthetic subject
    latents/             latent checkpoint (array container)
    generator/           tuned generator weights (array container)
    report.tsv           per-angle metrics plus summary block
    id_curve.tsv         identity similarity against yaw in degrees
    diagnostics.json     multi-latent consistency numbers (multi_latent mode only)
    renders/             rgb_###.png and 16-bit depth_###.png over the evaluation yaw range
    log.txt              one line per optimization step
"""

from __future__ import annotations

import dataclasses
import json
import os
from contextlib import contextmanager
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from mvinv.camera import PosedFrame, evenly_spaced_poses, select_target_frames
from mvinv.checkpoint import load_generator, load_latents, save_generator, save_latents
from mvinv.generator import GeneratorWeights, ToyGenerator
from mvinv.inference import render_views
from mvinv.inversion import (
    InversionResult,
    MultiLatentSet,
    invert_multi_latent,
    invert_multi_view,
    pivotal_tune,
)
from mvinv.losses import Extractors
from mvinv.metrics import (
    MetricsReport,
    depth_consistency,
    id_vs_angle_curve,
    neighbor_latent_distance,
    rotation_metrics,
    write_curve,
)
from mvinv.pipeline.config import ExperimentConfig
from mvinv.pipeline.synthetic import DataError, generate_synthetic_subject, load_frames, to_uint8

CONFIG_FILE = "config.json"
REPORT_FILE = "report.tsv"
CURVE_FILE = "id_curve.tsv"
DIAGNOSTICS_FILE = "diagnostics.json"
LOG_FILE = "log.txt"
LOCK_FILE = ".lock"


class RunLockedError(RuntimeError):
    pass


@contextmanager
def run_lock(run_dir: Path):
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / LOCK_FILE
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as exc:
        raise RunLockedError(f"{run_dir} is in use by another run (remove {lock} if stale)") from exc
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


class StepLog:
    """Line-oriented optimization log: ``stage=... step=... lr=... loss=... <term>=...``."""

    def __init__(self, path: Path):
        self._fh = open(path, "w")

    def __call__(self, rec: dict) -> None:
        self._fh.write(" ".join(f"{k}={_fmt(v)}" for k, v in rec.items()) + "\n")

    def note(self, text: str) -> None:
        self._fh.write(f"# {text}\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def parse_log(path: str | Path) -> list[dict]:
    records = []
    for line in Path(path).read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        rec = {}
        for item in line.split():
            key, value = item.split("=", 1)
            rec[key] = value if key == "stage" else (int(value) if key == "step" else float(value))
        records.append(rec)
    return records


def loss_trace_from_log(path: str | Path, stage: str) -> list[float]:
    return [r["loss"] for r in parse_log(path) if r["stage"] == stage]


# ------------------------------------------------------------------ data


def resolve_frames(config: ExperimentConfig, gen: ToyGenerator, run_dir: Path) -> list[PosedFrame]:
    if config.synthetic is not None:
        data_dir = run_dir / "data"
        generate_synthetic_subject(config.synthetic, gen, data_dir)
    else:
        data_dir = Path(config.data_dir)
        if not data_dir.is_dir():
            raise DataError(f"data directory {data_dir} does not exist")
    frames = load_frames(data_dir)
    res = gen.resolution
    if any(f.image.shape[:2] != (res, res) for f in frames):
        raise DataError(f"frames must be {res}x{res} to match the generator")
    return frames


def evaluation_frames(frames: Sequence[PosedFrame], used: Sequence[PosedFrame], count: int) -> list[PosedFrame]:
    """Up to ``count`` evenly spread frames, preferring frames not used as targets."""
    used_ids = {f.frame_index for f in used}
    pool = [f for f in frames if f.frame_index not in used_ids]
    if len(pool) < count:
        pool = list(frames)
    return select_target_frames(pool, min(count, len(pool)))


# ------------------------------------------------------------------ stages


def invert(config: ExperimentConfig, frames: Sequence[PosedFrame], gen: ToyGenerator,
           extractors: Extractors, log=None) -> tuple[torch.Tensor | MultiLatentSet, GeneratorWeights, list[PosedFrame]]:
    """Run the inversion stages of ``config.mode``; returns the model, tuned weights and targets."""
    opt = config.optimization
    targets = select_target_frames(frames, config.target_count)
    if config.mode in ("single_view", "multi_view"):
        res = invert_multi_view(targets, gen, opt, extractors, log=log)
        weights = pivotal_tune(res.latents, targets, gen, opt, extractors, log=log)
        return res.latents, weights, targets
    init_targets = select_target_frames(frames, config.num_init_targets)
    init_opt = opt if config.init_steps is None else dataclasses.replace(opt, steps=config.init_steps)
    init = invert_multi_view(init_targets, gen, init_opt, extractors,
                             log=None if log is None else _tagged(log, "init"))
    res: InversionResult = invert_multi_latent(frames, targets, init.latents, gen, opt, extractors, log=log)
    return res.latents, res.tuned_weights, targets


def _tagged(log, prefix: str):
    def inner(rec):
        rec = dict(rec)
        rec["stage"] = f"{prefix}-{rec['stage']}"
        log(rec)
    return inner


def evaluate_model(model, weights, frames, used, gen, config: ExperimentConfig, extractors) -> tuple[MetricsReport, dict]:
    eval_frames = evaluation_frames(frames, used, config.num_eval_frames)
    report = rotation_metrics(model, eval_frames, gen, weights, extractors)
    diagnostics = {}
    if isinstance(model, MultiLatentSet):
        diagnostics = {
            "depth_consistency": depth_consistency(model, gen, weights, config.num_viewpoints),
            "neighbor_latent_distance": neighbor_latent_distance(model),
        }
    return report, diagnostics


def write_renders(model, weights, gen: ToyGenerator, out_dir: Path, yaw_range: tuple[float, float],
                  count: int, template=None) -> None:
    """RGB PNGs and 16-bit depth PNGs (depth linearly mapped from [near, far] to [0, 65535])."""
    out_dir.mkdir(parents=True, exist_ok=True)
    pitch, radius, fov = (template.pitch, template.radius, template.fov) if template else (0.0, 2.7, 0.75)
    poses = evenly_spaced_poses(yaw_range[0], yaw_range[1], count, pitch, radius, fov)
    out = render_views(model, poses, gen, weights)
    for i in range(count):
        Image.fromarray(to_uint8(out.image[i].double().numpy()), mode="RGB").save(out_dir / f"rgb_{i:03d}.png")
        d = (out.depth[i].double().numpy() - gen.near) / (gen.far - gen.near)
        d16 = np.clip(np.rint(d * 65535.0), 0, 65535).astype(np.uint16)
        Image.fromarray(d16).save(out_dir / f"depth_{i:03d}.png")


def write_outputs(run_dir: Path, report: MetricsReport, diagnostics: dict) -> None:
    (run_dir / REPORT_FILE).write_text(report.to_text())
    write_curve(run_dir / CURVE_FILE, id_vs_angle_curve(report))
    if diagnostics:
        (run_dir / DIAGNOSTICS_FILE).write_text(json.dumps(diagnostics, indent=2, sort_keys=True) + "\n")


def run_experiment(config: ExperimentConfig) -> Path:
    """Execute the full pipeline of ``config.mode`` and fill the run directory."""
    run_dir = Path(config.output_dir)
    if config.data_dir is not None and not Path(config.data_dir).is_dir():
        raise DataError(f"data directory {config.data_dir} does not exist")
    with run_lock(run_dir):
        torch.manual_seed(config.seed)
        config.save(run_dir / CONFIG_FILE)
        gen = ToyGenerator(config.generator)
        extractors = Extractors.default(gen.resolution, config.extractor_seed)
        frames = resolve_frames(config, gen, run_dir)
        if len(frames) < config.target_count:
            raise DataError(f"{config.mode} needs {config.target_count} frames, found {len(frames)}")
        log = StepLog(run_dir / LOG_FILE)
        try:
            log.note(f"mode={config.mode} frames={len(frames)} seed={config.seed}")
            model, weights, targets = invert(config, frames, gen, extractors, log)
            snapshot = {"mode": config.mode, "seed": config.seed,
                        "target_frames": [t.frame_index for t in targets]}
            save_latents(run_dir / "latents", model, snapshot)
            save_generator(run_dir / "generator", gen, weights)
            # evaluate the stored (float32) checkpoint so reports match what is reloaded
            model, gen = load_run_model(run_dir)
            report, diagnostics = evaluate_model(model, None, frames, targets, gen, config, extractors)
            write_outputs(run_dir, report, diagnostics)
            yaws = [f.pose.yaw for f in frames]
            write_renders(model, None, gen, run_dir / "renders", (min(yaws), max(yaws)),
                          config.num_render_views, frames[0].pose)
            log.note(f"mse_R={report.aggregates['mse']:.8g} frontal_mse={report.frontal[1]:.8g}")
        finally:
            log.close()
    return run_dir


# ------------------------------------------------------------- reuse of runs


def load_run_config(run_dir: str | Path) -> ExperimentConfig:
    path = Path(run_dir) / CONFIG_FILE
    if not path.exists():
        raise DataError(f"{run_dir} is not a run directory (no {CONFIG_FILE})")
    return ExperimentConfig.load(path)


def load_run_model(run_dir: str | Path) -> tuple[torch.Tensor | MultiLatentSet, ToyGenerator]:
    run_dir = Path(run_dir)
    model, _ = load_latents(run_dir / "latents")
    return model, load_generator(run_dir / "generator")


def run_frames(run_dir: Path, config: ExperimentConfig) -> list[PosedFrame]:
    data_dir = run_dir / "data" if config.synthetic is not None else Path(config.data_dir)
    return load_frames(data_dir)


def evaluate_run(run_dir: str | Path, data_dir: str | Path | None = None) -> tuple[MetricsReport, dict]:
    """Recompute and rewrite the report of a finished run, optionally against other frames."""
    run_dir = Path(run_dir)
    config = load_run_config(run_dir)
    model, gen = load_run_model(run_dir)
    frames = load_frames(data_dir) if data_dir is not None else run_frames(run_dir, config)
    _, info = load_latents(run_dir / "latents")
    used_ids = set(info["config"].get("target_frames", []))
    used = [f for f in frames if f.frame_index in used_ids]
    extractors = Extractors.default(gen.resolution, config.extractor_seed)
    report, diagnostics = evaluate_model(model, None, frames, used, gen, config, extractors)
    write_outputs(run_dir, report, diagnostics)
    return report, diagnostics


COMPARE_COLUMNS = ("frontal_mse", "frontal_perceptual", "frontal_ms_ssim", "frontal_id",
                   "mse_R", "perceptual_R", "ms_ssim_R", "id_R")


def compare_runs(run_dirs: Sequence[str | Path]) -> str:
    """Tab-separated table with one row per run: frontal metrics then rotation metrics."""
    if not run_dirs:
        raise ValueError("need at least one run")
    lines = ["\t".join(("run", *COMPARE_COLUMNS))]
    for rd in run_dirs:
        path = Path(rd) / REPORT_FILE
        if not path.exists():
            raise DataError(f"missing report {path}")
        rep = MetricsReport.from_text(path.read_text())
        vals = [*rep.frontal[1:], *(rep.aggregates[c] for c in MetricsReport.COLUMNS)]
        lines.append("\t".join([str(rd)] + [f"{v:.6g}" for v in vals]))
    return "\n".join(lines) + "\n"
