"""``mvinv`` command-line interface.

Exit codes: 0 success, 2 invalid configuration, 3 missing or unreadable data,
4 numerical failure (non-finite loss).
"""

from __future__ import annotations

import json
import math
import sys
from pathlib import Path

import click

from mvinv.camera import CameraPose
from mvinv.checkpoint import CheckpointError, load_basis, save_basis, save_latents
from mvinv.editing import apply_edit, compute_pca_basis
from mvinv.generator import ToyGenerator, ToyGeneratorConfig
from mvinv.inversion import ConfigError, MultiLatentSet, NumericalError
from mvinv.pipeline.config import ExperimentConfig, merge_overrides
from mvinv.pipeline.run import (
    RunLockedError,
    compare_runs,
    evaluate_run,
    load_run_model,
    run_experiment,
    write_renders,
)
from mvinv.pipeline.synthetic import DataError, SyntheticSubjectSpec, generate_synthetic_subject

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 2, 3, 4


def _fail(code: int, msg: str):
    click.echo(f"error: {msg}", err=True)
    sys.exit(code)


def _guard(fn):
    """Map library errors to the documented exit codes."""

    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except NumericalError as exc:
            _fail(EXIT_NUMERICAL, f"numerical failure: {exc}")
        except (DataError, CheckpointError, FileNotFoundError, RunLockedError) as exc:
            _fail(EXIT_DATA, str(exc))
        except (ConfigError, ValueError) as exc:
            _fail(EXIT_CONFIG, str(exc))

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@click.group()
def main():
    """Multi-view and multi-latent inversion of a 3D-aware generator."""


@main.command("synth-data")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False), help="Frame directory to create.")
@click.option("--seed", default=0, show_default=True)
@click.option("--epsilon", default=0.0, show_default=True, help="Relative per-frame latent perturbation.")
@click.option("--frames", "frame_count", default=240, show_default=True)
@click.option("--yaw-range", nargs=2, type=float, default=(-45.0, 45.0), show_default=True, help="Degrees.")
@click.option("--pitch-jitter", default=0.0, show_default=True, help="Degrees.")
@_guard
def synth_data(out_dir, seed, epsilon, frame_count, yaw_range, pitch_jitter):
    """Render a synthetic subject turning its head."""
    spec = SyntheticSubjectSpec(seed=seed, epsilon=epsilon, frame_count=frame_count,
                                yaw_range_deg=tuple(yaw_range), pitch_jitter_deg=pitch_jitter)
    path = generate_synthetic_subject(spec, ToyGenerator(ToyGeneratorConfig()), out_dir)
    click.echo(str(path))


@main.command()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="JSON config; flags override it.")
@click.option("--mode", type=click.Choice(["single_view", "multi_view", "multi_latent"]))
@click.option("--data", "data_dir", type=click.Path(file_okay=False), help="Frame directory.")
@click.option("--synthetic-seed", type=int, help="Generate a synthetic subject with this seed instead of --data.")
@click.option("--epsilon", type=float, help="Perturbation of the synthetic subject.")
@click.option("--out", "output_dir", type=click.Path(file_okay=False))
@click.option("--targets", "num_targets", type=int, help="N target views (multi_view).")
@click.option("--latents", "num_latents", type=int, help="M latents (multi_latent).")
@click.option("--init-targets", "num_init_targets", type=int)
@click.option("--steps", type=int)
@click.option("--lr", "initial_lr", type=float)
@click.option("--pti-steps", type=int)
@click.option("--lambda-dist", type=float)
@click.option("--lambda-interp", type=float)
@click.option("--lambda-depth", type=float)
@click.option("--eval-frames", "num_eval_frames", type=int)
@click.option("--viewpoints", "num_viewpoints", type=int)
@click.option("--seed", type=int)
@_guard
def invert(config_path, synthetic_seed, epsilon, steps, initial_lr, pti_steps,
           lambda_dist, lambda_interp, lambda_depth, **flags):
    """Invert a subject and write a run directory."""
    base = ExperimentConfig.load(config_path).to_dict() if config_path else None
    if base is None:
        if flags["data_dir"] is None and synthetic_seed is None:
            raise ConfigError("give --config, --data or --synthetic-seed")
        base = {}
    overrides = dict(flags)
    if synthetic_seed is not None or epsilon is not None:
        syn = dict((base.get("synthetic") or {}))
        if synthetic_seed is not None:
            syn["seed"] = synthetic_seed
        if epsilon is not None:
            syn["epsilon"] = epsilon
        overrides["synthetic"] = syn
        base.pop("data_dir", None)
    elif flags["data_dir"] is not None:
        base.pop("synthetic", None)
    overrides["optimization"] = {"steps": steps, "initial_lr": initial_lr, "pti_steps": pti_steps,
                                 "reg_weights": {"lambda_dist": lambda_dist, "lambda_interp": lambda_interp,
                                                 "lambda_depth": lambda_depth}}
    merged = merge_overrides(base, overrides)
    config = ExperimentConfig.from_dict(merged)
    run_dir = run_experiment(config)
    click.echo(str(run_dir))


@main.command()
@click.option("--run", "run_dir", required=True, type=click.Path(file_okay=False))
@click.option("--data", "data_dir", type=click.Path(file_okay=False), help="Evaluate against other frames.")
@_guard
def evaluate(run_dir, data_dir):
    """Recompute the metrics report of a run."""
    report, diagnostics = evaluate_run(run_dir, data_dir)
    agg = report.aggregates
    click.echo(f"mse_R={agg['mse']:.6g} ms_ssim_R={agg['ms_ssim']:.6g} id_R={agg['id_similarity']:.6g}")
    for k, v in diagnostics.items():
        click.echo(f"{k}={v:.6g}")


@main.command()
@click.option("--run", "run_dir", required=True, type=click.Path(file_okay=False))
@click.option("--component", type=int, required=True)
@click.option("--magnitude", type=float, required=True, help="In standard deviations along the component.")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--basis", "basis_dir", type=click.Path(file_okay=False), help="Existing basis checkpoint.")
@click.option("--pca-samples", default=4096, show_default=True)
@click.option("--pca-k", default=10, show_default=True)
@click.option("--rows", help="Comma-separated W+ rows to edit (default: all).")
@click.option("--views", default=9, show_default=True)
@_guard
def edit(run_dir, component, magnitude, out_dir, basis_dir, pca_samples, pca_k, rows, views):
    """Apply a principal-direction edit to a multi-latent run and render it."""
    model, gen = load_run_model(run_dir)
    if not isinstance(model, MultiLatentSet):
        raise ConfigError("editing needs a multi_latent run")
    out = Path(out_dir)
    if basis_dir:
        basis = load_basis(basis_dir)
    else:
        basis = compute_pca_basis(gen, pca_samples, pca_k, seed=0)
        save_basis(out / "basis", basis)
    mask = None
    if rows:
        chosen = {int(r) for r in rows.split(",")}
        mask = [i in chosen for i in range(gen.num_ws)]
    edited = apply_edit(model, basis, component, magnitude, mask)
    save_latents(out / "latents", edited, {"source_run": str(run_dir), "component": component,
                                           "magnitude": magnitude, "rows": rows})
    write_renders(edited, None, gen, out / "renders", (edited.poses[0].yaw, edited.poses[-1].yaw),
                  views, edited.poses[0])
    click.echo(str(out))


@main.command()
@click.option("--run", "run_dir", required=True, type=click.Path(file_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--views", default=180, show_default=True)
@click.option("--yaw-range", nargs=2, type=float, help="Degrees; defaults to the anchor range or +-45.")
@_guard
def render(run_dir, out_dir, views, yaw_range):
    """Render a turntable sweep of a run."""
    model, gen = load_run_model(run_dir)
    if yaw_range:
        yr = (math.radians(yaw_range[0]), math.radians(yaw_range[1]))
    elif isinstance(model, MultiLatentSet):
        yr = (model.poses[0].yaw, model.poses[-1].yaw)
    else:
        yr = (math.radians(-45.0), math.radians(45.0))
    template = model.poses[0] if isinstance(model, MultiLatentSet) else CameraPose(0.0)
    write_renders(model, None, gen, Path(out_dir), yr, views, template)
    click.echo(out_dir)


@main.command()
@click.argument("run_dirs", nargs=-1, required=True, type=click.Path(file_okay=False))
@click.option("--out", "out_path", type=click.Path(dir_okay=False), help="Also write the table here.")
@_guard
def compare(run_dirs, out_path):
    """Table of frontal and rotation metrics, one row per run."""
    table = compare_runs(run_dirs)
    if out_path:
        Path(out_path).write_text(table)
    click.echo(table, nl=False)


@main.command("show-config")
@click.option("--mode", default="multi_latent", show_default=True)
def show_config(mode):
    """Print a default config file to start from."""
    cfg = ExperimentConfig(mode=mode, synthetic=SyntheticSubjectSpec(frame_count=240))
    click.echo(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))


if __name__ == "__main__":  # pragma: no cover
    main()
