"""Experiment configuration and its JSON snapshot."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from mvinv.generator import ToyGeneratorConfig
from mvinv.inversion import ConfigError, OptimizationConfig
from mvinv.pipeline.synthetic import SyntheticSubjectSpec

MODES = ("single_view", "multi_view", "multi_latent")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce one run.

    Exactly one data source is set: ``data_dir`` (frames plus camera file) or
    ``synthetic`` (a subject generated into the run directory). ``num_targets``
    is the number of target views of a multi-view run; a multi-latent run
    initializes from a ``num_init_targets``-view run and then optimizes
    ``num_latents`` codes. The top-level ``seed`` overrides
    ``optimization.seed``.
    """

    mode: str = "multi_latent"
    output_dir: str = "run"
    data_dir: str | None = None
    synthetic: SyntheticSubjectSpec | None = None
    num_targets: int = 7
    num_latents: int = 9
    num_init_targets: int = 7
    init_steps: int | None = None
    optimization: OptimizationConfig = field(default_factory=OptimizationConfig)
    generator: ToyGeneratorConfig = field(default_factory=ToyGeneratorConfig)
    num_eval_frames: int = 180
    num_viewpoints: int = 60
    num_render_views: int = 9
    extractor_seed: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if (self.data_dir is None) == (self.synthetic is None):
            raise ConfigError("exactly one of data_dir and synthetic must be given")
        if self.num_targets < 1 or self.num_init_targets < 1:
            raise ConfigError("target counts must be >= 1")
        if self.mode == "multi_latent" and self.num_latents < 2:
            raise ConfigError("multi_latent mode needs num_latents >= 2")
        if self.init_steps is not None and self.init_steps < 1:
            raise ConfigError("init_steps must be >= 1")
        if self.num_eval_frames < 1 or self.num_viewpoints < 2 or self.num_render_views < 1:
            raise ConfigError("num_eval_frames >= 1, num_viewpoints >= 2 and num_render_views >= 1 required")
        if self.optimization.seed != self.seed:
            object.__setattr__(self, "optimization", dataclasses.replace(self.optimization, seed=self.seed))

    @property
    def target_count(self) -> int:
        return {"single_view": 1, "multi_view": self.num_targets, "multi_latent": self.num_latents}[self.mode]

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ExperimentConfig":
        data = dict(data)
        unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            if data.get("synthetic") is not None:
                data["synthetic"] = SyntheticSubjectSpec.from_dict(data["synthetic"])
            if "optimization" in data:
                data["optimization"] = OptimizationConfig.from_dict(data["optimization"])
            if "generator" in data:
                gen = dict(data["generator"])
                if "background" in gen:
                    gen["background"] = tuple(gen["background"])
                data["generator"] = ToyGeneratorConfig(**gen)
            return cls(**data)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path} not found") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(data)


def merge_overrides(base: dict[str, Any], overrides: dict[str, Any]) -> dict[str, Any]:
    """Recursively merge ``overrides`` into a copy of ``base``; ``None`` leaves are ignored."""
    out = dict(base)
    for key, value in overrides.items():
        if value is None:
            continue
        if isinstance(value, dict):
            nested = merge_overrides(out.get(key) or {}, value)
            if nested:
                out[key] = nested
        else:
            out[key] = value
    return out
