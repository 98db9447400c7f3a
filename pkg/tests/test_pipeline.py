import hashlib
import json
import shutil
from pathlib import Path

import pytest
from click.testing import CliRunner

from mvinv.inversion import ConfigError
from mvinv.pipeline.cli import main
from mvinv.pipeline.config import ExperimentConfig, merge_overrides
from mvinv.pipeline.run import (
    REPORT_FILE,
    RunLockedError,
    compare_runs,
    loss_trace_from_log,
    parse_log,
    run_experiment,
    run_lock,
)
from mvinv.pipeline.synthetic import DataError, SyntheticSubjectSpec, generate_synthetic_subject
from mvinv.generator import ToyGenerator, ToyGeneratorConfig

TINY_GEN = {"resolution": 32, "samples": 16}
TINY_OPT = {"steps": 3, "pti_steps": 2, "w_avg_samples": 32}


def tiny_config(out, mode="multi_latent", **extra):
    data = {"mode": mode, "output_dir": str(out), "synthetic": {"seed": 0, "frame_count": 12, "epsilon": 0.1},
            "num_targets": 3, "num_latents": 3, "num_init_targets": 2, "optimization": TINY_OPT,
            "generator": TINY_GEN, "num_eval_frames": 4, "num_viewpoints": 2, "num_render_views": 2}
    data.update(extra)
    return ExperimentConfig.from_dict(data)


def digest(directory: Path) -> dict[str, str]:
    return {str(p.relative_to(directory)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(directory.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def ml_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("runs") / "ml"
    return run_experiment(tiny_config(out))


def test_run_directory_contents(ml_run):
    for name in ("config.json", "report.tsv", "id_curve.tsv", "diagnostics.json", "log.txt",
                 "latents/meta.json", "generator/meta.json", "renders/rgb_000.png", "renders/depth_001.png"):
        assert (ml_run / name).exists(), name
    assert not (ml_run / ".lock").exists()
    diag = json.loads((ml_run / "diagnostics.json").read_text())
    assert set(diag) == {"depth_consistency", "neighbor_latent_distance"}


def test_log_records_every_stage(ml_run):
    stages = {r["stage"] for r in parse_log(ml_run / "log.txt")}
    assert stages == {"init-latent", "multi-latent", "pti"}
    assert len(loss_trace_from_log(ml_run / "log.txt", "multi-latent")) == 3


def test_rerun_from_snapshot_is_bitwise_identical(ml_run, tmp_path):
    snapshot = ExperimentConfig.load(ml_run / "config.json")
    copy = ExperimentConfig.from_dict({**snapshot.to_dict(), "output_dir": str(tmp_path / "again")})
    again = run_experiment(copy)
    a, b = digest(ml_run), digest(again)
    a.pop("config.json"), b.pop("config.json")
    assert a == b


def test_single_view_run_and_compare(tmp_path, ml_run):
    sv = run_experiment(tiny_config(tmp_path / "sv", mode="single_view"))
    assert not (sv / "diagnostics.json").exists()
    table = compare_runs([str(sv), str(ml_run)]).splitlines()
    assert table[0].split("\t")[1:] == ["frontal_mse", "frontal_perceptual", "frontal_ms_ssim", "frontal_id",
                                        "mse_R", "perceptual_R", "ms_ssim_R", "id_R"]
    assert [row.split("\t")[0] for row in table[1:]] == [str(sv), str(ml_run)]
    with pytest.raises(DataError):
        compare_runs([str(tmp_path / "nope")])


def test_input_data_directory_not_mutated(tmp_path):
    data = tmp_path / "data"
    gen = ToyGenerator(ToyGeneratorConfig(**TINY_GEN))
    generate_synthetic_subject(SyntheticSubjectSpec(frame_count=10), gen, data)
    before = digest(data)
    cfg = tiny_config(tmp_path / "run", mode="multi_view", synthetic=None, data_dir=str(data))
    run_experiment(cfg)
    assert digest(data) == before


def test_lock_blocks_concurrent_runs(tmp_path):
    with run_lock(tmp_path / "r"):
        with pytest.raises(RunLockedError):
            with run_lock(tmp_path / "r"):
                pass
    with run_lock(tmp_path / "r"):
        pass


def test_config_validation(tmp_path):
    with pytest.raises(ConfigError):
        tiny_config(tmp_path, num_latents=1)
    with pytest.raises(ConfigError):
        tiny_config(tmp_path, data_dir="x")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"synthetic": {}, "bogus": 1})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"mode": "everything", "synthetic": {}})


def test_config_round_trip(tmp_path):
    cfg = tiny_config(tmp_path, seed=4)
    assert cfg.optimization.seed == 4
    cfg.save(tmp_path / "c.json")
    assert ExperimentConfig.load(tmp_path / "c.json") == cfg


def test_merge_overrides_keeps_unset_values():
    base = {"a": 1, "opt": {"steps": 5, "lr": 0.1, "reg": {"x": 1}}}
    merged = merge_overrides(base, {"a": None, "opt": {"steps": 9, "lr": None, "reg": {"x": None}}})
    assert merged == {"a": 1, "opt": {"steps": 9, "lr": 0.1, "reg": {"x": 1}}}


# ----------------------------------------------------------------- CLI


@pytest.fixture(scope="module")
def cli_config(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    path = root / "cfg.json"
    tiny_config(root / "run").save(path)
    return path


def test_cli_end_to_end(tmp_path, cli_config):
    r = CliRunner()
    res = r.invoke(main, ["invert", "--config", str(cli_config), "--out", str(tmp_path / "run"), "--seed", "1"])
    assert res.exit_code == 0, res.output
    snap = json.loads((tmp_path / "run" / "config.json").read_text())
    assert snap["seed"] == 1 and snap["optimization"]["steps"] == 3
    assert r.invoke(main, ["evaluate", "--run", str(tmp_path / "run")]).exit_code == 0
    res = r.invoke(main, ["render", "--run", str(tmp_path / "run"), "--out", str(tmp_path / "turn"), "--views", "3"])
    assert res.exit_code == 0 and len(list((tmp_path / "turn").glob("rgb_*.png"))) == 3
    res = r.invoke(main, ["edit", "--run", str(tmp_path / "run"), "--component", "0", "--magnitude", "1.5",
                          "--out", str(tmp_path / "edit"), "--pca-samples", "64", "--pca-k", "3", "--views", "2"])
    assert res.exit_code == 0, res.output
    assert (tmp_path / "edit" / "basis" / "meta.json").exists()
    res = r.invoke(main, ["compare", str(tmp_path / "run"), "--out", str(tmp_path / "t.tsv")])
    assert res.exit_code == 0 and (tmp_path / "t.tsv").read_text() == res.output


def test_cli_synth_data(tmp_path):
    res = CliRunner().invoke(main, ["synth-data", "--out", str(tmp_path / "d"), "--frames", "5", "--epsilon", "0.05"])
    assert res.exit_code == 0 and len(list((tmp_path / "d").glob("frame_*.png"))) == 5


def test_cli_show_config():
    res = CliRunner().invoke(main, ["show-config"])
    assert res.exit_code == 0
    cfg = json.loads(res.output)
    assert cfg["num_eval_frames"] == 180 and cfg["num_viewpoints"] == 60


@pytest.mark.parametrize("args,code", [
    (["invert", "--data", "/nonexistent/dir", "--mode", "single_view"], 3),
    (["invert", "--synthetic-seed", "0", "--mode", "multi_latent", "--latents", "1"], 2),
    (["invert"], 2),
    (["compare", "/nonexistent/run"], 3),
    (["evaluate", "--run", "/nonexistent/run"], 3),
])
def test_cli_exit_codes(tmp_path, args, code):
    if args[0] == "invert":
        args = args + ["--out", str(tmp_path / "r")]
    assert CliRunner().invoke(main, args).exit_code == code
    if "/nonexistent/dir" in args:
        assert not (tmp_path / "r").exists()


def test_cli_numerical_failure_exit_code(tmp_path, cli_config):
    res = CliRunner().invoke(main, ["invert", "--config", str(cli_config), "--out", str(tmp_path / "r"),
                                    "--mode", "single_view", "--lr", "1e30"])
    assert res.exit_code == 4, res.output
