import csv
import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from kanwm.cli import EXIT_OK, EXIT_USAGE, ablation_configs, main
from kanwm.config import ConfigError, ExperimentConfig, config_from_dict, dump_config, load_config, smoke_config
from kanwm.report import CSV_COLUMNS, emit_report, smooth
from kanwm.sizing import InfeasibleBudget, SizingContext, iso_param_solve, size_models, subsystem_param_count
from kanwm.train import check_run, measure_fps, read_metrics, updates_due


@pytest.mark.parametrize("bad", [
    {"prediction": "cnn"}, {"perception": "resnet"}, {"tolerance": 0.0}, {"train_ratio": -1.0},
    {"precision": "float16"}, {"batch_size": 0}, {"imag_starts": -1}, {"reward_bins": 40},
])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        ExperimentConfig(**bad)


def test_config_unknown_key_and_yaml_round_trip(tmp_path):
    with pytest.raises(ConfigError):
        config_from_dict({"learning_rate": 1e-3})
    cfg = ExperimentConfig(prediction="fastkan", seed=3, lr=1e-4)
    dump_config(cfg, tmp_path / "c.yaml")
    assert load_config(tmp_path / "c.yaml") == cfg
    (tmp_path / "list.yaml").write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "list.yaml")


def test_run_ids_and_groups():
    assert ExperimentConfig().run_id == "baseline-s0"
    cfg = ExperimentConfig(behavior="kan", seed=2)
    assert (cfg.group, cfg.backbone, cfg.run_id) == ("behavior", "kan", "behavior-kan-s2")
    assert ExperimentConfig(prediction="kan", behavior="kan").group == "mixed"
    assert ExperimentConfig().gamma == pytest.approx(1 - 1 / 333)


def test_solver_returns_exact_widths():
    ctx = SizingContext()
    target = subsystem_param_count("prediction", "kan", (7, 7), ctx)
    assert iso_param_solve("prediction", "kan", target, 0.01, ctx) == (7, 7)


def test_solver_hits_budget_within_tolerance():
    ctx = SizingContext()
    units = iso_param_solve("prediction", "fastkan", 50_000, 0.01, ctx)
    assert subsystem_param_count("prediction", "fastkan", units, ctx) == pytest.approx(50_000, rel=0.01)


def test_solver_rejects_infeasible_and_bad_tolerance():
    with pytest.raises(InfeasibleBudget):
        iso_param_solve("prediction", "mlp", 1, 0.01)
    with pytest.raises(ValueError):
        iso_param_solve("prediction", "mlp", 100_000, 0.0)
    with pytest.raises(ValueError):
        iso_param_solve("planning", "mlp", 100_000, 0.01)


@pytest.mark.parametrize("subsystem", ["prediction", "behavior"])
def test_variants_differ_pairwise_within_twice_tolerance(subsystem):
    ctx = SizingContext()
    counts = [subsystem_param_count(subsystem, k, iso_param_solve(subsystem, k, 60_000, 0.01, ctx), ctx)
              for k in ("mlp", "kan", "fastkan")]
    assert max(counts) - min(counts) <= 2 * 0.01 * 60_000


def test_size_models_reports_counts():
    _, _, sizing = size_models(ExperimentConfig(prediction="fastkan"))
    assert sizing.counts["prediction"] == pytest.approx(100_000, rel=0.01)
    assert sizing.counts["perception"] == sizing.counts["perception_target"]


def test_measure_fps_examples():
    assert measure_fps(1000, 10, 16, 64, 1.0) == (1000.0, 10240.0)
    assert measure_fps(0, 0, 16, 64, 2.0) == (0.0, 0.0)
    with pytest.raises(ValueError):
        measure_fps(10, 1, 16, 64, 0.0)


def test_updates_due():
    assert updates_due(1000, 0.0625) == 62
    assert updates_due(15, 0.0625) == 0 and updates_due(16, 0.0625) == 1


def test_smoothing():
    np.testing.assert_allclose(smooth(np.full(20, 3.5)), 3.5)
    np.testing.assert_allclose(smooth([0.0, 1.0]), [0.0, 0.2])
    assert smooth([]).size == 0


def _fake_run(root, run_id, returns):
    d = root / run_id
    d.mkdir()
    summary = {"run_id": run_id, "group": "baseline", "backbone": "baseline", "final_return": returns[-1],
               "fps_policy": 10.0, "fps_train": 100.0, "params": 5}
    (d / "summary.json").write_text(json.dumps(summary))
    lines = [json.dumps({"env_step": 100 * (i + 1), "wall_seconds": float(i + 1), "eval_return": r})
             for i, r in enumerate(returns)]
    (d / "metrics.jsonl").write_text("\n".join(lines) + "\n")
    return d


def test_emit_report_outputs(tmp_path):
    runs = [_fake_run(tmp_path, "a-s0", [1.0, 2.0, 3.0]), _fake_run(tmp_path, "b-s0", [0.5, 0.5])]
    paths = emit_report(runs, tmp_path / "report")
    with paths["csv"].open() as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == CSV_COLUMNS
    assert [r[0] for r in rows[1:]] == ["a-s0", "b-s0"]
    assert len(paths["jsonl"].read_text().splitlines()) == 5
    for key in ("steps_svg", "wall_svg"):
        assert ET.parse(paths[key]).getroot().tag.endswith("svg")
    with pytest.raises(ValueError):
        emit_report([], tmp_path / "empty")


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["verify"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["passed"]
    assert main(["report", str(tmp_path / "nope")]) == EXIT_USAGE
    (tmp_path / "bad.yaml").write_text("batch_sz: 3\n")
    assert main(["train", "--config", str(tmp_path / "bad.yaml"), "--outdir", str(tmp_path)]) == EXIT_USAGE


def test_ablation_matrix_is_deduplicated():
    cfgs = ablation_configs(smoke_config(), [0, 1])
    ids = [c.run_id for c in cfgs]
    assert len(ids) == len(set(ids)) == 14
    assert ids[0] == "baseline-s0" and "prediction-fastkan-s1" in ids


def test_smoke_run_artifacts(smoke_runs):
    cfg, (run_dir, _) = smoke_runs
    records = read_metrics(run_dir)
    assert len(records) >= 10
    assert check_run(run_dir, cfg) == []
    assert (run_dir / "config.yaml").exists() and (run_dir / "checkpoint").is_dir()
    summary = json.loads((run_dir / "summary.json").read_text())
    assert summary["env_steps"] == cfg.env_steps and summary["final_return"] is not None
