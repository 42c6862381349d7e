import json

import pytest

from softprune.config import config_from_dict, load_config
from softprune.errors import ConfigurationError
from softprune.experiment import (ExperimentLog, desk_config, mean_std, preset_configs, run_experiment,
                                  run_repeats)
from softprune.serialize import load_model


def small_config(**run):
    return config_from_dict({
        "model": {"architecture": "plain-chain", "widths": [4, 8], "strides": [1, 2], "input_shape": [1, 9, 9]},
        "sfp": {"pruning_rate": 0.3, "epoch_max": 2, "batch_size": 32, "lr": 0.05},
        "data": {"dataset": "synthetic", "synthetic_train": 96, "synthetic_test": 32},
        "run": {"name": "t", "bench": False, "check_inputs": 10, **run},
    })


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    return run_experiment(small_config(bench=True, bench_batch=4, bench_reps=10), out)


class TestRunExperiment:
    def test_artifacts_and_manifest(self, finished_run):
        d = finished_run.run_dir
        manifest = json.loads((d / "manifest.json").read_text())
        assert manifest["status"] == "ok"
        for name in ("config.toml", "prune_record.csv", "log.csv", "log.json", "model.sfp", "compact.sfp",
                     "compact.sfp.map.csv", "equivalence.json", "flops.csv", "flops.txt", "timing.csv"):
            assert (d / name).exists(), name
        files = {a["file"] for a in manifest["artifacts"].values()}
        assert "compact.sfp" in files and manifest["log_hash"] == finished_run.log.hash()

    def test_equivalence_and_sizes(self, finished_run):
        eq = json.loads((finished_run.run_dir / "equivalence.json").read_text())
        assert eq["passed"] and eq["threshold_plan_agrees"]
        s = finished_run.summary
        assert s["compact_parameters"] < s["parameters"]
        assert 0 < s["theoretical_pruned_ratio"] < 1

    def test_config_snapshot_reloads(self, finished_run):
        cfg = load_config(finished_run.run_dir / "config.toml")
        manifest = json.loads((finished_run.run_dir / "manifest.json").read_text())
        assert cfg.config_hash() == manifest["config_hash"]

    def test_saved_model_carries_selection(self, finished_run):
        model = load_model(finished_run.run_dir / "model.sfp")
        assert model.prune_meta["final_epoch"] == 2
        assert set(model.prune_meta["selections"]) == {"conv1", "conv2"}

    def test_same_seed_same_log_hash(self, tmp_path):
        a = run_experiment(small_config(deterministic=True), tmp_path / "a")
        b = run_experiment(small_config(deterministic=True), tmp_path / "b")
        assert a.log.hash() == b.log.hash()
        assert (tmp_path / "a" / "prune_record.csv").read_bytes() == (tmp_path / "b" / "prune_record.csv").read_bytes()

    def test_failure_keeps_partial_manifest(self, tmp_path):
        cfg = small_config()
        cfg.model.input_shape = (1, 10, 10)  # data stays 9x9, so loading fails after the snapshot
        with pytest.raises(ConfigurationError):
            run_experiment(cfg, tmp_path)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["status"] == "failed" and "ConfigurationError" in manifest["error"]
        assert "config" in manifest["artifacts"]


class TestRepeatsAndPresets:
    def test_repeats_aggregate(self, tmp_path):
        results, agg = run_repeats(small_config(repeats=3), tmp_path)
        assert [r.run_dir.name for r in results] == ["seed0", "seed1", "seed2"]
        accs = [r.summary["test_acc"] for r in results]
        assert agg["test_acc"] == pytest.approx(mean_std(accs))
        assert "test_acc" in json.loads((tmp_path / "summary.json").read_text())

    def test_mean_std_uses_sample_std(self):
        assert mean_std([1, 2, 3]) == (2.0, 1.0)
        assert mean_std([5]) == (5.0, 0.0)

    @pytest.mark.parametrize("name,count", [("ablation-norm", 6), ("ablation-rate", 9), ("ablation-interval", 10),
                                            ("ablation-layers", 2), ("desk", 1)])
    def test_preset_sizes(self, name, count):
        assert len(preset_configs(name, desk_config())) == count

    def test_layer_ablation_differs_only_in_mask(self):
        (_, a), (_, b) = preset_configs("ablation-layers", desk_config())
        da, db = a.to_dict(), b.to_dict()
        assert (da["model"].pop("prune_blocks"), db["model"].pop("prune_blocks")) == ("first", "second")
        assert da == db

    def test_desk_defaults(self):
        cfg = desk_config()
        assert cfg.model.widths == (8, 16, 16, 32) and cfg.model.input_shape == (1, 29, 29)
        assert cfg.sfp.pruning_rate == 0.1 and cfg.run.deterministic


class TestLog:
    def test_hash_depends_on_content(self):
        rows = [{"epoch": 1, "train_loss": 0.5}]
        assert ExperimentLog(rows).hash() == ExperimentLog([dict(rows[0])]).hash()
        assert ExperimentLog(rows).hash() != ExperimentLog([{"epoch": 1, "train_loss": 0.6}]).hash()
