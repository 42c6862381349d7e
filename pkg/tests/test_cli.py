import json
import subprocess
import sys

import pytest

from softprune.cli import main
from softprune.serialize import save_model
from softprune.sfp import prune_step

from conftest import toy_chain

SMALL = """
[model]
architecture = "plain-chain"
widths = [4, 8]
strides = [1, 2]
input_shape = [1, 9, 9]

[sfp]
pruning_rate = 0.3
epoch_max = 2
batch_size = 32

[data]
dataset = "synthetic"
synthetic_train = 64
synthetic_test = 32

[run]
check_inputs = 10
"""


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text(SMALL)
    return path


@pytest.fixture
def pruned_model(tmp_path):
    model = toy_chain(seed=3)
    event = prune_step(model, 0.3, epoch=1)
    path = tmp_path / "m.sfp"
    save_model(model, path, prune_meta={"final_epoch": 1,
                                        "selections": {k: list(v) for k, v in event.selections.items()}})
    return path


class TestExitCodes:
    def test_missing_config_is_usage_error(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "none.toml")]) == 2

    def test_unknown_flag(self):
        with pytest.raises(SystemExit) as info:
            main(["flops", "--frobnicate"])
        assert info.value.code == 2

    def test_bad_config_key(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text("[sfp]\nrate = 0.3\n")
        assert main(["train", "--config", str(path)]) == 2

    def test_corrupt_model_is_runtime_error(self, tmp_path):
        path = tmp_path / "bad.sfp"
        path.write_bytes(b"SFPMODEL garbage")
        assert main(["compact", "--model", str(path)]) == 1

    def test_missing_model_file(self, tmp_path):
        assert main(["bench", "--model", str(tmp_path / "none.sfp")]) == 1

    def test_flops_without_source(self):
        assert main(["flops"]) == 2

    def test_console_entry_point(self):
        out = subprocess.run([sys.executable, "-m", "softprune.cli", "flops", "--arch", "resnet20"],
                             capture_output=True, text=True)
        assert out.returncode == 0 and "40,812,544" in out.stdout


class TestFlops:
    def test_resnet20_text(self, capsys):
        assert main(["flops", "--arch", "resnet20"]) == 0
        assert "40,812,544" in capsys.readouterr().out

    def test_json_and_skip(self, capsys):
        assert main(["flops", "--arch", "resnet18", "--pruning-rate", "0.3", "--skip", "stem,shortcut",
                     "--json"]) == 0
        d = json.loads(capsys.readouterr().out)
        assert d["total_macs"] == 1_813_561_344
        assert d["pruned_ratio"] == pytest.approx(0.3814, abs=1e-4)

    def test_unknown_skip_token(self):
        assert main(["flops", "--arch", "resnet20", "--skip", "nope"]) == 2

    def test_writes_files(self, tmp_path):
        assert main(["flops", "--arch", "resnet8", "--out-dir", str(tmp_path)]) == 0
        assert (tmp_path / "flops.csv").exists() and (tmp_path / "flops.txt").exists()


class TestModelCommands:
    def test_compact_check(self, pruned_model, tmp_path, capsys):
        assert main(["compact", "--model", str(pruned_model), "--check", "100", "--json"]) == 0
        d = json.loads(capsys.readouterr().out)
        assert d["max_abs_logit_diff"] < 1e-5
        assert d["compact_parameters"] < d["parameters"]
        assert (tmp_path / "m.compact.sfp.map.csv").exists()

    def test_compact_threshold(self, pruned_model, capsys):
        assert main(["compact", "--model", str(pruned_model), "--threshold", "1e-12", "--json"]) == 0
        assert json.loads(capsys.readouterr().out)["source"] == "norm-threshold"

    def test_compact_twice_rejected(self, pruned_model, tmp_path):
        assert main(["compact", "--model", str(pruned_model)]) == 0
        assert main(["compact", "--model", str(tmp_path / "m.compact.sfp")]) == 2

    def test_prune(self, tmp_path, capsys):
        path = tmp_path / "fresh.sfp"
        save_model(toy_chain(), path)
        out = tmp_path / "out"
        assert main(["prune", "--model", str(path), "--pruning-rate", "0.5", "--out-dir", str(out), "--json"]) == 0
        d = json.loads(capsys.readouterr().out)
        assert len(d["selections"]["conv4"]) == 16
        assert (out / "pruned.sfp").exists() and (out / "prune_record.csv").exists()

    def test_bench(self, pruned_model, capsys):
        assert main(["bench", "--model", str(pruned_model), "--batch", "4", "--reps", "10", "--json"]) == 0
        d = json.loads(capsys.readouterr().out)
        assert d["reps"] == 10 and d["theoretical_speedup"] > 0

    def test_bench_rejects_few_reps(self, pruned_model):
        assert main(["bench", "--model", str(pruned_model), "--reps", "3"]) == 2


class TestTrainAndReproduce:
    def test_train(self, config_file, tmp_path, capsys):
        out = tmp_path / "run"
        assert main(["train", "--config", str(config_file), "--out-dir", str(out), "--json"]) == 0
        d = json.loads(capsys.readouterr().out)
        assert d["equivalence_max_diff"] < 1e-5
        assert json.loads((out / "manifest.json").read_text())["status"] == "ok"

    def test_overrides_reach_config(self, config_file, tmp_path):
        out = tmp_path / "run"
        assert main(["train", "--config", str(config_file), "--out-dir", str(out), "--pruning-rate", "0.5",
                     "--epochs", "1", "--seed", "4"]) == 0
        text = (out / "config.toml").read_text()
        assert "pruning_rate = 0.5" in text and "epoch_max = 1" in text and "seed = 4" in text

    def test_reproduce_repeats(self, config_file, tmp_path, capsys):
        out = tmp_path / "rep"
        assert main(["reproduce", "--config", str(config_file), "--out-dir", str(out), "--repeats", "2",
                     "--deterministic", "--json"]) == 0
        d = json.loads(capsys.readouterr().out)
        assert len(d["runs"]) == 2 and "test_acc" in d["summary"]
