import csv

import pytest

from fairprune.cli import main

TINY = """
name = "cli"
methods = ["random"]
variants = ["ce", "pw"]
speedups = [{speed}]
trials = 1

[dataset]
preset = "balanced"
test_per_cell = 20

[original]
epochs = 1
batch_size = 64

[retrain]
epochs = 1
batch_size = 64
"""


def _config(tmp_path, speed=1.5):
    path = tmp_path / "c.toml"
    path.write_text(TINY.format(speed=speed))
    return str(path)


@pytest.fixture(autouse=True)
def _no_env(monkeypatch):
    monkeypatch.delenv("FAIRPRUNE_OUT", raising=False)


class TestExitCodes:
    def test_matrix_ok(self, tmp_path):
        out = tmp_path / "out"
        assert main(["matrix", "--config", _config(tmp_path), "--out", str(out)]) == 0
        with open(out / "results.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["row_type"] for r in rows].count("trial") == 2

    def test_failed_trial_exits_one(self, tmp_path):
        assert main(["matrix", "--config", _config(tmp_path, 1e6), "--out", str(tmp_path / "o")]) == 1

    def test_bad_config_exits_two(self, tmp_path, capsys):
        (tmp_path / "bad.toml").write_text("methods = ['magic']\n")
        assert main(["matrix", "--config", str(tmp_path / "bad.toml")]) == 2
        assert "magic" in capsys.readouterr().err

    def test_unknown_command(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["explode", "--config", _config(tmp_path)])
        assert exc.value.code == 2


class TestCommands:
    def test_env_overrides_out(self, tmp_path, monkeypatch):
        monkeypatch.setenv("FAIRPRUNE_OUT", str(tmp_path / "env"))
        assert main(["train", "--config", _config(tmp_path), "--out", str(tmp_path / "flag")]) == 0
        assert (tmp_path / "env" / "results.csv").exists()
        assert not (tmp_path / "flag").exists()

    def test_train_prune_eval(self, tmp_path):
        out = str(tmp_path / "o")
        cfg = _config(tmp_path)
        assert main(["train", "--config", cfg, "--out", out]) == 0
        assert main(["prune", "--config", cfg, "--out", out, "--seed", "0"]) == 0
        assert main(["eval", "--config", cfg, "--out", out]) == 0
        with open(tmp_path / "o" / "eval.csv", newline="") as fh:
            names = [r["model"] for r in csv.DictReader(fh)]
        assert any(n.startswith("pruned_random_ce") for n in names)
        assert any(n.startswith("original_") for n in names)

    def test_eval_without_models(self, tmp_path):
        assert main(["eval", "--config", _config(tmp_path), "--out", str(tmp_path / "empty")]) == 1

    def test_seed_override(self, tmp_path):
        out = tmp_path / "o"
        assert main(["train", "--config", _config(tmp_path), "--out", str(out), "--seed", "7"]) == 0
        assert any("seed7" in p.name for p in (out / "models").glob("*.npz"))
