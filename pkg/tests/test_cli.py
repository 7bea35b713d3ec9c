import csv
import json
import subprocess
import sys

import pytest

from maskvit.cli import main
from maskvit.maskgen import MaskScheme
from maskvit.search import SearchTrace

TINY = {
    "model": {"layers": 2, "heads": 2, "dim": 16, "grid": "4x4", "patch_px": 2},
    "train": {"epochs": 1, "batch_size": 32, "probe_samples": 16},
    "search": {"probe_epochs": 1},
    "data": {"samples": 64, "val_samples": 200},
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(TINY))
    return str(path)


def run(*argv):
    return main([str(a) for a in argv])


class TestDispatch:
    def test_unknown_subcommand(self, capsys):
        assert run("frobnicate") == 2
        assert "usage" in capsys.readouterr().err

    def test_missing_subcommand(self):
        assert run() == 2

    def test_bad_config_field(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"model": {"depth": 3}}))
        assert run("--config", bad, "flops", "--n", 4, "--d", 4) == 2

    def test_unreadable_config(self, tmp_path):
        assert run("--config", tmp_path / "missing.json", "flops", "--n", 4, "--d", 4) == 2

    def test_bad_search_thresholds(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"search": {"high_threshold": 0.2, "low_threshold": 0.5}}))
        assert run("--config", bad, "flops", "--n", 4, "--d", 4) == 2

    def test_missing_checkpoint_is_runtime_error(self, tmp_path, config):
        assert run("eval", "--config", config, "--checkpoint", tmp_path / "none.mait", "--out", tmp_path) == 1

    def test_module_entry_point(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "maskvit", "flops", "--n", "3136", "--d", "96"],
                              capture_output=True, text=True, check=False, cwd=tmp_path)
        assert proc.returncode == 0
        assert "9/3136" in proc.stdout
        assert (tmp_path / "flops.json").exists()


class TestFlops:
    def test_prints_table_values(self, tmp_path, capsys):
        assert run("flops", "--n", 3136, "--d", 96, "--r", 3, "--out", tmp_path) == 0
        out = capsys.readouterr().out
        assert "1888223232" in out
        assert "29503488" in out
        assert str(2 * 9 * 3136 * 96) in out
        assert "0.287%" in out
        assert "99.713%" in out
        doc = json.loads((tmp_path / "flops.json").read_text())
        assert doc["stages"][0]["attn_map_ratio"] == "9/3136"


class TestGenData:
    def test_byte_identical(self, tmp_path, config):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert run("gen-data", "--config", config, "--grid", "8x8", "--seed", 7, "--out", out) == 0
        for name in ("train.mdat", "val.mdat"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_too_small_grid(self, tmp_path, config):
        assert run("gen-data", "--config", config, "--grid", "3x3", "--out", tmp_path) == 2


class TestTrainPipeline:
    def test_untrained_eval_is_chance(self, tmp_path, config, capsys):
        assert run("train", "--config", config, "--epochs", 0, "--out", tmp_path) == 0
        header = (tmp_path / "metrics.csv").read_text().splitlines()
        assert len(header) == 1 and header[0].startswith("epoch,lr,train_loss")
        assert run("eval", "--config", config, "--checkpoint", tmp_path / "checkpoint.mait", "--out", tmp_path) == 0
        acc = json.loads((tmp_path / "eval.json").read_text())["accuracy"]
        assert 0.35 <= acc <= 0.65

    def test_train_then_analyse(self, tmp_path, config):
        data = tmp_path / "data"
        assert run("gen-data", "--config", config, "--seed", 1, "--out", data) == 0
        assert run("train", "--config", config, "--data", data, "--scheme", "sch1", "--seed", 1, "--out", tmp_path) == 0
        rows = list(csv.DictReader((tmp_path / "metrics.csv").open()))
        assert len(rows) == 1 and "als_l1_h1" in rows[0]
        assert (tmp_path / "attention.npy").exists()

        ckpt = tmp_path / "checkpoint.mait"
        assert run("als", "--config", config, "--checkpoint", ckpt, "--data", data, "--samples", 8, "--out", tmp_path) == 0
        als_rows = list(csv.DictReader((tmp_path / "als.csv").open()))
        assert [(r["layer"], r["head"]) for r in als_rows] == [("0", "0"), ("0", "1"), ("1", "0"), ("1", "1")]
        assert all(0.0 <= float(r["als"]) <= 1.0 for r in als_rows)

        assert run("similarity", "--config", config, "--checkpoint", ckpt, "--data", data,
                   "--samples", 8, "--out", tmp_path) == 0
        sim = list(csv.DictReader((tmp_path / "similarity.csv").open()))
        assert len(sim) == 2 * 2 * 2
        assert all(float(r["similarity"]) == 1.0 for r in sim if r["i"] == r["j"])

    def test_train_outputs_reproducible(self, tmp_path, config):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert run("train", "--config", config, "--seed", 3, "--out", out) == 0
        for name in ("checkpoint.mait", "metrics.csv", "attention.npy"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_unknown_scheme(self, tmp_path, config):
        assert run("train", "--config", config, "--scheme", "sch9", "--epochs", 0, "--out", tmp_path) == 2


class TestSearchAndBench:
    def test_search_masks(self, tmp_path, config, capsys):
        assert run("search-masks", "--config", config, "--out", tmp_path) == 0
        trace = SearchTrace.load(tmp_path / "trace.json")
        scheme = MaskScheme.load(tmp_path / "scheme.json")
        assert 2 <= trace.trainer_calls <= 3
        assert trace.replay() == scheme
        assert json.loads(capsys.readouterr().out)["trainer_calls"] == trace.trainer_calls

    def test_bench(self, tmp_path, capsys):
        assert run("bench", "--n", 64, "--d", 8, "--repeats", 3, "--out", tmp_path) == 0
        reports = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
        assert [r["kernel"] for r in reports] == ["attention", "masked_dense", "sparse"]
        assert reports[2]["multiplies"] < reports[1]["multiplies"]
