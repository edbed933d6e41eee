import csv
import io
import json
import subprocess
import sys

import pytest

from canet.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from canet.pnm import read_pgm

from conftest import TINY


def run(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = main(list(map(str, argv)), out, err)
    return code, out.getvalue(), err.getvalue()


@pytest.fixture
def tiny_json(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps({**{k: list(v) if isinstance(v, tuple) else v for k, v in TINY.items()},
                                "epochs": 1}))
    return path


class TestUsage:
    def test_unknown_flag(self):
        code, _, err = run("generate", "--out", "x", "--count", "2", "--colour", "red")
        assert code == EXIT_USAGE and "usage:" in err and "--colour" in err

    def test_missing_subcommand(self):
        code, _, err = run()
        assert code == EXIT_USAGE and "usage:" in err

    def test_bad_mode(self):
        assert run("train", "--data", "d", "--out", "o", "--mode", "m9")[0] == EXIT_USAGE

    def test_help(self):
        proc = subprocess.run([sys.executable, "-m", "canet", "--help"], capture_output=True, text=True)
        assert proc.returncode == 0
        assert all(c in proc.stdout for c in ("generate", "train", "eval", "infer", "gradcheck"))


class TestRuntimeErrors:
    def test_missing_manifest_named(self, tmp_path):
        missing = tmp_path / "no_data"
        code, _, err = run("train", "--data", missing, "--out", tmp_path / "m.ckpt")
        assert code == EXIT_RUNTIME and str(missing) in err
        assert not (tmp_path / "m.ckpt").exists()

    def test_bad_config_fields(self, tmp_path, tiny_data):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"learning_rate": 1}))
        code, _, err = run("train", "--data", tiny_data[0], "--config", cfg, "--out", tmp_path / "m.ckpt")
        assert code == EXIT_RUNTIME and "learning_rate" in err

    def test_invalid_json(self, tmp_path, tiny_data):
        cfg = tmp_path / "c.json"
        cfg.write_text("{nope")
        code, _, err = run("train", "--data", tiny_data[0], "--config", cfg, "--out", tmp_path / "m.ckpt")
        assert code == EXIT_RUNTIME and "not valid JSON" in err

    def test_missing_checkpoint(self, tmp_path, tiny_data):
        code, _, err = run("eval", "--ckpt", tmp_path / "gone.ckpt", "--data", tiny_data[1],
                           "--report", tmp_path / "r.csv")
        assert code == EXIT_RUNTIME and "gone.ckpt" in err

    def test_corrupt_checkpoint(self, tmp_path, tiny_data):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"CANET1" + bytes(64))
        code, _, err = run("eval", "--ckpt", bad, "--data", tiny_data[1], "--report", tmp_path / "r.csv")
        assert code == EXIT_RUNTIME and "bad.ckpt" in err


class TestWorkflow:
    def test_generate(self, tmp_path):
        code, out, _ = run("generate", "--out", tmp_path / "d", "--count", 3, "--size", 32, "--seed", 7)
        assert code == EXIT_OK and "3 samples" in out
        assert (tmp_path / "d" / "manifest.json").exists()
        assert len(list((tmp_path / "d").glob("img_*.ppm"))) == 3

    def test_train_eval_infer(self, tmp_path, tiny_data, tiny_json):
        ckpt = tmp_path / "m.ckpt"
        code, out, err = run("train", "--data", tiny_data[0], "--config", tiny_json, "--out", ckpt,
                             "--mode", "m3", "--epochs", 2)
        assert code == EXIT_OK, err
        assert out.count("epoch ") == 2 and ckpt.exists()
        assert len(ckpt.with_name("m.ckpt.log.csv").read_text().splitlines()) == 3

        report = tmp_path / "r.csv"
        code, out, err = run("eval", "--ckpt", ckpt, "--data", tiny_data[1], "--report", report)
        assert code == EXIT_OK, err
        rows = list(csv.reader(report.open()))
        assert rows[0] == ["id", "mae", "mean_f", "mean_e", "s_measure"]
        assert len(rows) == 6 and rows[-1][0] == "AGGREGATE"
        assert "mae=" in out

        code, _, err = run("infer", "--ckpt", ckpt, "--image", tiny_data[1] / "img_00000.ppm",
                           "--pred", tmp_path / "p.pgm", "--conf", tmp_path / "c.pgm")
        assert code == EXIT_OK, err
        assert read_pgm((tmp_path / "p.pgm").read_bytes()).shape == (32, 32)
        assert read_pgm((tmp_path / "c.pgm").read_bytes()).shape == (32, 32)

    def test_flags_override_config(self, tmp_path, tiny_data, tiny_json):
        from canet.train import load_state

        ckpt = tmp_path / "m.ckpt"
        assert run("train", "--data", tiny_data[0], "--config", tiny_json, "--out", ckpt,
                   "--epochs", 0, "--seed", 5, "--lr-scale", 3)[0] == EXIT_OK
        cfg = load_state(ckpt).config
        assert (cfg.epochs, cfg.seed, cfg.lr_scale, cfg.image_size) == (0, 5, 3.0, 32)

    def test_gradcheck_without_networks(self):
        code, out, _ = run("gradcheck", "--no-networks")
        assert code == EXIT_OK
        lines = out.splitlines()
        assert lines[0].startswith("case") and "cases below 0.001" in lines[-1]
        assert not any("FAIL" in line for line in lines)

    def test_gradcheck_failure_exit(self):
        code, out, err = run("gradcheck", "--no-networks", "--tol", "1e-30")
        assert code == EXIT_RUNTIME and "FAIL" in out and "tolerance" in err
