import json
import os
import sys

import pytest

# Add the project root to the path
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from api.cli import EXIT_ERROR, EXIT_FAIL, EXIT_OK, cli_main

FLAT_CIRCLE = {
    "manifold": {"kind": "circle", "circumference": 4.0},
    "connection": {"type": "flat_u1", "periods": [0.3]},
    "m": 64,
    "samples": 500,
    "transport": "exact-u1",
    "bootstrap": 50,
}


def write_config(tmp_path, data, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data), encoding="utf-8")
    return str(path)


class TestCli:
    """Exit codes and files of the command line entry point"""

    @pytest.fixture(autouse=True)
    def _isolated_env(self, monkeypatch, tmp_path):
        monkeypatch.chdir(tmp_path)
        for name in ("HOLONOMY_OUT_DIR", "HOLONOMY_WORKERS", "HOLONOMY_CHUNK_SIZE", "HOLONOMY_LOG_LEVEL"):
            monkeypatch.delenv(name, raising=False)

    def test_dist_writes_measure_and_report(self, tmp_path):
        out = tmp_path / "out"
        code = cli_main(["dist", "--config", write_config(tmp_path, FLAT_CIRCLE), "--seed", "42", "--out", str(out)])
        assert code == EXIT_OK
        assert (out / "measure.json").exists()
        report = json.loads((out / "report.json").read_text())
        assert report["verdict"] == "PASS"
        assert report["seed"] == 42

    def test_seed_from_config(self, tmp_path):
        data = dict(FLAT_CIRCLE, seed=5)
        code = cli_main(["dist", "--config", write_config(tmp_path, data), "--out", str(tmp_path / "out")])
        assert code == EXIT_OK

    def test_missing_seed(self, tmp_path, capsys):
        code = cli_main(["dist", "--config", write_config(tmp_path, FLAT_CIRCLE)])
        assert code == EXIT_ERROR
        assert "seed" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path, capsys):
        code = cli_main(["dist", "--config", str(tmp_path / "absent.json"), "--seed", "1"])
        assert code == EXIT_ERROR
        assert "not found" in capsys.readouterr().err

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json", encoding="utf-8")
        assert cli_main(["dist", "--config", str(path), "--seed", "1"]) == EXIT_ERROR

    def test_invalid_config_field(self, tmp_path, capsys):
        data = dict(FLAT_CIRCLE, m=48)
        assert cli_main(["dist", "--config", write_config(tmp_path, data), "--seed", "1"]) == EXIT_ERROR
        assert "power of two" in capsys.readouterr().err

    def test_usage_errors(self, tmp_path):
        assert cli_main([]) == EXIT_ERROR
        assert cli_main(["dist"]) == EXIT_ERROR
        assert cli_main(["plot", "--config", "x.json"]) == EXIT_ERROR
        assert cli_main(["dist", "--config", write_config(tmp_path, FLAT_CIRCLE), "--seed", "one"]) == EXIT_ERROR

    def test_flag_overrides(self, tmp_path):
        out = tmp_path / "out"
        code = cli_main(["dist", "--config", write_config(tmp_path, FLAT_CIRCLE), "--seed", "3", "--samples", "200",
                         "--m", "32", "--out", str(out)])
        assert code == EXIT_OK
        measure = json.loads((out / "measure.json").read_text())
        assert measure["meta"]["samples"] == 200
        assert measure["meta"]["m"] == 32

    def test_fail_verdict_exit_code(self, tmp_path):
        data = dict(FLAT_CIRCLE, subgroup={"kind": "trivial"}, samples=1000)
        code = cli_main(["subgroup", "--config", write_config(tmp_path, data), "--seed", "42",
                         "--out", str(tmp_path / "out")])
        assert code == EXIT_FAIL

    def test_selftest(self, tmp_path):
        out = tmp_path / "selftest"
        assert cli_main(["selftest", "--out", str(out)]) == EXIT_OK
        assert (out / "selftest.csv").exists()
        report = json.loads((out / "report.json").read_text())
        assert report["verdict"] == "PASS"
        assert all(row["passed"] for row in report["rows"])
