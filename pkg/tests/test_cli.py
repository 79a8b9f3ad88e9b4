import json
import re

import pytest

from ratetip.cli import main


def run_cli(args):
    return main(args)


class TestCriticalRate:
    def test_default_value(self, capsys):
        assert run_cli(["critical-rate"]) == 0
        out = capsys.readouterr().out
        m = re.search(r"critical ramp speed: ([0-9.]+)", out)
        assert m is not None
        assert abs(float(m.group(1)) - 4.0 / 3.0) <= 1e-4
        assert "bracket" in out   # bisection trace printed

    def test_tighter_tolerance(self, capsys):
        assert run_cli(["critical-rate", "--tol", "1e-6"]) == 0
        val = float(re.search(r"critical ramp speed: ([0-9.]+)",
                              capsys.readouterr().out).group(1))
        assert abs(val - 4.0 / 3.0) <= 1e-6

    def test_invalid_bracket_exit_code(self, capsys):
        assert run_cli(["critical-rate", "--bracket", "1.4", "1.5"]) == 2
        assert "numerical failure" in capsys.readouterr().err


class TestConfigHandling:
    def test_malformed_json(self, tmp_path, capsys):
        cfg = tmp_path / "bad.json"
        cfg.write_text("{not json")
        out = tmp_path / "out"
        code = run_cli(["indicators", "--config", str(cfg), "--out", str(out)])
        assert code == 3
        assert not out.exists()   # no partial outputs

    def test_unknown_key_rejected(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"modle": {"D": 0.01}}))
        assert run_cli(["indicators", "--config", str(cfg)]) == 3

    def test_invalid_model_values(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"model": {"D": -1.0}}))
        assert run_cli(["indicators", "--config", str(cfg)]) == 3


def short_config(tmp_path, **extra):
    doc = {"grid": {"n_cells": 800}, "evolve": {"t_final": -8.0}}
    doc.update(extra)
    f = tmp_path / "cfg.json"
    f.write_text(json.dumps(doc))
    return f


class TestOutputs:
    def test_indicators_deterministic_bytes(self, tmp_path):
        cfg = short_config(tmp_path)
        out = tmp_path / "out"
        assert run_cli(["indicators", "--config", str(cfg),
                        "--out", str(out)]) == 0
        csvs = list(out.glob("indicators_*.csv"))
        assert len(csvs) == 1
        first = csvs[0].read_bytes()
        assert run_cli(["indicators", "--config", str(cfg),
                        "--out", str(out)]) == 0
        assert csvs[0].read_bytes() == first
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["command"] == "indicators"
        assert "wall_time_s" in manifest
        assert csvs[0].name in manifest["outputs"]

    def test_fpe_outputs(self, tmp_path):
        cfg = short_config(tmp_path, threshold={"y": 1.5})
        out = tmp_path / "out"
        assert run_cli(["fpe", "--config", str(cfg), "--out", str(out)]) == 0
        for stem in ("fpe_density_", "fpe_escape_", "fpe_threshold_rate_"):
            assert len(list(out.glob(stem + "*.csv"))) == 1

    def test_mc_outputs_and_seed_flag(self, tmp_path):
        cfg = short_config(
            tmp_path, ensemble={"n_paths": 500, "dt_sim": 0.01})
        out = tmp_path / "out"
        assert run_cli(["mc", "--config", str(cfg), "--out", str(out),
                        "--seed", "99"]) == 0
        hist = next(out.glob("mc_histogram_*.csv"))
        assert '"seed": 99' in hist.read_text().splitlines()[0]

    def test_no_files_outside_output_dir(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        cfg = short_config(tmp_path)
        out = tmp_path / "only_here"
        assert run_cli(["indicators", "--config", str(cfg),
                        "--out", str(out)]) == 0
        stray = [p for p in tmp_path.iterdir()
                 if p not in (cfg, out) and p.name != "cfg.json"]
        assert stray == []

    def test_domain_sweep_files(self, tmp_path):
        cfg = short_config(tmp_path,
                           domain_sweep={"x_end_values": [1.0, 2.0]})
        out = tmp_path / "out"
        assert run_cli(["domain-sweep", "--config", str(cfg),
                        "--out", str(out)]) == 0
        assert len(list(out.glob("domain_sweep_xend*.csv"))) == 2

    def test_threshold_sweep_matrix(self, tmp_path):
        cfg = short_config(
            tmp_path, threshold_sweep={"y_min": 1.0, "y_max": 2.0, "n_y": 3},
            evolve={"t_final": -9.0})
        out = tmp_path / "out"
        assert run_cli(["threshold-sweep", "--config", str(cfg),
                        "--out", str(out)]) == 0
        csv = next(out.glob("threshold_sweep_*.csv"))
        header = csv.read_text().splitlines()[0]
        assert header.count("y=") == 3


class TestIndicatorValues:
    def test_default_run_autocorrelation_row(self, tmp_path):
        # full default window; the row nearest t = -3 carries the
        # stationary linear-well autocorrelation
        out = tmp_path / "out"
        assert run_cli(["indicators", "--out", str(out)]) == 0
        csv = next(out.glob("indicators_*.csv"))
        rows = [line.split(",") for line in csv.read_text().splitlines()[1:]]
        t = [float(r[0]) for r in rows]
        a = [float(r[1]) for r in rows]
        i = min(range(len(t)), key=lambda k: abs(t[k] + 3.0))
        assert abs(a[i] - 0.98) <= 0.005


@pytest.mark.slow
class TestPathCommand:
    def test_manifest_reports_optimal_time(self, tmp_path):
        out = tmp_path / "out"
        assert run_cli(["path", "--out", str(out), "--D", "0.05"]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert abs(manifest["results"]["T_end"] - 1.43) <= 0.05
        assert abs(manifest["results"]["m"]) < 1e-8
