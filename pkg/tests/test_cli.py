import os

import numpy as np
import pytest

from htar.cli import main
from htar.io import load_model, read_series

MODEL_CONFIG = """
[model]
dims = 2 2 2
lag = 1
y_orders = 1 2 3
y_ranks = 1 1 1 1
x_orders = 1 2 3
x_ranks = 1 1 1 1
noise = iid_gaussian
target_rho = 0.85
length = 300
burn_in = 100
seed = 7

[fit]
max_sweeps = 30
rel_loss_tol = 1e-6
restarts = 1
init = spectral
seed = 3
"""

SELECT_CONFIG = (
    MODEL_CONFIG
    + """
[select]
y_candidates = 1 2 3 ; 2 1 3
x_candidates = 1 2 3 ; 2 1 3
phi = 1.0
v_max = 3
l_max = 1
seed = 5
"""
)


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "config.ini"
    path.write_text(MODEL_CONFIG)
    return str(path)


@pytest.fixture
def data_file(tmp_path, config_file):
    out = str(tmp_path / "series.txt")
    assert main(["simulate", "--config", config_file, "--out", out]) == 0
    return out


class TestSimulate:
    def test_writes_series(self, tmp_path, config_file):
        out = str(tmp_path / "s.txt")
        assert main(["simulate", "--config", config_file, "--out", out]) == 0
        series = read_series(out)
        assert series.dims == (2, 2, 2)
        assert len(series) == 301  # length + lag initial values

    def test_seed_determinism(self, tmp_path, config_file):
        a, b, c = (str(tmp_path / n) for n in ("a.txt", "b.txt", "c.txt"))
        main(["simulate", "--config", config_file, "--out", a, "--seed", "11"])
        main(["simulate", "--config", config_file, "--out", b, "--seed", "11"])
        main(["simulate", "--config", config_file, "--out", c, "--seed", "12"])
        assert open(a).read() == open(b).read()
        assert open(a).read() != open(c).read()


class TestFit:
    def test_end_to_end(self, tmp_path, config_file, data_file, capsys):
        model_out = str(tmp_path / "model.json")
        report_out = str(tmp_path / "report.csv")
        code = main(
            ["fit", "--data", data_file, "--config", config_file,
             "--out", model_out, "--report", report_out]
        )
        assert code == 0
        model = load_model(model_out)
        assert model.lag == 1
        lines = open(report_out).read().splitlines()
        assert lines[0] == "sweep,loss"
        losses = [float(l.split(",")[1]) for l in lines[1:]]
        assert all(b <= a + 1e-8 for a, b in zip(losses, losses[1:]))
        out = capsys.readouterr().out
        assert "loss=" in out


class TestSelect:
    def test_prints_structure(self, tmp_path, data_file, capsys):
        cfg = tmp_path / "sel.ini"
        cfg.write_text(SELECT_CONFIG)
        model_out = str(tmp_path / "selected.json")
        code = main(["select", "--data", data_file, "--config", str(cfg), "--out", model_out])
        assert code == 0
        out = capsys.readouterr().out
        assert "lag: 1" in out
        assert "order=" in out and "ranks=" in out
        assert os.path.exists(model_out)


class TestForecast:
    def test_end_to_end(self, tmp_path, config_file, data_file, capsys):
        model_out = str(tmp_path / "model.json")
        main(["fit", "--data", data_file, "--config", config_file, "--out", model_out])
        report_out = str(tmp_path / "forecast.csv")
        code = main(
            ["forecast", "--data", data_file, "--model", model_out,
             "--split", "290", "--out", report_out, "--config", config_file]
        )
        assert code == 0
        lines = open(report_out).read().splitlines()
        assert lines[0] == "index,sq_error,abs_error"
        assert len(lines) == 12  # 301 - 290 test points
        out = capsys.readouterr().out
        assert "msfe:" in out and "mafe:" in out


class TestStudy:
    def test_scaling_schema(self, tmp_path):
        cfg = tmp_path / "study.ini"
        cfg.write_text(
            "[study]\nreplications = 1\nseed = 2\nnoises = iid_gaussian\ngrid = 300 400 500\n"
            "[fit]\nmax_sweeps = 10\nrestarts = 1\ninit = spectral\n"
        )
        out = str(tmp_path / "scaling.csv")
        code = main(
            ["study", "scaling", "--setting", "c", "--config", str(cfg), "--out", out]
        )
        assert code == 0
        lines = open(out).read().splitlines()
        assert lines[0] == "setting,noise,axis_value,replication,error_frob"
        assert len(lines) == 4
        agg = out.replace(".csv", "_agg.csv")
        assert open(agg).read().splitlines()[0] == "setting,noise,axis_value,mean,stderr"

    def test_scaling_needs_setting(self, tmp_path, capsys):
        out = str(tmp_path / "x.csv")
        assert main(["study", "scaling", "--out", out]) == 1


class TestErrors:
    def test_unknown_flag(self):
        assert main(["fit", "--bogus", "x"]) == 1

    def test_missing_data_file(self, tmp_path, config_file):
        code = main(
            ["fit", "--data", str(tmp_path / "nope.txt"), "--config", config_file,
             "--out", str(tmp_path / "m.json")]
        )
        assert code == 2

    def test_unknown_config_key(self, tmp_path, data_file):
        cfg = tmp_path / "bad.ini"
        cfg.write_text("[model]\nwidgets = 7\n")
        code = main(
            ["fit", "--data", data_file, "--config", str(cfg),
             "--out", str(tmp_path / "m.json")]
        )
        assert code == 1

    def test_malformed_data(self, tmp_path, config_file):
        bad = tmp_path / "bad.txt"
        bad.write_text("dims: 2\nT: 1\n1.0 foo\n")
        code = main(
            ["fit", "--data", str(bad), "--config", config_file,
             "--out", str(tmp_path / "m.json")]
        )
        assert code == 2
