"""
Tests for the command-line interface.
"""

import json
from unittest.mock import patch

import numpy as np
import pandas as pd
import pytest

from rjar.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, build_parser, resolve_config, run_cli
from rjar.config import Settings
from rjar.outputs import sidecar_path


def write_data(path, n, k, seed=0):
    rng = np.random.default_rng(seed)
    Z = rng.normal(size=(n, k))
    v = rng.normal(size=n)
    x = Z @ np.full(k, 0.8) + v
    y = x + 0.6 * v + rng.normal(size=n)
    frame = pd.DataFrame(Z, columns=[f"z{j + 1}" for j in range(k)])
    frame.insert(0, "x", x)
    frame.insert(0, "y", y)
    frame["w"] = rng.normal(size=n)
    frame.to_csv(path, index=False)
    return path


@pytest.fixture
def workdir(tmp_path):
    settings = Settings(output_dir=tmp_path, threads=1)
    with patch("rjar.cli.load_settings", return_value=settings):
        yield tmp_path


@pytest.fixture
def data_file(workdir):
    return write_data(workdir / "data.csv", 60, 5)


def data_args(path):
    return ["--input", str(path), "--outcome", "y", "--endogenous", "x", "--instruments", "z*"]


def last_json_line(text):
    lines = [line for line in text.splitlines() if line.strip()]
    return json.loads(lines[-1])


class TestTestCommand:
    def test_reports_json_on_stdout(self, data_file, capsys):
        code = run_cli(["test", *data_args(data_file), "--beta0", "1", "--tests", "rjar,supscore"])
        assert code == EXIT_OK
        document = json.loads(capsys.readouterr().out)
        assert document["n"] == 60
        assert document["k"] == 5
        assert document["beta0"] == [1.0]
        assert [r["name"] for r in document["results"]] == ["RJAR", "SUPSCORE"]
        assert document["results"][0]["gamma_star"] == document["gamma_star"]
        for result in document["results"]:
            assert result["reject"] == (result["statistic"] > result["critical_value"])

    def test_covariates_and_output_file(self, data_file, workdir, capsys):
        code = run_cli(
            [
                "test",
                *data_args(data_file),
                "--covariates",
                "w",
                "--intercept",
                "--beta0",
                "0.5",
                "--tests",
                "rjar,cms,ms",
                "--output",
                "result.json",
            ]
        )
        assert code == EXIT_OK
        assert capsys.readouterr().out == ""
        document = json.loads((workdir / "result.json").read_text())
        assert len(document["results"]) == 3
        meta = json.loads(sidecar_path(workdir / "result.json").read_text())
        assert meta["config"]["covariates"] == ["w"]
        assert meta["config"]["intercept"] is True

    def test_unregularised_test_with_too_many_instruments(self, workdir, capsys):
        path = write_data(workdir / "wide.csv", 20, 30)
        code = run_cli(["test", *data_args(path), "--beta0", "1", "--tests", "cms"])
        assert code == EXIT_DATA
        assert last_json_line(capsys.readouterr().err)["reason"] == "NOT_APPLICABLE"

    def test_rjar_with_too_many_instruments(self, workdir, capsys):
        path = write_data(workdir / "wide.csv", 20, 30)
        assert run_cli(["test", *data_args(path), "--beta0", "1"]) == EXIT_OK
        assert json.loads(capsys.readouterr().out)["r"] == 20

    def test_missing_file(self, workdir, capsys):
        code = run_cli(["test", *data_args(workdir / "absent.csv"), "--beta0", "1"])
        assert code == EXIT_DATA
        assert last_json_line(capsys.readouterr().err)["reason"] == "RESOURCE"

    def test_parse_error_reports_cell(self, workdir, capsys):
        path = workdir / "bad.csv"
        path.write_text("y,x,z1,z2\n1,2,3,4\n2,1,NaN,0\n0,3,1,1\n")
        code = run_cli(["test", *data_args(path), "--beta0", "1"])
        assert code == EXIT_DATA
        error = last_json_line(capsys.readouterr().err)
        assert error["reason"] == "PARSE"
        assert error["row"] == 2
        assert error["column"] == "z1"

    def test_alpha_out_of_range(self, data_file, capsys):
        code = run_cli(["test", *data_args(data_file), "--beta0", "1", "--alpha", "1.5"])
        assert code == EXIT_DATA
        assert last_json_line(capsys.readouterr().err)["reason"] == "DOMAIN"


class TestUsageErrors:
    @pytest.mark.parametrize(
        "argv",
        [
            [],
            ["bogus"],
            ["test", "--input", "data.csv"],
            ["sweep", "--n-grid", "ten"],
            ["simulate", "--tests", "wald"],
            ["--verbose", "--quiet", "sweep", "--n-grid", "10"],
        ],
    )
    def test_exit_code(self, workdir, capsys, argv):
        assert run_cli(argv) == EXIT_USAGE
        assert last_json_line(capsys.readouterr().err)["reason"] == "USAGE"

    def test_version(self, workdir, capsys):
        assert run_cli(["--version"]) == EXIT_OK
        assert "rjar" in capsys.readouterr().out


def test_confset_writes_csv(data_file, workdir):
    code = run_cli(
        [
            "confset",
            *data_args(data_file),
            "--grid-min",
            "-1",
            "--grid-max",
            "3",
            "--grid-points",
            "9",
            "--tests",
            "rjar,supscore",
            "--output",
            "cs.csv",
        ]
    )
    assert code == EXIT_OK
    frame = pd.read_csv(workdir / "cs.csv")
    assert list(frame.columns) == ["test", "beta0", "statistic", "critical_value", "accepted"]
    assert len(frame) == 18
    assert set(frame["test"]) == {"RJAR", "SUPSCORE"}
    meta = json.loads(sidecar_path(workdir / "cs.csv").read_text())
    assert set(meta["sets"]) == {"RJAR", "SUPSCORE"}
    assert meta["sets"]["RJAR"]["level"] == pytest.approx(0.95)


def test_confset_bounds_must_match_regressors(data_file, capsys):
    code = run_cli(
        ["confset", *data_args(data_file), "--grid-min", "0,0", "--grid-max", "1,1"]
    )
    assert code == EXIT_DATA
    assert last_json_line(capsys.readouterr().err)["reason"] == "DOMAIN"


class TestDiagnose:
    def test_summary(self, data_file, capsys):
        assert run_cli(["diagnose", *data_args(data_file)]) == EXIT_OK
        document = json.loads(capsys.readouterr().out)
        assert document["k"] == 5
        assert document["gamma_star"] >= 0
        assert document["ratio_series"] == []
        assert document["balanced_delta"] > 0

    def test_curve(self, data_file, capsys):
        assert run_cli(["diagnose", *data_args(data_file), "--curve"]) == EXIT_OK
        assert len(json.loads(capsys.readouterr().out)["ratio_series"]) > 200


class TestSimulate:
    ARGS = [
        "simulate",
        "--n",
        "30",
        "--k",
        "6",
        "--reps",
        "2",
        "--mu2",
        "0,10",
        "--beta0-points",
        "3",
        "--threads",
        "1",
    ]

    def _read(self, workdir):
        names = ["size.csv", "power.csv"]
        paths = [workdir / name for name in names] + [sidecar_path(workdir / n) for n in names]
        return [path.read_bytes() for path in paths]

    def test_outputs_are_byte_identical(self, workdir):
        assert run_cli(self.ARGS) == EXIT_OK
        first = self._read(workdir)
        assert run_cli(self.ARGS) == EXIT_OK
        assert self._read(workdir) == first

    def test_tables(self, workdir):
        assert run_cli(self.ARGS) == EXIT_OK
        power = pd.read_csv(workdir / "power.csv")
        assert list(power.columns) == ["beta0", "mu2", "test", "frequency"]
        assert len(power) == 2 * 3 * 4
        size = pd.read_csv(workdir / "size.csv")
        assert list(size.columns) == ["mu2", "alpha", "test", "frequency"]
        assert set(size["mu2"]) == {0.0, 10.0}
        meta = json.loads(sidecar_path(workdir / "size.csv").read_text())
        assert [e["mu2"] for e in meta["experiments"]] == [0.0, 10.0]
        assert meta["kappa_ones"] == 5

    def test_true_value_added_to_grid(self, workdir):
        args = [*self.ARGS[:-4], "--beta0-points", "2", "--tests", "rjar"]
        assert run_cli(args) == EXIT_OK
        power = pd.read_csv(workdir / "power.csv")
        assert sorted(set(power["beta0"])) == [0.0, 1.0, 2.0]
        meta = json.loads(sidecar_path(workdir / "power.csv").read_text())
        assert meta["beta0_grid"] == [0.0, 1.0, 2.0]
        assert meta["config"]["grid_points"] == 2

    def test_sparse_needs_five_instruments(self, workdir, capsys):
        assert run_cli(["simulate", "--k", "3", "--reps", "1"]) == EXIT_DATA
        assert last_json_line(capsys.readouterr().err)["reason"] == "DOMAIN"


def test_sweep(workdir):
    assert run_cli(["sweep", "--n-grid", "20,30", "--output", "sw.csv"]) == EXIT_OK
    frame = pd.read_csv(workdir / "sw.csv")
    assert list(frame.columns) == ["n", "k", "r", "gamma_star", "ratio"]
    assert frame["k"].tolist() == [38, 57]
    assert sidecar_path(workdir / "sw.csv").exists()


def test_resolve_config_fills_settings(tmp_path):
    args = build_parser().parse_args(["sweep", "--n-grid", "10"])
    settings = Settings(output_dir=tmp_path, gamma_floor=2.0, threads=3, materialize_threshold=512)
    cfg = resolve_config(args, settings)
    assert cfg.gamma_floor == 2.0
    assert cfg.threads == 3
    assert cfg.output_dir == tmp_path
    assert cfg.materialize_threshold == 512
    assert cfg.n_grid == [10]
