from __future__ import annotations

import csv
import io
import json

import pytest
from click.testing import CliRunner

from shufflesim import cli
from shufflesim.sim.engine import InvariantViolation, Simulation

SMALL = """schema_version = 1
seed = 3
workload.writers = 6
workload.readers = 4
workload.total_bytes = 240000
"""


@pytest.fixture
def conf(tmp_path):
    path = tmp_path / "small.conf"
    path.write_text(SMALL)
    return path


def invoke(*args):
    return CliRunner().invoke(cli.main, [str(a) for a in args])


def test_run_writes_reports(conf, tmp_path):
    out = tmp_path / "run"
    res = invoke("run", "--config", conf, "--out", out, "--trace")
    assert res.exit_code == 0, res.output
    assert "e2e_runtime" in res.output
    for name in ("metrics.json", "metrics.csv", "summary.txt", "config.txt", "trace.ndjson"):
        assert (out / name).exists()
    report = json.loads((out / "metrics.json").read_text())
    assert report["seed"] == 3 and report["metrics"]["rerun_times"] == 0


def test_run_is_byte_identical(conf, tmp_path):
    for d in ("a", "b"):
        assert invoke("run", "--config", conf, "--out", tmp_path / d, "--trace").exit_code == 0
    for name in ("metrics.json", "trace.ndjson"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_seed_override(conf, tmp_path):
    invoke("run", "--config", conf, "--seed", 9, "--out", tmp_path / "r")
    assert json.loads((tmp_path / "r" / "metrics.json").read_text())["seed"] == 9


def test_bad_config_exits_2(tmp_path):
    bad = tmp_path / "bad.conf"
    bad.write_text("schema_version = 1\nft.nope = 1\n")
    res = invoke("run", "--config", bad)
    assert res.exit_code == 2 and "ft.nope" in res.output
    assert invoke("validate", "--config", bad).exit_code == 2
    assert invoke("run", "--config", tmp_path / "missing.conf").exit_code == 2


def test_invariant_violation_exits_3(conf, tmp_path, monkeypatch):
    def boom(self):
        self.loop.record("marker")
        raise InvariantViolation(7, 1.5, "usage above red")

    monkeypatch.setattr(Simulation, "run", boom)
    res = invoke("run", "--config", conf, "--out", tmp_path / "x", "--trace")
    assert res.exit_code == 3
    assert "marker" in (tmp_path / "x" / "trace.ndjson").read_text()


def test_validate_prints_hash(conf):
    res = invoke("validate", "--config", conf)
    assert res.exit_code == 0 and res.output.startswith("ok ")


def test_compare_self_is_unity(conf, tmp_path):
    invoke("run", "--config", conf, "--out", tmp_path / "a")
    res = invoke("compare", tmp_path / "a", "--baseline", tmp_path / "a", "--out", tmp_path / "cmp.csv")
    assert res.exit_code == 0, res.output
    row = next(csv.DictReader(io.StringIO((tmp_path / "cmp.csv").read_text())))
    assert all(float(row[m]) == 1.0 for m in cli.Metrics.SCALARS)


def test_compare_rejects_other_workload(conf, tmp_path):
    other = tmp_path / "other.conf"
    other.write_text(SMALL.replace("240000", "120000"))
    invoke("run", "--config", conf, "--out", tmp_path / "a")
    invoke("run", "--config", other, "--out", tmp_path / "b")
    res = invoke("compare", tmp_path / "b", "--baseline", tmp_path / "a")
    assert res.exit_code == 2 and "workload" in res.output


def test_compare_missing_metric(conf, tmp_path):
    invoke("run", "--config", conf, "--out", tmp_path / "a")
    invoke("run", "--config", conf, "--out", tmp_path / "b")
    path = tmp_path / "b" / "metrics.json"
    data = json.loads(path.read_text())
    del data["metrics"]["cu_cost"]
    path.write_text(json.dumps(data))
    res = invoke("compare", tmp_path / "b", "--baseline", tmp_path / "a")
    assert res.exit_code == 2 and "cu_cost" in res.output


def test_compare_missing_run(tmp_path):
    assert invoke("compare", tmp_path / "none", "--baseline", tmp_path / "none").exit_code == 2


def test_ratio_edge_cases():
    assert cli.ratio(0, 0) == 1.0
    assert cli.ratio(1, 0) == float("inf")
    assert cli.ratio(3, 2) == 1.5


def test_sweep_grid(conf, tmp_path):
    res = invoke("sweep", "--config", conf, "--out", tmp_path / "sw", "--seeds", "0-1",
                 "--param", "ft.enabled=true,false")
    assert res.exit_code == 0, res.output
    rows = list(csv.DictReader(io.StringIO((tmp_path / "sw" / "sweep.csv").read_text())))
    assert len(rows) == 4
    assert {r["seed"] for r in rows} == {"0", "1"}
    assert len({r["config_hash"] for r in rows}) == 4


@pytest.mark.parametrize("args", [["--param", "ft.enabled"], ["--seeds", "a-b"], ["--param", "ft.nope=1"]])
def test_sweep_input_errors(conf, tmp_path, args):
    assert invoke("sweep", "--config", conf, "--out", tmp_path / "sw", *args).exit_code == 2
