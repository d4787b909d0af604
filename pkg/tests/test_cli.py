import csv
import json
import os

import pytest

from posterior_shield import cli
from posterior_shield.config import SEED_ENV, parse_config
from posterior_shield.exceptions import EmptyReport
from posterior_shield.invariants import Check
from posterior_shield.runner import (LATENCY_HEADER, POINTS_HEADER, ExperimentReport,
                                     emit_plot_data, load_report, run_experiment)

TINY = """
seed = 3
[dataset]
params = {{ n_classes = 3, per_class = 40, spread = 0.1 }}
[victim]
train = {{ epochs = 30 }}
[adversary]
hidden = [8]
train = {{ epochs = 10 }}
[pool]
size = 60
[sweep]
betas = {betas}
seeds = {seeds}
{defenses}
[bench]
n_classes = 10
n_features = 8
hidden = [16]
per_class = 20
queries = 200
warmup = 100
"""


def tiny(tmp_path, betas="[0.0]", seeds="[0]", kinds=("none", "dcp")):
    defenses = "".join(f'[[defenses]]\nkind = "{k}"\n' for k in kinds)
    p = tmp_path / "tiny.toml"
    p.write_text(TINY.format(betas=betas, seeds=seeds, defenses=defenses))
    return p


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(autouse=True)
def no_env_seed(monkeypatch):
    monkeypatch.delenv(SEED_ENV, raising=False)


class TestRun:
    def test_single_beta_zero(self, tmp_path):
        out = tmp_path / "out"
        assert cli.main(["run", str(tiny(tmp_path)), "-o", str(out)]) == 0
        table = rows(out / "points.csv")
        assert table[0] == POINTS_HEADER and len(table) == 3
        none, dcp = (dict(zip(POINTS_HEADER, r)) for r in sorted(table[1:]))
        assert dcp["adv_err_pct"] == none["adv_err_pct"]
        assert dcp["mean_l1"] == f"{0:.9f}" and dcp["mean_latency_ns"] == ""
        assert (out / "tables.md").read_text().startswith("# Results")

    def test_grid_row_count(self, tmp_path):
        out = tmp_path / "out"
        cfg = tiny(tmp_path, "[0.0, 0.5, 1.0, 1.5]", "[0, 1]", ("none", "dcp", "rs"))
        assert cli.main(["run", str(cfg), "-o", str(out), "-j", "2"]) == 0
        table = rows(out / "points.csv")
        assert len(table) == 1 + 3 * 4 * 2
        assert {r[0] for r in table[1:]} == {"none", "dcp", "rs"}

    def test_report_snapshot(self, tmp_path):
        out = tmp_path / "out"
        p = tiny(tmp_path)
        cli.main(["run", str(p), "-o", str(out), "--seed", "9"])
        data = json.loads((out / "report.json").read_text())
        assert data["status"] == "ok" and data["error"] is None
        snap = data["config"]
        assert snap["seed"] == 9 and snap["output_dir"] == str(out)
        assert snap == parse_config(p, {"seed": 9, "output_dir": str(out)}).to_dict()
        assert "0.9" not in data["constrained_max"]["dcp"]
        assert set(data["constrained_max"]["dcp"]["60"]) == {"1", "2", "5"}

    def test_record_latency_fills_column(self, tmp_path):
        out = tmp_path / "out"
        cli.main(["run", str(tiny(tmp_path)), "-o", str(out), "--record-latency"])
        assert all(float(r[POINTS_HEADER.index("mean_latency_ns")]) > 0
                   for r in rows(out / "points.csv")[1:])

    def test_set_override(self, tmp_path):
        out = tmp_path / "out"
        cli.main(["run", str(tiny(tmp_path)), "-o", str(out), "--set", "sweep.betas=[0.0, 0.4]"])
        assert len(rows(out / "points.csv")) == 1 + 2 * 2

    def test_error_record(self, tmp_path, monkeypatch):
        out = tmp_path / "out"
        import posterior_shield.runner as runner

        def broken(*a, **k):
            raise FloatingPointError("diverged")
        monkeypatch.setattr(runner, "train_victim", broken)
        cfg = parse_config(tiny(tmp_path), {"output_dir": str(out)})
        with pytest.raises(FloatingPointError):
            run_experiment(cfg)
        data = json.loads((out / "report.json").read_text())
        assert data["status"] == "error"
        assert data["error"] == {"type": "FloatingPointError", "message": "diverged"}
        assert data["config"]["seed"] == 3


class TestExitCodes:
    def test_config_error(self, tmp_path, capsys):
        p = tiny(tmp_path, betas="[2.0]")
        assert cli.main(["run", str(p), "-o", str(tmp_path / "o")]) == 1
        assert "allow-extended-beta" in capsys.readouterr().err
        assert cli.main(["run", str(tmp_path / "absent.toml")]) == 1

    def test_strict_unknown_key(self, tmp_path):
        p = tiny(tmp_path)
        p.write_text(p.read_text() + "\n[extras]\nx = 1\n")
        assert cli.main(["run", str(p), "--strict", "-o", str(tmp_path / "o")]) == 1

    def test_runtime_error(self, tmp_path):
        bad = tmp_path / "report.json"
        bad.write_text("{not json")
        assert cli.main(["plot-data", str(bad)]) == 2

    def test_selftest_pass_and_fail(self, monkeypatch, capsys):
        assert cli.main(["selftest", "--samples", "200"]) == 0
        import posterior_shield.invariants as inv
        monkeypatch.setattr(inv, "run_selftest",
                            lambda n, seed: [Check("injected", False, "forced"),
                                             Check("fine", True, "")])
        assert cli.main(["selftest"]) == 3
        assert "FAIL  injected" in capsys.readouterr().out

    def test_bad_set_syntax(self, tmp_path):
        with pytest.raises(SystemExit):
            cli.main(["run", str(tiny(tmp_path)), "--set", "novalue"])


class TestPlotData:
    def test_single_point_report(self, tmp_path):
        out = tmp_path / "out"
        cli.main(["run", str(tiny(tmp_path, kinds=("dcp",))), "-o", str(out)])
        assert cli.main(["plot-data", str(out / "report.json")]) == 0
        for fig in ("results", "l1", "queries_budget"):
            lines = (out / f"{fig}_dcp.tsv").read_text().splitlines()
            assert lines[0] == "# x\ty\tseed"
            assert len(lines) == 2 and len(lines[1].split("\t")) == 3

    def test_regeneration_is_byte_identical(self, tmp_path):
        out = tmp_path / "out"
        cli.main(["run", str(tiny(tmp_path, "[0.0, 1.0]", "[0, 1]")), "-o", str(out)])
        a, b = tmp_path / "a", tmp_path / "b"
        cli.main(["plot-data", str(out / "report.json"), "-o", str(a)])
        cli.main(["plot-data", str(out / "report.json"), "-o", str(b)])
        names = sorted(os.listdir(a))
        assert names == sorted(os.listdir(b)) and len(names) == 6
        for n in names:
            assert (a / n).read_bytes() == (b / n).read_bytes()
        results = (a / "results_dcp.tsv").read_text().splitlines()
        assert len(results) == 1 + 2 * 2

    def test_round_trip_report(self, tmp_path):
        out = tmp_path / "out"
        cli.main(["run", str(tiny(tmp_path)), "-o", str(out)])
        report = load_report(out / "report.json")
        assert report.to_dict()["points"] == json.loads((out / "report.json").read_text())["points"]

    def test_empty_report(self, tmp_path):
        with pytest.raises(EmptyReport):
            emit_plot_data(ExperimentReport(config={}), tmp_path)
        p = tmp_path / "report.json"
        p.write_text(json.dumps(ExperimentReport(config={}).to_dict()))
        assert cli.main(["plot-data", str(p)]) == 2


class TestBenchAndCalibrate:
    def test_bench_rows(self, tmp_path, capsys):
        out = tmp_path / "out"
        p = tiny(tmp_path, kinds=("dcp", "rs", "am"))
        assert cli.main(["bench", str(p), "-o", str(out)]) == 0
        table = rows(out / "latency.csv")
        assert table[0] == LATENCY_HEADER
        assert [r[0] for r in table[1:]] == ["none", "dcp", "rs", "am"]
        assert all(int(r[1]) == 200 for r in table[1:]) and table[1][5] == "1.0000"
        assert "overhead" in capsys.readouterr().out

    def test_bench_too_few_queries(self, tmp_path):
        assert cli.main(["bench", str(tiny(tmp_path)), "--queries", "10"]) == 1

    def test_calibrate(self, tmp_path, capsys):
        p = tiny(tmp_path, "[0.0, 0.5, 1.0, 1.5]", kinds=("rs",))
        assert cli.main(["calibrate", str(p), "--defense", "rs", "--l1-budget", "2.0"]) == 0
        assert "rs: beta=1.5" in capsys.readouterr().out
        assert cli.main(["calibrate", str(p), "--defense", "rs", "--l1-budget", "1e-9"]) == 0
        assert "rs: beta=0 " in capsys.readouterr().out
        assert cli.main(["calibrate", str(p), "--defense", "xyz"]) == 1


def test_module_entry_point():
    import subprocess
    import sys

    res = subprocess.run([sys.executable, "-m", "posterior_shield", "--help"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "selftest" in res.stdout
