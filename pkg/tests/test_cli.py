import json
import subprocess
import sys

import numpy as np
import pytest

from bqo import acquisition, cli
from bqo.errors import ConfigurationError
from bqo.problems import table_problem
from bqo.selfcheck import check_h_monte_carlo, run_checks

FAST = {"adam": {"max_iters": 10, "restarts": 2}, "inference": {"mode": "map", "starts": 2},
        "recommend_iters": 10}


def write_config(tmp_path, **over):
    cfg = {"problem": {"name": "table"}, "algorithms": ["bqo_disc", "ei"], "budget": 3, "n0": 3,
           "replications": 2, "seed": 5, "out": str(tmp_path / "out"), "workers": 1,
           "settings": FAST}
    cfg.update(over)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def test_run_writes_traces_and_summary(tmp_path):
    path = write_config(tmp_path)
    assert cli.main(["run", str(path)]) == 0
    out = tmp_path / "out"
    names = sorted(p.name for p in out.glob("trace_*.csv") if ".timing" not in p.name)
    assert names == ["trace_bqo_disc_r0000.csv", "trace_bqo_disc_r0001.csv",
                     "trace_ei_r0000.csv", "trace_ei_r0001.csv"]
    lines = (out / "trace_bqo_disc_r0000.csv").read_text().splitlines()
    assert lines[0] == "replication,iteration,algorithm,x_0,w_0,y,xrec_0,true_G,max_a"
    assert len(lines) == 1 + 4
    assert [r["iteration"] for r in cli.read_trace(out / "trace_ei_r0001.csv")] == [0, 1, 2, 3]
    summary = (out / "summary.csv").read_text().splitlines()
    assert summary[0].split(",") == cli.SUMMARY_COLUMNS
    assert len(summary) == 1 + 2 * 4
    assert (out / "trace_ei_r0000.timing.csv").exists()
    assert json.loads((out / "config.json").read_text())["seed"] == 5


def test_zero_budget_single_row(tmp_path):
    path = write_config(tmp_path, budget=0, replications=1, algorithms=["bqo_disc"])
    assert cli.main(["run", str(path)]) == 0
    assert len(cli.read_trace(tmp_path / "out" / "trace_bqo_disc_r0000.csv")) == 1


def test_repeat_runs_are_byte_identical(tmp_path):
    path = write_config(tmp_path)
    cli.main(["run", str(path), "--out", str(tmp_path / "a")])
    cli.main(["run", str(path), "--out", str(tmp_path / "b")])
    for p in (tmp_path / "a").glob("trace_*.csv"):
        if ".timing" in p.name:
            continue
        assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()
    assert (tmp_path / "a" / "summary.csv").read_bytes() == (tmp_path / "b" / "summary.csv").read_bytes()


def test_seed_isolation(tmp_path):
    cfg = cli.validate_config(json.loads(write_config(tmp_path).read_text()))
    full = dict(cfg, out=str(tmp_path / "full"))
    cli.cmd_run(full, log=lambda *_: None)
    (tmp_path / "solo").mkdir()
    cli._job((dict(cfg, out=str(tmp_path / "solo")), "bqo_disc", 1, str(tmp_path / "solo")))
    name = cli.trace_name("bqo_disc", 1)
    assert (tmp_path / "full" / name).read_bytes() == (tmp_path / "solo" / name).read_bytes()
    assert cli.replication_seed(5, 0) != cli.replication_seed(5, 1)
    assert cli.replication_seed(5, 1) == cli.replication_seed(5, 1)


def test_csv_roundtrip_is_exact(tmp_path):
    from bqo.driver import Settings, run_bqo
    prob = table_problem()
    tr = run_bqo(prob, Settings(budget=2, n0=3, **FAST), np.random.default_rng(0))
    path = tmp_path / "t.csv"
    cli.write_trace(path, tr, prob)
    back = cli.read_trace(path)
    for row, parsed in zip(tr, back):
        assert parsed["iteration"] == row["iteration"] and parsed["algorithm"] == row["algorithm"]
        assert parsed["max_a"] == row["max_a"] and parsed["true_G"] == row["true_G"]
        assert parsed["xrec_0"] == row["x_rec"][0]
        if row["iteration"]:
            assert parsed["y"] == row["y"] and parsed["x_0"] == row["x"][0]
        else:
            assert np.isnan(parsed["y"]) and parsed["x_0"] is None


def test_fmt_round_trips_doubles(rng):
    for v in rng.normal(size=200) * 10.0 ** rng.integers(-300, 300, 200):
        assert float(cli.fmt(v)) == v
    assert cli.fmt(None) == "" and cli.fmt(float("nan")) == "nan"


@pytest.mark.parametrize("cfg, needle", [
    ({"problem": {"name": "table"}, "algorithms": ["sgd"]}, "algorithms"),
    ({"problem": {"name": "table"}, "replications": 0}, "replications"),
    ({"problem": {"name": "table"}, "budget": -1}, "budget"),
    ({"problem": {"name": "table"}, "seed": "x"}, "seed"),
    ({"problem": {"name": "table"}, "colour": 1}, "colour"),
    ({"algorithms": ["ei"]}, "problem"),
    ({"problem": {"name": "moon"}}, "moon"),
    ({"problem": {"name": "table"}, "settings": {"adam": {"step": -1}}}, "ADAM"),
    ({"problem": {"name": "table"}, "settings": {"warp": 1}}, "warp"),
])
def test_config_errors(cfg, needle):
    with pytest.raises(ConfigurationError, match=needle):
        cli.validate_config(cfg)


def test_bad_json_reports_line_and_column(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text('{\n  "problem": {"name": "table"},\n  "budget": 3,,\n}')
    assert cli.main(["run", str(path)]) == 1
    err = capsys.readouterr().err
    assert "bad.json:3:" in err


def test_flag_overrides(tmp_path):
    path = write_config(tmp_path)
    cfg = cli.load_config(path, {"seed": 9, "algorithms": "kg", "budget": 1, "problem": "analytic"})
    assert cfg["seed"] == 9 and cfg["algorithms"] == ["kg"] and cfg["budget"] == 1
    assert cfg["problem"]["name"] == "analytic"


def test_per_algorithm_settings_merge(tmp_path):
    cfg = cli.validate_config({"problem": {"name": "table"}, "algorithms": ["ei", "bqo_disc"],
                               "settings": {"adam": {"step": 0.1, "restarts": 3}},
                               "per_algorithm": {"ei": {"adam": {"restarts": 7}}}})
    s = cli.settings_for(cfg, "ei")
    assert s.adam.restarts == 7 and s.adam.step == 0.1
    assert cli.settings_for(cfg, "bqo_disc").adam.restarts == 3


def test_aborted_replication_sets_exit_code(tmp_path, monkeypatch):
    def broken(*args, **kwargs):
        raise RuntimeError("boom")

    monkeypatch.setattr(cli, "run_bqo", broken)
    cfg = cli.validate_config(json.loads(write_config(tmp_path, replications=1).read_text()))
    assert cli.cmd_run(cfg, log=lambda *_: None) == 2
    status = cli.load_status(cfg["out"])
    assert all(s["aborted"] == "1" and "boom" in s["message"] for s in status)


def test_plotdata(tmp_path):
    path = write_config(tmp_path)
    cli.main(["run", str(path)])
    assert cli.main(["plotdata", str(tmp_path / "out"), "--out", str(tmp_path / "plot.csv")]) == 0
    assert (tmp_path / "plot.csv").read_text() == (tmp_path / "out" / "summary.csv").read_text()
    (tmp_path / "empty").mkdir()
    assert cli.main(["plotdata", str(tmp_path / "empty")]) == 1


def test_summary_statistics():
    traces = {("ei", r): [{"iteration": 0, "true_G": v, "max_a": 2 * v}] for r, v in enumerate([1.0, 2.0, 4.0])}
    (rec,) = cli.summarize(traces)
    assert rec["n"] == 3 and rec["mean_true_G"] == pytest.approx(7 / 3)
    assert rec["se_true_G"] == pytest.approx(np.std([1, 2, 4], ddof=1) / np.sqrt(3))


def test_selfcheck_passes():
    lines = []
    assert run_checks(log=lines.append)
    assert len(lines) == 4 and all(line.startswith("[PASS]") for line in lines)


def test_selfcheck_catches_sign_error(monkeypatch):
    good = acquisition._f
    monkeypatch.setattr(acquisition, "_f", lambda z: good(-z))
    ok, _ = check_h_monte_carlo(np.random.default_rng(0))
    assert not ok
    lines = []
    assert not run_checks(log=lines.append)
    assert any(line.startswith("[FAIL] h exact") for line in lines)


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "bqo", "selfcheck"], capture_output=True, text=True,
                         timeout=300)
    assert res.returncode == 0 and res.stdout.count("[PASS]") == 4
