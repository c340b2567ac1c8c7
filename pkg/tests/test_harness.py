import csv
import io
import json
import math

import pytest

from smmal import harness
from smmal.cli import main
from smmal.crossfit import FoldFitError
from smmal.glm import FitError
from smmal.harness import (
    ConfigError, ExperimentConfig, load_config, metrics_csv_text, read_jsonl, replication_seeds,
    run_replication, run_study, summarize,
)

SMALL = dict(scenario="lowdim", N=600, n_labels=150, surrogate_grid=((0.95, 0.95),), K=5,
             replications=3, base_seed=11)


def fake_record(rep, points, truth=0.0, cell=0, half_width=None, n=100):
    methods = {}
    for m, x in points.items():
        if x is None:
            methods[m] = {"error": "FitError: boom"}
            continue
        h = 0.0 if half_width is None else half_width
        methods[m] = {"point": x, "variance_scaled": 0.0 if half_width is None else n * (h / 1.96) ** 2,
                      "ci": [x - h, x + h], "n": n, "N": 1000, "method": m, "seed": rep}
    return {"cell": cell, "rep": rep, "scenario": "lowdim", "auc_a": 0.95, "auc_y": 0.95,
            "truth": truth, "methods": methods}


def row_for(rows, method):
    (r,) = [r for r in rows if r.method == method]
    return r


# ------------------------------------------------------------ summaries

def test_degenerate_records_give_zero_bias_and_full_coverage():
    recs = [fake_record(i, {"smmal_spline": 0.3, "dml_supervised": 0.3}, truth=0.3) for i in range(5)]
    r = row_for(summarize(recs), "smmal_spline")
    assert r.bias == 0.0 and r.coverage == 1.0 and r.sd == 0.0 and r.avg_se == 0.0


def test_two_point_sample_sd():
    d = 0.125
    recs = [fake_record(0, {"dml_supervised": 1.0 - d}, truth=1.0),
            fake_record(1, {"dml_supervised": 1.0 + d}, truth=1.0)]
    r = row_for(summarize(recs), "dml_supervised")
    assert r.bias == 0.0
    assert r.sd == pytest.approx(d * math.sqrt(2), rel=1e-15)
    assert r.rel_eff == 1.0 and not r.insufficient


def test_relative_efficiency_variance_ratio():
    recs = [fake_record(0, {"smmal_spline": -0.1, "dml_supervised": -0.2}),
            fake_record(1, {"smmal_spline": 0.1, "dml_supervised": 0.2})]
    rows = summarize(recs)
    assert row_for(rows, "smmal_spline").rel_eff == pytest.approx(4.0, rel=1e-14)
    assert row_for(rows, "dml_supervised").rel_eff == 1.0


def test_coverage_counts_intervals_containing_truth():
    recs = [fake_record(i, {"dml_supervised": x}, half_width=0.1)
            for i, x in enumerate([0.05, -0.05, 0.2, 0.0])]
    r = row_for(summarize(recs), "dml_supervised")
    assert r.coverage == 0.75
    assert r.avg_se == pytest.approx(0.1 / 1.96)


def test_failures_are_excluded_and_flag_insufficient_cells():
    recs = [fake_record(0, {"smmal_spline": 0.1, "dml_supervised": None}),
            fake_record(1, {"smmal_spline": -0.1, "dml_supervised": 0.0}),
            fake_record(2, {"smmal_spline": 0.0, "dml_supervised": None})]
    rows = summarize(recs)
    ssl, dml = row_for(rows, "smmal_spline"), row_for(rows, "dml_supervised")
    assert ssl.n_success == 3 and dml.n_success == 1
    assert dml.insufficient and math.isnan(dml.sd) and math.isnan(ssl.rel_eff)
    assert not ssl.insufficient and ssl.replications == 3


def test_summary_without_benchmark_has_nan_efficiency():
    recs = [fake_record(i, {"smmal_dr": 0.1 * i}) for i in range(3)]
    assert math.isnan(summarize(recs)[0].rel_eff)


# ------------------------------------------------------------ configuration

def test_config_validation():
    with pytest.raises(ConfigError):
        ExperimentConfig(replications=0)
    with pytest.raises(ConfigError):
        ExperimentConfig(methods=())
    with pytest.raises(ConfigError):
        ExperimentConfig(methods=("smmal_magic",))
    with pytest.raises(ConfigError):
        ExperimentConfig(scenario="highdim", p=10, methods=("smmal_spline",))
    with pytest.raises(ConfigError):
        ExperimentConfig(surrogate_grid=((0.85, 0.95),))
    with pytest.raises(ConfigError):
        ExperimentConfig(K=2)
    with pytest.raises(ConfigError):
        ExperimentConfig(N=100, n_labels=100)
    with pytest.raises(ConfigError):
        ExperimentConfig(scenario="highdim", p=10, model_flags=("wrong_both",), methods=("smmal_dr",))


def test_highdim_cells_cross_flags_and_grid():
    cfg = ExperimentConfig(scenario="highdim", p=10, methods=("smmal_dr",),
                           model_flags=("correct_both", "wrong_or"),
                           surrogate_grid=((0.8, 0.8), (0.99, 0.95)))
    assert cfg.cells == [("correct_both", (0.8, 0.8)), ("correct_both", (0.99, 0.95)),
                         ("wrong_or", (0.8, 0.8)), ("wrong_or", (0.99, 0.95))]
    assert cfg.cell_label(3) == "highdim/wrong_or"


def test_load_config_round_trip(tmp_path):
    path = tmp_path / "s.cfg"
    path.write_text("[study]\nscenario = lowdim\nN = 800\nn_labels = 100\n"
                    "surrogate_grid = 0.8:0.8, 0.99:0.99\nmethods = smmal_spline\n"
                    "replications = 4\nbase_seed = 3\noutput = out\n")
    cfg = load_config(path)
    assert cfg.N == 800 and cfg.surrogate_grid == ((0.8, 0.8), (0.99, 0.99))
    assert cfg.methods == ("smmal_spline",) and cfg.replications == 4
    assert cfg.output == str(tmp_path / "out")


@pytest.mark.parametrize("body", [
    "[study]\nreplicates = 3\n",
    "[other]\nN = 10\n",
    "[study]\nN = many\n",
    "[study]\nsurrogate_grid = 0.95\n",
    "not an ini file",
])
def test_malformed_config_is_rejected(tmp_path, body):
    path = tmp_path / "bad.cfg"
    path.write_text(body)
    with pytest.raises(ConfigError):
        load_config(path)


def test_replication_seeds_are_stable_and_distinct():
    assert replication_seeds(5, 1, 2) == replication_seeds(5, 1, 2)
    seen = {replication_seeds(5, c, r) for c in range(3) for r in range(50)}
    assert len(seen) == 150


# ------------------------------------------------------------ replications

def test_replication_is_deterministic():
    cfg = ExperimentConfig(**SMALL)
    a = run_replication(cfg, 0, 1)
    b = run_replication(cfg, 0, 1)
    strip = lambda r: {m: {k: v for k, v in rec.items() if k != "elapsed"}
                       for m, rec in r["methods"].items()}
    assert strip(a) == strip(b) and a["truth"] == b["truth"] == 0.0
    assert set(a["methods"]) == {"smmal_spline", "dml_supervised"}


def test_method_gating():
    cfg = ExperimentConfig(**{**SMALL, "methods": ("dml_supervised",)})
    rec = run_replication(cfg, 0, 0)
    assert list(rec["methods"]) == ["dml_supervised"]
    rows = summarize([rec, run_replication(cfg, 0, 1)], methods=cfg.methods)
    assert [r.method for r in rows] == ["dml_supervised"]


def test_failing_method_is_isolated(monkeypatch):
    real = harness.crossfit_lowdim
    calls = {"n": 0}

    def flaky(*args, **kw):
        calls["n"] += 1
        if calls["n"] == 2:
            raise FoldFitError("fold 3, model ps", FitError("no convergence"))
        return real(*args, **kw)

    monkeypatch.setattr(harness, "crossfit_lowdim", flaky)
    res = run_study(ExperimentConfig(**SMALL), workers=1)
    assert "error" in res.records[1]["methods"]["smmal_spline"]
    assert "error" not in res.records[1]["methods"]["dml_supervised"]
    rows = {r.method: r for r in res.metrics}
    assert rows["smmal_spline"].n_success == 2 and rows["dml_supervised"].n_success == 3


def test_generator_failure_marks_replication(monkeypatch):
    def broken(*args, **kw):
        raise RuntimeError("generator exploded")

    monkeypatch.setattr(harness, "generate", broken)
    rec = run_replication(ExperimentConfig(**SMALL), 0, 0)
    assert "generator exploded" in rec["failed"] and rec["methods"] == {}


def test_study_outputs_recompute_bit_exactly(tmp_path):
    cfg = ExperimentConfig(**SMALL)
    res = run_study(cfg, workers=1, output=tmp_path)
    records = read_jsonl(res.paths["replications"])
    assert len(records) == 3
    again = summarize(records, methods=cfg.methods)
    assert metrics_csv_text(again) == res.paths["metrics"].read_text()
    rows = list(csv.DictReader(io.StringIO(res.paths["metrics"].read_text())))
    assert [r["method"] for r in rows] == ["smmal_spline", "dml_supervised"]
    assert res.paths["long"].exists()


def test_parallel_study_matches_serial(tmp_path):
    cfg = ExperimentConfig(**{**SMALL, "replications": 2})
    a = run_study(cfg, workers=1)
    b = run_study(cfg, workers=2)
    assert metrics_csv_text(a.metrics) == metrics_csv_text(b.metrics)


# ------------------------------------------------------------ command line

def test_cli_config_error_exits_2(tmp_path, capsys):
    path = tmp_path / "bad.cfg"
    path.write_text("[study]\nreplications = 0\n")
    assert main(["study", "--config", str(path)]) == 2
    diag = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert diag["error"] == "config"


def test_cli_missing_data_file_exits_1(tmp_path, capsys):
    code = main(["estimate", "--method", "smmal_spline", "--data", str(tmp_path / "none.csv")])
    assert code == 1
    assert json.loads(capsys.readouterr().err)["error"] == "runtime"


def test_cli_simulate_then_estimate(tmp_path, capsys):
    data = tmp_path / "f.csv"
    assert main(["simulate", "--N", "800", "--n", "200", "--seed", "3", "--out", str(data)]) == 0
    capsys.readouterr()
    assert main(["estimate", "--method", "smmal_spline", "--data", str(data), "--K", "10",
                 "--alpha", "0.05", "--seed", "7"]) == 0
    rec = json.loads(capsys.readouterr().out)
    assert rec["method"] == "smmal_spline" and rec["seed"] == 7
    assert rec["n"] == 200 and rec["N"] == 800
    assert rec["ci"][0] <= rec["point"] <= rec["ci"][1] and rec["variance_scaled"] > 0


def test_cli_estimate_dr_benchmark(tmp_path, capsys):
    data = tmp_path / "h.csv"
    assert main(["simulate", "--scenario", "highdim", "--p", "5", "--N", "600", "--n", "200",
                 "--out", str(data)]) == 0
    capsys.readouterr()
    assert main(["estimate", "--method", "dr_supervised", "--data", str(data), "--K", "4"]) == 0
    assert json.loads(capsys.readouterr().out)["n"] == 200


def test_cli_study_on_small_config(tmp_path, capsys):
    cfg = tmp_path / "small.cfg"
    cfg.write_text("[study]\nscenario = lowdim\nN = 600\nn_labels = 150\n"
                   "surrogate_grid = 0.8:0.8, 0.99:0.99\nmethods = smmal_spline, dml_supervised\n"
                   "replications = 3\nK = 5\n")
    assert main(["study", "--config", str(cfg), "--output", str(tmp_path / "o"), "--workers", "1"]) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert len(rows) == 4
    assert {(r["method"], r["auc_a"]) for r in rows} == {
        (m, a) for m in ("smmal_spline", "dml_supervised") for a in ("0.8", "0.99")}
    assert all(r["n_success"] == "3" for r in rows)


def test_cli_validate_quick(capsys):
    assert main(["validate", "--quick"]) == 0
    out = capsys.readouterr().out
    assert "[FAIL]" not in out and out.count("[PASS]") >= 5
