import csv
import hashlib
import json

import pytest

from spatialvr import cli
from spatialvr.sampler import SamplerInitError

FIT_ARGS = ["--t0", "20", "--chains", "2", "--iters", "300", "--warmup", "150", "--threads", "1", "--seed", "7"]


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_missing_data_file(tmp_path, capsys):
    code = cli.main(["fit", "--data", str(tmp_path / "nope.csv"), "--t0", "3", "--out", str(tmp_path / "o")])
    assert code == 2
    err = capsys.readouterr().err
    assert "nope.csv" in err and len(err.strip().splitlines()) == 1


def test_bad_arguments_exit_2(tmp_path):
    assert cli.main(["fit", "--out", str(tmp_path)]) == 2
    assert cli.main(["simulate", "--out", str(tmp_path)]) == 2


def test_unknown_method(tmp_path, toy_panel_csv):
    assert cli.main(["fit", "--data", str(toy_panel_csv), "--t0", "20", "--methods", "svr,xyz", "--out", str(tmp_path / "o")]) == 2


def test_bad_t0(tmp_path, toy_panel_csv):
    assert cli.main(["fit", "--data", str(toy_panel_csv), "--t0", "99", "--out", str(tmp_path / "o")]) == 2


def test_fit_outputs(tmp_path, toy_panel_csv):
    out = tmp_path / "fit"
    code = cli.main(["fit", "--data", str(toy_panel_csv), *FIT_ARGS, "--methods", "svr,sc,ols,sr", "--out", str(out)])
    assert code in (0, 3)
    rows = read_rows(out / "effects.csv")
    for m in ("svr", "sc", "ols", "sr"):
        assert sum(r["method"] == m for r in rows) == 5 * 5
    assert (out / "draws_svr.csv").is_file() and (out / "diagnostics_svr.json").is_file()
    assert not (out / "draws_sc.csv").exists()
    draws = read_rows(out / "draws_svr.csv")
    assert len(draws) == 2 * 150 and "B[0,0]" in draws[0] and "divergent" in draws[0]
    diag = json.loads((out / "diagnostics_svr.json").read_text())
    assert "rhat" in diag["summary"]["sigma_e"] and "ess" in diag["summary"]["sigma_e"]
    summary = json.loads((out / "summary.json").read_text())
    assert set(summary) == {"svr", "sc", "ols", "sr"}
    manifest = json.loads((out / "manifest.json").read_text())
    digest = hashlib.sha256(toy_panel_csv.read_bytes()).hexdigest()
    assert manifest["inputs"][str(toy_panel_csv)] == digest
    assert manifest["config"]["fit"]["iterations"] == 300 and manifest["finished"]


def test_fit_is_byte_identical(tmp_path, toy_panel_csv):
    outs = []
    for k in range(2):
        out = tmp_path / f"r{k}"
        cli.main(["fit", "--data", str(toy_panel_csv), *FIT_ARGS, "--methods", "svr,sc", "--out", str(out)])
        outs.append(out)
    for name in ("effects.csv", "draws_svr.csv", "summary.json"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_rhat_flag_exit_3(tmp_path, toy_panel_csv, capsys):
    args = ["--t0", "20", "--chains", "2", "--iters", "16", "--warmup", "8", "--threads", "1"]
    code = cli.main(["fit", "--data", str(toy_panel_csv), *args, "--out", str(tmp_path / "o")])
    assert code == 3
    assert "R-hat" in capsys.readouterr().err
    assert (tmp_path / "o" / "effects.csv").is_file()


def test_init_failure_exit_4(tmp_path, toy_panel_csv, monkeypatch):
    import spatialvr.fit

    def boom(*a, **k):
        raise SamplerInitError("no finite start")

    monkeypatch.setattr(spatialvr.fit, "fit_method", boom)
    assert cli.main(["fit", "--data", str(toy_panel_csv), *FIT_ARGS, "--out", str(tmp_path / "o")]) == 4


def test_hyperprior_config(tmp_path, toy_panel_csv):
    cfg = tmp_path / "pri.json"
    cfg.write_text('{"eta_e": 0.3}')
    out = tmp_path / "o"
    cli.main(["fit", "--data", str(toy_panel_csv), *FIT_ARGS, "--config", str(cfg), "--methods", "sc", "--out", str(out)])
    assert json.loads((out / "manifest.json").read_text())["config"]["priors"]["eta_e"] == 0.3
    cfg.write_text('{"nonsense": 1}')
    assert cli.main(["fit", "--data", str(toy_panel_csv), *FIT_ARGS, "--config", str(cfg), "--out", str(out)]) == 2


def test_meta_with_phases(tmp_path, toy_panel_csv):
    meta = tmp_path / "meta.json"
    meta.write_text(json.dumps({"t0": 20, "phases": {"early": [21, 22], "late": [23, 25]}}))
    out = tmp_path / "o"
    assert cli.main(["fit", "--data", str(toy_panel_csv), "--meta", str(meta), "--methods", "sc", "--out", str(out)]) == 0
    assert {r["phase"] for r in read_rows(out / "effects.csv")} == {"early", "late"}
    assert cli.main(["report", "--in", str(out)]) == 0
    table = read_rows(out / "report_fit.csv")
    assert [(r["phase"], r["row"]) for r in table] == [("early", "estimate"), ("early", "CI"), ("late", "estimate"),
                                                        ("late", "CI"), ("pre", "RMSPE")]


def grid_file(tmp_path, **extra):
    defn = {"t0": [10], "t_post": [5], "rho2_s": [0.04, 0.36], "error_mode": ["IID"], "L": 2, **extra}
    path = tmp_path / "grid.json"
    path.write_text(json.dumps(defn))
    return path


def test_simulate_deterministic_and_resumable(tmp_path):
    g = grid_file(tmp_path)
    base = ["simulate", "--grid", str(g), "--methods", "sc,sr", "--threads", "1", "--seed", "3"]
    assert cli.main([*base, "--out", str(tmp_path / "a")]) == 0
    assert cli.main([*base, "--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert a == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert cli.main([*base, "--stop-after", "1", "--out", str(tmp_path / "c")]) == 0
    assert not (tmp_path / "c" / "metrics.csv").exists()
    assert cli.main([*base, "--out", str(tmp_path / "c")]) == 0
    assert (tmp_path / "c" / "metrics.csv").read_bytes() == a


def test_simulate_invalid_grid(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"t0": [10]}')
    assert cli.main(["simulate", "--grid", str(bad), "--out", str(tmp_path / "o")]) == 2
    bad.write_text("not json")
    assert cli.main(["simulate", "--grid", str(bad), "--out", str(tmp_path / "o")]) == 2


@pytest.mark.filterwarnings("ignore::spatialvr.baselines.SaturatedFitWarning")
def test_full_grid_fast_methods(tmp_path):
    out = tmp_path / "pg"
    code = cli.main(["simulate", "--paper-grid", "--replications", "1", "--methods", "sc,sr,ols", "--threads", "1",
                     "--out", str(out)])
    assert code == 0
    rows = read_rows(out / "metrics.csv")
    assert len(rows) == 84 * 3
    assert cli.main(["report", "--in", str(out), "--format", "json"]) == 0
    table = json.loads((out / "report_simulation.json").read_text())
    assert {r["metric"] for r in table} == {"bias", "mse", "acp"}
    assert len(table) == 3 * 84 and set(table[0]) >= {"sc", "sr", "ols", "t0", "error_mode"}


def test_report_empty_dir(tmp_path):
    assert cli.main(["report", "--in", str(tmp_path)]) == 2
    assert cli.main(["report", "--in", str(tmp_path / "missing")]) == 2


def test_threads_env(monkeypatch):
    monkeypatch.setenv(cli.THREADS_ENV, "3")
    assert cli._threads(None) == 3
    assert cli._threads(2) == 2
    monkeypatch.setenv(cli.THREADS_ENV, "many")
    with pytest.raises(cli.InputError):
        cli._threads(None)
