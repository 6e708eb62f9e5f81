import json

import polars as pl
import pytest

from messm.cli import format_report, main

MODEL = {"schema": 1, "model": {"kind": "ar_noise", "initial_state": {"mode": "fixed", "mean": [0.0], "cov": [[1.0]]}},
         "em": {"max_iter": 3, "tol": 1e-9}, "mcmc": {"n_draws": 10, "burn_in": 20, "thin": 1},
         "filter": {"n_particles": 100, "h": 0.1}}
PARAMS = {"mu": 0.5, "d1": 0.3, "d2": 0.4, "d3": 0.05}


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch):
    for name in ("MESSM_SEED", "MESSM_LOG_DIR", "MESSM_M_DRAWS", "MESSM_BURN_IN", "MESSM_THIN"):
        monkeypatch.delenv(name, raising=False)
    monkeypatch.setenv("MESSM_ENV_FILE", "/nonexistent/.env")


def _json(path, obj):
    path.write_text(json.dumps(obj), encoding="utf-8")
    return str(path)


@pytest.fixture
def workspace(tmp_path):
    sim = {**MODEL, "params": PARAMS,
           "simulation": {"m": 4, "T": 12, "seed": 3, "missing": {"kind": "interval", "tau": 4, "tau_star": 6}}}
    paths = {
        "sim": _json(tmp_path / "sim.json", sim),
        "model": _json(tmp_path / "model.json", MODEL),
        "init": _json(tmp_path / "init.json", {"schema": 1, "params": {**PARAMS, "d1": 0.6, "d2": 0.2}}),
    }
    assert main(["simulate", "--config", paths["sim"], "--out", str(tmp_path / "sim"), "--threads", "1"]) == 0
    paths["panel"] = str(tmp_path / "sim" / "panel.csv")
    paths["truth"] = str(tmp_path / "sim" / "truth.json")
    return tmp_path, paths


def test_simulate_writes_outputs_and_manifest(workspace):
    tmp_path, paths = workspace
    out = tmp_path / "sim"
    manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["status"] == "ok"
    assert set(manifest["outputs"]) == {"panel.csv", "truth.json"}
    panel = pl.read_csv(out / "panel.csv")
    assert panel.height == 4 * 12
    assert panel.filter(pl.col("t").is_in([4, 5]))["observed"].sum() == 0
    assert list((out / "logs").glob("messm_*.log"))


def test_simulate_is_byte_identical_on_rerun(workspace):
    tmp_path, paths = workspace
    assert main(["simulate", "--config", paths["sim"], "--out", str(tmp_path / "again"), "--threads", "1"]) == 0
    for name in ("panel.csv", "truth.json"):
        assert (tmp_path / "again" / name).read_bytes() == (tmp_path / "sim" / name).read_bytes()


def test_fit_em_with_known_theta_and_information(workspace):
    tmp_path, paths = workspace
    out = tmp_path / "fit"
    settings = _json(tmp_path / "settings.json", {"schema": 1, "em": {"max_iter": 2000, "tol": 1e-4}})
    code = main(["fit", "--method", "em", "--data", paths["panel"], "--model", paths["model"],
                 "--init", paths["init"], "--known-theta", paths["truth"], "--settings", settings,
                 "--information", "--dump-kalman", "--out", str(out), "--threads", "1"])
    assert code == 0
    result = json.loads((out / "fit_result.json").read_text(encoding="utf-8"))
    assert result["schema"] == 1 and result["converged"]
    assert result["params"]["mu"] == 0.5
    trace = pl.read_csv(out / "trace.csv")
    assert "loglik" in trace.columns
    information = json.loads((out / "information.json").read_text(encoding="utf-8"))
    assert information["names"] == ["d1", "d2"]
    kalman = json.loads((out / "kalman.json").read_text(encoding="utf-8"))
    assert len(kalman["members"]) == 4


def test_fit_score_unconverged_returns_three(workspace):
    tmp_path, paths = workspace
    out = tmp_path / "qn"
    code = main(["fit", "--method", "score", "--data", paths["panel"], "--model", paths["model"],
                 "--init", paths["init"], "--out", str(out), "--seed", "5", "--dump-draws", "--threads", "1"])
    assert code in (0, 3)
    manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["status"] == ("ok" if code == 0 else "unconverged")
    assert manifest["seed"] == 5
    assert pl.read_csv(out / "draws.csv").height == 10


def test_fit_em_monte_carlo_hits_max_iter(workspace):
    tmp_path, paths = workspace
    out = tmp_path / "mcem"
    code = main(["fit", "--data", paths["panel"], "--model", paths["model"], "--init", paths["init"],
                 "--out", str(out), "--threads", "1"])
    assert code == 3
    assert json.loads((out / "fit_result.json").read_text(encoding="utf-8"))["n_iter"] == 3


def test_filter_with_oracle_and_plugin(workspace):
    tmp_path, paths = workspace
    out = tmp_path / "filter"
    params = _json(tmp_path / "params.json", {"schema": 1, "params": PARAMS})
    code = main(["filter", "--data", paths["panel"], "--model", paths["model"], "--params", params,
                 "--oracle-theta", paths["truth"], "--plugin", "--out", str(out), "--threads", "2"])
    assert code == 0
    trajectory = pl.read_csv(out / "trajectory.csv")
    assert trajectory.height == 4 * 12
    mse = json.loads((out / "mse.json").read_text(encoding="utf-8"))
    assert {"oracle_kf", "plugin_kf", "ratio_median_oracle_kf"} <= set(mse)


def test_study_subcommand(tmp_path):
    study = {**MODEL, "study": {
        "grid": [[3, 8]], "replications": 2, "estimator": "em",
        "truth": PARAMS, "init": PARAMS, "em": {"max_iter": 2}, "mcmc": {"n_draws": 5, "burn_in": 10, "thin": 1},
    }}
    out = tmp_path / "study"
    assert main(["study", "--config", _json(tmp_path / "study.json", study), "--out", str(out), "--threads", "1"]) == 0
    table = pl.read_csv(out / "study_table.csv")
    assert table.height == 1 and "mu_Estimate" in table.columns
    assert pl.read_csv(out / "replications.csv").height == 2


def test_report_prints_table(tmp_path, capsys):
    fit = _json(tmp_path / "fit.json", {"schema": 1, "method": "em", "converged": True, "n_iter": 4,
                                        "params": {"mu": 0.31, "d1": 0.32}})
    info = _json(tmp_path / "info.json", {"schema": 1, "se": {"d1": 0.01}})
    assert main(["report", "--fit", fit, "--information", info]) == 0
    out = capsys.readouterr().out
    assert "0.31000" in out and "0.01000" in out


def test_format_report_without_standard_errors():
    texto = format_report({"method": "score", "params": {"d1": 1.0}}, {"se": None})
    assert "sin errores estándar" in texto


def test_malformed_csv_exits_with_two_and_row(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("individual,t,value,observed\n0,1,1.0,1\n0,2,oops,1\n", encoding="utf-8")
    code = main(["fit", "--data", str(bad), "--model", _json(tmp_path / "model.json", MODEL),
                 "--init", _json(tmp_path / "init.json", {"schema": 1, "params": PARAMS}),
                 "--out", str(tmp_path / "out"), "--threads", "1"])
    assert code == 2
    assert "fila 2" in capsys.readouterr().out
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["status"] == "failed"


def test_missing_file_exits_with_one(tmp_path):
    code = main(["simulate", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "out"),
                 "--threads", "1"])
    assert code == 1


def test_bad_schema_exits_with_two(tmp_path):
    config = _json(tmp_path / "sim.json", {"schema": 7, "model": {"kind": "ar_noise"}})
    assert main(["simulate", "--config", config, "--out", str(tmp_path / "out"), "--threads", "1"]) == 2


def test_model_dimension_mismatch_exits_with_two(workspace):
    tmp_path, paths = workspace
    swarm = _json(tmp_path / "swarm.json", {"schema": 1, "model": {
        "kind": "swarm", "tau": 0.5, "observation": [[1, 0, 0, 0], [0, 0, 1, 0]]}})
    code = main(["fit", "--data", paths["panel"], "--model", swarm, "--init", paths["init"],
                 "--out", str(tmp_path / "mismatch"), "--threads", "1"])
    assert code == 2
