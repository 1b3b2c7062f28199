import json
import subprocess
import sys

import pytest

from bpre import __version__
from bpre.cli import ConfigError, main, parse_config

MODEL_L = {"env_law": {"kind": "LogNormal", "mu": -0.15, "s2": 0.25}}
MODEL_LSTAR = {"env_law": {"kind": "LogNormal", "mu": -0.5, "s2": 0.5}}


@pytest.fixture(autouse=True)
def _no_env_workers(monkeypatch):
    monkeypatch.delenv("BPRE_WORKERS", raising=False)


def write(tmp_path, doc, name="run.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


def body(path):
    return [line for line in path.read_text().splitlines() if not line.startswith("#")]


def test_round_trip_canonical():
    cfg = parse_config(json.dumps({"model": MODEL_L, "rate": {"alpha_grid": [2.0]}}))
    again = parse_config(cfg.canonical())
    assert again.canonical() == cfg.canonical()
    assert cfg.seed == 0 and cfg.model["offspring"] == "poisson"


def test_schema_errors():
    bad = {"model": {"env_law": {"kind": "TwoPoint", "weights": [0.7, 0.2], "means": [0.3, 1.9]}}}
    with pytest.raises(ConfigError, match="weights must sum to 1"):
        parse_config(json.dumps(bad))
    with pytest.raises(ConfigError, match="unexpected"):
        parse_config(json.dumps({"model": MODEL_L, "colour": "red"}))
    with pytest.raises(ConfigError, match="model"):
        parse_config(json.dumps({"model": {"env_law": {"kind": "LogNormal", "mu": 0, "s2": -1}}}))
    with pytest.raises(ConfigError, match="JSON"):
        parse_config("{not json")
    with pytest.raises(ConfigError, match="n_grid"):
        parse_config(json.dumps({"model": MODEL_L, "estimate": {"target": "Z", "rho": 0.35}}))
    with pytest.raises(ConfigError, match="unknown keys"):
        parse_config(json.dumps({"model": MODEL_L, "experiment": {"name": "thm21", "params": {"x": 1}}}))


def test_rate_command(tmp_path, capsys):
    cfg = write(tmp_path, {"model": MODEL_L, "rate": {"alpha_grid": [2.0]}})
    assert main(["rate", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    out = capsys.readouterr().out
    lines = out.splitlines()
    assert lines[0] == f"# model=LogNormal(mu=-0.15;s2=0.25)/poisson, seed=0, workers=1, version={__version__}"
    assert lines[1] == "alpha,lambda,Lambda,rho,sigma,alpha_bar,rate_n,alpha0,rho0,sigma0"
    vals = [float(x) for x in lines[2].split(",")]
    assert vals[3] == pytest.approx(0.35) and vals[7] == pytest.approx(1.2)


def test_missing_output_dir_created_and_no_clobber(tmp_path):
    cfg = write(tmp_path, {"model": MODEL_L})
    out = tmp_path / "deep" / "dir"
    assert main(["rate", "--config", cfg, "--out", str(out)]) == 0
    assert (out / "rate_0.csv").exists()
    assert main(["rate", "--config", cfg, "--out", str(out)]) == 1
    assert main(["rate", "--config", cfg, "--out", str(out), "--force"]) == 0
    # a second command into the same directory gets its own file
    assert main(["simulate", "--config", cfg, "--out", str(out)]) == 0
    assert (out / "trajectories_0.csv").exists()


def test_simulate_schema(tmp_path):
    cfg = write(tmp_path, {"model": MODEL_L, "simulate": {"n": 5, "paths": 3, "tilt_alpha": 2.0}, "seed": 4})
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path)]) == 0
    rows = body(tmp_path / "trajectories_4.csv")
    assert rows[0] == "path_id,k,Z_k,log_A_k,S_k,W_k,weight_k"
    assert len(rows) == 1 + 3 * 6


def test_estimate_regime_exit_code(tmp_path):
    cfg = write(tmp_path, {"model": MODEL_L, "estimate": {"target": "Z", "alpha": 0.9, "n_grid": [10]}})
    assert main(["estimate", "--config", cfg, "--out", str(tmp_path)]) == 2


def test_missing_section_and_file(tmp_path):
    cfg = write(tmp_path, {"model": MODEL_L})
    assert main(["estimate", "--config", cfg, "--out", str(tmp_path)]) == 1
    assert main(["rate", "--config", str(tmp_path / "nope.json")]) == 1


def test_estimate_deterministic_across_runs_and_workers(tmp_path):
    doc = {"model": MODEL_L, "estimate": {"target": "Z", "rho": 0.35, "n_grid": [10, 15], "N": 60_000}}
    cfg = write(tmp_path, doc)
    assert main(["estimate", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    assert main(["estimate", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    assert main(["estimate", "--config", cfg, "--out", str(tmp_path / "c"), "--workers", "2"]) == 0
    a = (tmp_path / "a" / "estimate_Z_0.csv").read_bytes()
    assert a == (tmp_path / "b" / "estimate_Z_0.csv").read_bytes()
    assert body(tmp_path / "a" / "estimate_Z_0.csv") == body(tmp_path / "c" / "estimate_Z_0.csv")
    rows = body(tmp_path / "a" / "estimate_Z_0.csv")
    assert rows[0] == "target,rho_or_alpha,n,t,method,value,stderr,ess,hits,n_samples,truncated_mass,seed"
    assert len(rows) == 3


def test_estimate_passage(tmp_path):
    doc = {"model": MODEL_LSTAR, "estimate": {"target": "passage_W", "log_t_grid": [4.0], "N": 5_000}}
    cfg = write(tmp_path, doc)
    assert main(["estimate", "--config", cfg, "--out", str(tmp_path), "--seed", "9"]) == 0
    row = body(tmp_path / "estimate_passage_W_9.csv")[1].split(",")
    assert row[0] == "passage_W" and float(row[1]) == pytest.approx(2.0) and row[-1] == "9"


def test_experiment_identities_exit_zero(tmp_path):
    doc = {"model": MODEL_LSTAR, "experiment": {"name": "identities", "params": {"n_paths": 300}}}
    cfg = write(tmp_path, doc)
    assert main(["experiment", "--config", cfg, "--out", str(tmp_path)]) == 0
    verdict = (tmp_path / "verdict_identities_0.txt").read_text()
    assert verdict.startswith("identities,pass,") and verdict.endswith("\n")
    lines = (tmp_path / "report_identities_0.csv").read_text().splitlines()
    assert lines[0].startswith("# model=") and lines[1].startswith("# config=")
    assert lines[2] == "key,point,measured,predicted,stderr,ratio,rule,tolerance,pass"


def test_experiment_thm24_zero_tolerance_exit_three(tmp_path):
    doc = {
        "model": MODEL_LSTAR,
        "experiment": {"name": "thm24", "params": {"log_t_grid": [6], "N": 4_000}},
        "tolerances": {"thm24": 0},
    }
    cfg = write(tmp_path, doc)
    assert main(["experiment", "--config", cfg, "--out", str(tmp_path)]) == 3
    assert (tmp_path / "verdict_thm24_0.txt").read_text().startswith("thm24,fail,")


def test_module_entry_point(tmp_path):
    cfg = write(tmp_path, {"model": MODEL_L})
    res = subprocess.run([sys.executable, "-m", "bpre", "rate", "--config", cfg, "--out", str(tmp_path)],
                         capture_output=True, text=True)
    assert res.returncode == 0
    assert "alpha,lambda" in res.stdout


def test_shipped_configs_parse():
    from pathlib import Path

    files = sorted((Path(__file__).parent.parent / "configs").glob("*.json"))
    assert len(files) >= 8
    for f in files:
        parse_config(f.read_text())
