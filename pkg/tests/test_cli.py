import json
from pathlib import Path

import numpy as np
import pytest

from tilted_boot.cli import main, read_data
from tilted_boot.config import ConfigError, load_config, parse_config

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def write(tmp_path, doc, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


def base_doc():
    return json.loads((CONFIGS / "gauss3_square.json").read_text())


@pytest.mark.parametrize("name", ["gauss3_square", "gauss3_circle", "pois2_square", "verify_gauss3", "d1"])
def test_shipped_configs_parse(name):
    cfg = load_config(CONFIGS / f"{name}.json")
    assert cfg.spec.d >= 1


@pytest.mark.parametrize("patch", [
    {"bogus": 1},
    {"experiment": {"shape": "hexagon"}},
    {"experiment": {"nominal": 1.5}},
    {"experiment": {"methods": [{"kind": "ordinary"}]}},
    {"experiment": {"statistic": "em"}},
    {"experiment": {"unknown": 3}},
    {"seed": -1},
])
def test_bad_configs_rejected(patch):
    doc = base_doc()
    for k, v in patch.items():
        doc[k] = {**doc[k], **v} if isinstance(v, dict) and k in doc else v
    with pytest.raises(ConfigError):
        parse_config(doc)


def test_bad_model_rejected():
    doc = base_doc()
    doc["model"]["transition"] = [[0.5, 0.5], [0.5, 0.6]]
    with pytest.raises(ConfigError):
        parse_config(doc)


def test_exit_code_config_error(tmp_path, capsys):
    p = tmp_path / "broken.json"
    p.write_text("{\n  \"model\": \n}")
    assert main(["verify", "--config", str(p)]) == 2
    assert "line" in capsys.readouterr().err
    assert main(["verify", "--config", str(tmp_path / "missing.json")]) == 2


def small_verify(doc):
    doc["verify"] = {**doc.get("verify", {}), "empirical_n": 20000, "empirical_reps": 200, "lan_n": 500,
                     "lan_reps": 1000}
    return doc


def test_verify_passes_and_fault_injection_fails(tmp_path):
    doc = json.loads((CONFIGS / "verify_gauss3.json").read_text())
    doc["verify"].update(empirical_n=20000, empirical_reps=400, lan_n=500, lan_reps=2000)
    assert main(["verify", "--config", write(tmp_path, doc), "--out", str(tmp_path / "ok")]) == 0
    rep = json.loads((tmp_path / "ok" / "verify.json").read_text())
    assert all(c["passed"] for c in rep["checks"].values())
    doc["verify"]["corrupt_delta"] = [0, 0, 1.0]
    assert main(["verify", "--config", write(tmp_path, doc, "bad.json"), "--out", str(tmp_path / "bad")]) == 3
    rep = json.loads((tmp_path / "bad" / "verify.json").read_text())
    assert not rep["checks"]["poisson_residual"]["passed"]
    assert rep["checks"]["lan"]["passed"]


def test_verify_d1(tmp_path):
    assert main(["verify", "--config", str(CONFIGS / "d1.json"), "--out", str(tmp_path)]) == 0


def run_experiment(tmp_path, name, reps, extra=(), out="out"):
    out = tmp_path / out
    rc = main(["experiment", "--config", str(CONFIGS / f"{name}.json"), "--repetitions", str(reps),
               "--out", str(out), *extra])
    return rc, out


def test_experiment_outputs_and_determinism(tmp_path):
    rc, out = run_experiment(tmp_path, "gauss3_square", 3, ["--threads", "1"])
    assert rc == 0
    lines = (out / "report.csv").read_text().splitlines()
    assert lines[0] == "statistic,method,B,noncoverage,area_mean,area_sd,rel_eff,mc_se_noncoverage"
    assert len(lines) == 1 + 8
    prov = json.loads((out / "provenance.json").read_text())
    assert {"config", "seed", "input_sha256", "wall_time_s"} <= set(prov)
    plot = (out / "plot_data.csv").read_text().splitlines()
    assert sum(r.startswith("tilting_point") for r in plot) == 4
    assert {r.split(",")[1] for r in plot if r.startswith("region")} == {"0.5", "0.94999999999999996",
                                                                         "0.98999999999999999"}
    rc, out2 = run_experiment(tmp_path, "gauss3_square", 3, ["--threads", "2"], out="out2")
    assert (out / "report.csv").read_bytes() == (out2 / "report.csv").read_bytes()
    # resume from a truncated checkpoint reproduces the same report
    ck = (out / "checkpoint.jsonl").read_text().splitlines()
    out3 = tmp_path / "out3"
    out3.mkdir()
    (out3 / "checkpoint.jsonl").write_text(ck[0] + "\n" + ck[1][:20])
    rc, out3 = run_experiment(tmp_path, "gauss3_square", 3, ["--resume"], out="out3")
    assert (out / "report.csv").read_bytes() == (out3 / "report.csv").read_bytes()


def test_experiment_seed_changes_results(tmp_path):
    _, a = run_experiment(tmp_path, "gauss3_circle", 2, out="a")
    _, b = run_experiment(tmp_path, "gauss3_circle", 2, ["--seed", "99"], out="b")
    assert (a / "report.csv").read_bytes() != (b / "report.csv").read_bytes()


def test_poisson_experiment_rows(tmp_path):
    rc, out = run_experiment(tmp_path, "pois2_square", 1)
    assert rc == 0
    assert len((out / "report.csv").read_text().splitlines()) == 1 + 4


def test_fit_command(tmp_path):
    from tilted_boot.model import simulate
    from tilted_boot import rng as rngmod
    cfg = load_config(CONFIGS / "pois2_square.json")
    y = simulate(cfg.spec, 5000, rngmod.stream(60)).observations
    data = tmp_path / "y.txt"
    np.savetxt(data, y, fmt="%d")
    assert main(["fit", "--config", str(CONFIGS / "pois2_square.json"), "--data", str(data),
                 "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "fit.json").read_text())
    assert set(doc["theta"]) == {"p_01", "p_10", "lambda_0", "lambda_1"}
    assert abs(doc["theta"]["lambda_0"] - 0.251) < 0.05
    assert np.all(np.diff(doc["trace"]) >= -1e-6)
    assert np.array(doc["V"]).shape == (1, 1)


def test_fit_d1_is_sample_moments(tmp_path):
    y = np.random.default_rng(1).normal(size=(300, 2))
    data = tmp_path / "y.csv"
    np.savetxt(data, y, delimiter=",", fmt="%.17g")
    assert main(["fit", "--config", str(CONFIGS / "d1.json"), "--data", str(data), "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "fit.json").read_text())
    assert np.allclose([doc["theta"]["mu_0_0"], doc["theta"]["mu_0_1"]], y.mean(axis=0))
    assert np.allclose(doc["V"], np.cov(y.T, bias=True))


@pytest.mark.parametrize("text, msg", [("", "no data"), ("1 2\n3\n", ":2:"), ("1\nx\n", ":2:")])
def test_data_parse_errors(tmp_path, text, msg):
    p = tmp_path / "d.txt"
    p.write_text(text)
    with pytest.raises(ConfigError, match=msg):
        read_data(p)
    assert main(["fit", "--config", str(CONFIGS / "pois2_square.json"), "--data", str(p)]) == 2


def test_fit_width_mismatch(tmp_path):
    p = tmp_path / "d.txt"
    p.write_text("1 2\n3 4\n")
    assert main(["fit", "--config", str(CONFIGS / "pois2_square.json"), "--data", str(p),
                 "--out", str(tmp_path)]) == 2
