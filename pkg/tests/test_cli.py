import json

import numpy as np
import pandas as pd
import pytest

from snscore.cli import main
from snscore.scores import casewise_scores
from snscore.model import fit_ml
from snscore.simulate import SimCondition, default_truth, generate_dataset, sleepstudy_path

SLEEP = ["--data", str(sleepstudy_path()), "--cluster", "Subject", "--response", "Reaction",
         "--fixed", "Days", "--random", "Days"]


@pytest.fixture(scope="module")
def cache(tmp_path_factory):
    return str(tmp_path_factory.mktemp("nulls"))


def null_flags(cache):
    return ["--null-cache", cache, "--null-reps", "2000", "--grid-size", "500"]


def write_sim(path, d, seed=0, changed="beta0"):
    cond = SimCondition(24, d, changed)
    data = generate_dataset(cond, default_truth(), np.random.default_rng(seed))
    pd.DataFrame({"subject": data.cluster, "y": data.y, "days": data.X[:, 1],
                  "ability": data.aux}).to_csv(path, index=False)
    return ["--data", str(path), "--cluster", "subject", "--response", "y",
            "--fixed", "days", "--random", "days", "--aux", "ability"]


def test_fit_sleepstudy(tmp_path):
    out = tmp_path / "fit.json"
    assert main(["fit", *SLEEP, "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert report["fit"]["converged"] and len(report["fit"]["theta"]) == 6
    assert report["versions"]["snscore"] and report["config"]["cluster"] == "Subject"


def test_fit_deterministic(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    main(["fit", *SLEEP, "--out", str(a)])
    main(["fit", *SLEEP, "--out", str(b)])
    ja, jb = json.loads(a.read_text()), json.loads(b.read_text())
    ja["config"].pop("out"), jb["config"].pop("out")
    assert ja == jb


def test_empty_csv(tmp_path, capsys):
    empty = tmp_path / "e.csv"
    empty.write_text("")
    assert main(["fit", "--data", str(empty), "--cluster", "a", "--response", "b"]) == 1
    assert "empty" in capsys.readouterr().err


def test_missing_input_fails_fast(tmp_path):
    assert main(["fit", "--data", str(tmp_path / "nope.csv"), "--cluster", "a", "--response", "b"]) == 1
    assert main(["fit", *SLEEP, "--config", str(tmp_path / "nope.json")]) == 1


def test_usage_errors():
    assert main([]) == 1
    assert main(["fit", "--bogus"]) == 1
    assert main(["fit", "--cluster", "Subject"]) == 1


def test_non_convergence_exit_code():
    assert main(["fit", *SLEEP, "--max-iter", "1"]) == 3


def test_config_overrides_flags(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"response": "Reaction", "random": "", "max-iter": 500}))
    out = tmp_path / "fit.json"
    assert main(["fit", *SLEEP[:-2], "--random", "Days", "--response", "Days",
                 "--config", str(cfg), "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert len(report["fit"]["theta"]) == 4  # random intercept only
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"no_such_option": 1}))
    assert main(["fit", *SLEEP, "--config", str(bad)]) == 1


def test_sn_detects_intercept_change(tmp_path, cache):
    flags = write_sim(tmp_path / "d4.csv", 4.0, seed=1)
    out = tmp_path / "t.json"
    assert main(["test", *flags, "--params", "(Intercept)", "--stats", "sn", *null_flags(cache),
                 "--out", str(out)]) == 0
    (res,) = json.loads(out.read_text())["results"]
    assert res["reject"] and res["p_value"] < 0.05
    # the change sits at the auxiliary median, which is 0 for a standard normal
    assert abs(res["argmax_aux"]) < 0.5
    trace = pd.read_csv(tmp_path / "t.csv")
    assert list(trace.columns) == ["param", "statistic", "k", "aux", "value", "critical_value"]
    assert trace.value.max() == pytest.approx(res["value"])


def test_null_dataset_typical_run(tmp_path, cache):
    flags = write_sim(tmp_path / "d0.csv", 0.0, seed=2)
    out = tmp_path / "t.json"
    assert main(["test", *flags, "--params", "(Intercept),days", "--stats", "sn,cvm,dm,maxlm",
                 *null_flags(cache), "--out", str(out)]) == 0
    results = json.loads(out.read_text())["results"]
    assert len(results) == 8
    assert not any(r["reject"] for r in results if r["statistic"] == "sn")


def test_boundary_parameter_refused(tmp_path, cache, capsys):
    rng = np.random.default_rng(0)
    J, m = 20, 6
    e = rng.normal(size=(J, m))
    x = np.tile(np.arange(m), J)
    df = pd.DataFrame({"g": np.repeat(np.arange(J), m), "x": x, "aux": rng.normal(size=J * m),
                       "y": 1 + 2 * x + (e - e.mean(1, keepdims=True)).ravel()})
    df.to_csv(tmp_path / "b.csv", index=False)
    code = main(["test", "--data", str(tmp_path / "b.csv"), "--cluster", "g", "--response", "y",
                 "--fixed", "x", "--aux", "aux", "--params", "var((Intercept))", *null_flags(cache)])
    assert code == 2
    assert "boundary" in capsys.readouterr().err


def test_unknown_parameter(tmp_path, cache):
    assert main(["test", *SLEEP, "--aux", "Days", "--params", "nope", *null_flags(cache)]) == 1


def test_ordinal_sn(tmp_path, cache):
    out = tmp_path / "o.json"
    assert main(["test", *SLEEP, "--aux", "Days", "--params", "Days", "--stats", "sn_ord",
                 *null_flags(cache), "--out", str(out)]) == 0
    (res,) = json.loads(out.read_text())["results"]
    assert res["statistic"] == "sn_ord" and res["critical_value"] > 0


def test_critvals(tmp_path, cache):
    out = tmp_path / "c.json"
    assert main(["critvals", "--stats", "sn,cvm", *null_flags(cache), "--out", str(out)]) == 0
    cv = json.loads(out.read_text())["critical_values"]
    assert set(cv) == {"sn", "cvm"} and cv["sn"]["0.05"] > cv["cvm"]["0.05"]


def test_trace_from_scores(tmp_path, cache):
    data = generate_dataset(SimCondition(24, 4.0), default_truth(), np.random.default_rng(1))
    fit = fit_ml(data)
    S = casewise_scores(fit, data)
    S.to_csv(tmp_path / "s.csv")
    (tmp_path / "info.json").write_text(json.dumps(fit.info.tolist()))
    out = tmp_path / "trace.csv"
    assert main(["trace", "--scores", str(tmp_path / "s.csv"), "--params", "(Intercept)",
                 "--stats", "sn,dm", "--info", str(tmp_path / "info.json"), *null_flags(cache),
                 "--out", str(out)]) == 0
    df = pd.read_csv(out)
    assert set(df.statistic) == {"sn", "dm"}
    summary = json.loads(out.with_suffix(".json").read_text())["results"]
    assert summary[0]["reject"]
    assert main(["trace", "--scores", str(tmp_path / "s.csv"), "--stats", "dm", *null_flags(cache)]) == 1


def power_args(cache, tmp_path, name, jobs=1, ckpt=None):
    args = ["power", "--J", "24", "--d", "0,4", "--changed", "beta0", "--params", "beta0,beta1",
            "--stats", "sn,cvm", "--replications", "4", "--jobs", str(jobs), *null_flags(cache),
            "--out", str(tmp_path / name)]
    return args + (["--checkpoint-dir", str(ckpt)] if ckpt else [])


def test_power(tmp_path, cache):
    assert main(power_args(cache, tmp_path, "p1")) == 0
    assert main(power_args(cache, tmp_path, "p2", jobs=2, ckpt=tmp_path / "ck")) == 0
    a = json.loads((tmp_path / "p1.json").read_text())["power"]
    b = json.loads((tmp_path / "p2.json").read_text())["power"]
    assert a == b
    # resume from checkpoints
    assert main(power_args(cache, tmp_path, "p3", ckpt=tmp_path / "ck")) == 0
    assert json.loads((tmp_path / "p3.json").read_text())["power"] == a
    wide = pd.read_csv(tmp_path / "p1.csv")
    assert {"changed", "statistic", "n", "tested", "0.0", "4.0"} <= set(wide.columns)
