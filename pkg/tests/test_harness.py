import csv
import json

import numpy as np
import pytest

from meue.analysis import kernel_basis
from meue.cli import main
from meue.dynamics import ConfigError, Trace, log_logit_choice
from meue.harness import InitSampler, make_scenario, run_scenario, sample_initial


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_samplers(rs3):
    z = sample_initial(InitSampler("zero_valuation", 3), rs3)
    assert all(np.all(s == 0) for s in z)
    a = sample_initial(InitSampler("uniform_p0", 50, seed=4), rs3, r=1.0)
    b = sample_initial(InitSampler("uniform_p0", 50, seed=4), rs3, r=1.0)
    np.testing.assert_array_equal(np.array(a), np.array(b))
    p = np.exp([log_logit_choice(s, 1.0, rs3) for s in a])
    np.testing.assert_allclose(p.sum(axis=1), 1.0)
    assert p.min() > 0
    # link valuations leave no component along the kernel directions
    basis = kernel_basis(rs3)
    for s in sample_initial(InitSampler("normal_v0", 20, seed=1, scale=3.0), rs3):
        assert np.max(np.abs(basis.apply(s))) < 1e-9
    s = sample_initial(InitSampler("normal_s0", 200, seed=2), rs3)
    assert abs(np.std(s) - 1.0) < 0.1


@pytest.mark.parametrize("kw", [{"kind": "nope"}, {"count": 0}])
def test_sampler_validation(kw):
    with pytest.raises(ConfigError):
        InitSampler(**kw)


def test_unknown_scenario_and_field():
    with pytest.raises(ConfigError):
        make_scenario("no-such-scenario")
    with pytest.raises(ConfigError):
        make_scenario("3n4l-stepsize", overrides={"colour": "red"})
    with pytest.raises(ConfigError):
        make_scenario("3n4l-stepsize", overrides={"grid": []})


def _small_histogram(tmp_path, workers):
    sc = make_scenario(
        "3n4l-histogram",
        out_dir=tmp_path / f"w{workers}",
        overrides={"sampler": [{"kind": "uniform_p0", "count": 12, "seed": 0}, {"kind": "normal_s0", "count": 12, "seed": 1}]},
    )
    assert run_scenario(sc, workers=workers) == 0
    return sc.out_dir


def test_small_batch_outputs(tmp_path):
    out = _small_histogram(tmp_path, 1)
    rows = _rows(out / "summary.csv")
    assert len(rows) == 24
    assert {r["sampler"] for r in rows} == {"uniform_p0", "normal_s0"}
    assert all(r["status"] == "ok" and r["converged"] == "True" for r in rows)
    assert len(list((out / "traces").glob("*.csv"))) == 24
    lam = np.array([float(r["lambda"]) for r in rows])
    assert np.all((lam >= 0) & (lam <= 0.3))
    meta = json.loads((out / "scenario.json").read_text())
    assert meta["runs"] == 24


def test_outputs_byte_identical_and_reparse(tmp_path):
    a = _small_histogram(tmp_path, 1)
    b = _small_histogram(tmp_path, 2)
    assert (a / "summary.csv").read_bytes() == (b / "summary.csv").read_bytes()
    for f in sorted((a / "traces").glob("*.csv")):
        assert f.read_bytes() == (b / "traces" / f.name).read_bytes()
        tr = Trace.from_csv(f)
        assert tr.records[0].day == 0 and len(tr) > 1


def test_failed_run_is_recorded(tmp_path):
    grid = [
        {"kind": "culo", "r": 1.0, "gap_tol": 1e-8, "max_days": 500, "cost_scale": "uniform"},
        # raw-unit Smith step far past its stability bound
        {"kind": "smith", "r": 1.0, "schedule": {"kind": "constant", "eta0": 5.0}, "max_days": 50},
    ]
    sc = make_scenario("3n4l-stepsize", out_dir=tmp_path, overrides={"grid": grid})
    assert run_scenario(sc) == 1
    rows = _rows(tmp_path / "summary.csv")
    assert [r["status"] for r in rows] == ["ok", "failed"]
    assert rows[1]["error"]


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["run", "no-such-scenario", "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text('{"grid": [{"kind": "culo", "r": -1}]}')
    assert main(["run", "3n4l-stepsize", "--config", str(bad), "--out", str(tmp_path)]) == 2
    good = tmp_path / "good.json"
    good.write_text(json.dumps({"grid": [{"kind": "culo", "r": 1.0, "gap_tol": 1e-10, "max_days": 200, "cost_scale": "uniform"}]}))
    assert main(["run", "3n4l-stepsize", "--config", str(good), "--out", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "summary.csv").is_file()


def test_cli_oracle_and_analyze(tmp_path, capsys):
    p0 = tmp_path / "p0.txt"
    p0.write_text("0.25 0.25 0.25 0.25\n")
    assert main(["oracle", "--net", "3n4l", "--p0", str(p0)]) == 0
    res = json.loads(capsys.readouterr().out)
    np.testing.assert_allclose(res["p_star"], [0.18, 0.28, 0.42, 0.12], atol=1e-6)
    assert main(["oracle", "--net", "3n4l", "--p0", str(p0), "--mode", "dual_ascent"]) == 0
    res = json.loads(capsys.readouterr().out)
    np.testing.assert_allclose(res["p_star"], [0.18, 0.28, 0.42, 0.12], atol=1e-6)
    state = tmp_path / "state.json"
    state.write_text(json.dumps({"network": "3n4l", "p": [0.18, 0.28, 0.42, 0.12]}))
    assert main(["analyze", "--state", str(state)]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["lambda"] == pytest.approx(0.12)
    assert max(abs(v) for v in rep["residuals"]) < 1e-12
    assert main(["oracle", "--net", str(tmp_path / "missing.tntp"), "--trips", str(p0), "--p0", str(p0)]) == 2


@pytest.mark.slow
def test_histogram_bands(tmp_path):
    sc = make_scenario("3n4l-histogram", out_dir=tmp_path)
    assert run_scenario(sc) == 0
    rows = _rows(tmp_path / "summary.csv")
    uni = np.array([float(r["lambda"]) for r in rows if r["sampler"] == "uniform_p0"])
    nrm = np.array([float(r["lambda"]) for r in rows if r["sampler"] == "normal_s0"])
    assert len(uni) == len(nrm) == 5000
    assert uni.min() <= 0.02 and uni.max() >= 0.28
    assert 0.09 <= nrm.mean() <= 0.15


def test_link_valuation_starts_reach_meue(tmp_path):
    # s0 in the range of lam^T satisfies proportionality, so every limit is the MEUE
    sc = make_scenario("3n4l-entropy", out_dir=tmp_path, overrides={"sampler": {"kind": "normal_v0", "count": 30, "seed": 5}})
    assert run_scenario(sc) == 0
    rows = _rows(tmp_path / "summary.csv")
    lam = np.array([float(r["lambda"]) for r in rows])
    np.testing.assert_allclose(lam, 0.12, atol=1e-6)
