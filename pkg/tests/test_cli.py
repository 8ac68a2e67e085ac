import csv
import hashlib
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from speccoh.grid import GridSpec, MultiField, write_field

SUBCOMMANDS = ["model-curve", "validate-model", "simulate", "periodogram", "coherence", "fit", "filter-experiment"]


def run(*args, cwd=None):
    return subprocess.run([sys.executable, "-m", "speccoh.cli", *map(str, args)],
                          capture_output=True, text=True, cwd=cwd)


def bivariate(path, nu=(1, 1), nu12=1.0, a=(1, 1), a12=1.0, rho=0.5):
    spec = {
        "kind": "matern_mv",
        "dim": 2,
        "marginals": [{"sigma2": 1, "nu": nu[0], "a": a[0]}, {"sigma2": 1, "nu": nu[1], "a": a[1]}],
        "cross": [{"i": 0, "j": 1, "rho": rho, "nu": nu12, "a": a12}],
    }
    path.write_text(json.dumps(spec))
    return path


def read_csv(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array(rows[1:], dtype=float)


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    bivariate(d / "m.json", a12=math.sqrt(2))
    r = run("simulate", "--model", d / "m.json", "--grid", "16,16", "--spacing", "0.25,0.25",
            "--reps", "3", "--seed", "5", "--out", d / "f.mfld")
    assert r.returncode == 0, r.stderr
    return d


@pytest.mark.parametrize("cmd", SUBCOMMANDS)
def test_help_exits_zero(cmd):
    r = run(cmd, "--help")
    assert r.returncode == 0
    assert "exit codes" in r.stdout


def test_unknown_flag_named(work):
    r = run("model-curve", "--model", work / "m.json", "--out", work / "x.csv", "--bogus-flag", "1")
    assert r.returncode == 2
    assert "--bogus-flag" in r.stderr


def test_model_curve_parsimonious_constant(tmp_path):
    m = bivariate(tmp_path / "p.json", nu=(0.8, 0.8), nu12=0.8, rho=-0.4)
    assert run("model-curve", "--model", m, "--radii", "0.001:1000:50", "--out", tmp_path / "c.csv").returncode == 0
    header, data = read_csv(tmp_path / "c.csv")
    assert header == ["r", "coh2", "abs_coh", "phase", "gain"]
    np.testing.assert_allclose(data[:, 2], 0.4, rtol=1e-12)


def test_model_curve_range_example_increasing(work):
    assert run("model-curve", "--model", work / "m.json", "--radii", "0.01:1000:100", "--out", work / "c.csv").returncode == 0
    _, data = read_csv(work / "c.csv")
    assert np.all(np.diff(data[:, 1]) > 0)
    assert data[-1, 1] == pytest.approx(1.0, rel=1e-4)


def test_model_curve_rho_zero(tmp_path):
    m = bivariate(tmp_path / "z.json", rho=0.0)
    assert run("model-curve", "--model", m, "--out", tmp_path / "c.csv").returncode == 0
    _, data = read_csv(tmp_path / "c.csv")
    assert np.all(data[:, 1] == 0) and np.all(data[:, 2] == 0)


def test_validate_model(tmp_path):
    ok = bivariate(tmp_path / "ok.json")
    r = run("validate-model", "--model", ok)
    assert r.returncode == 0 and r.stdout.strip() == "valid"
    bad = bivariate(tmp_path / "bad.json", nu12=0.9)
    r = run("validate-model", "--model", bad)
    assert r.returncode == 3
    assert "witness frequency" in r.stdout
    witness = [float(v) for v in r.stdout.split("witness frequency:")[1].split(",")]
    assert all(np.isfinite(witness))


def test_invalid_model_rejected_by_simulate(tmp_path):
    bad = bivariate(tmp_path / "bad.json", nu12=0.9)
    r = run("simulate", "--model", bad, "--grid", "4,4", "--out", tmp_path / "f.mfld")
    assert r.returncode == 3
    assert "witness frequency" in r.stderr
    assert not (tmp_path / "f.mfld").exists()


def test_bad_field_file(tmp_path):
    p = tmp_path / "junk.mfld"
    p.write_bytes(b"garbage\n")
    r = run("coherence", "--in", p, "--out", tmp_path / "c.csv")
    assert r.returncode == 2
    assert "speccoh:" in r.stderr


def test_missing_model_file(tmp_path):
    r = run("model-curve", "--model", tmp_path / "nope.json", "--out", tmp_path / "c.csv")
    assert r.returncode == 2


def test_simulate_deterministic(work):
    args = ["simulate", "--model", work / "m.json", "--grid", "8,8", "--reps", "2", "--seed", "11"]
    run(*args, "--out", work / "a.mfld")
    run(*args, "--out", work / "b.mfld")
    assert sha(work / "a.mfld") == sha(work / "b.mfld")


@pytest.mark.parametrize(
    "cmd",
    [
        ["periodogram", "--rep", "averaged"],
        ["periodogram", "--rep", "1", "--kernel", "none"],
        ["coherence", "--pair", "0,1"],
        ["coherence", "--lag", "1", "--average", "spectra", "--standardize"],
    ],
)
def test_field_subcommands_deterministic(work, cmd):
    outs = []
    for k in range(2):
        out = work / f"{cmd[0]}_{k}.csv"
        r = run(*cmd, "--in", work / "f.mfld", "--out", out)
        assert r.returncode == 0, r.stderr
        outs.append(sha(out))
    assert outs[0] == outs[1]


def test_self_pair_coherence_one(work):
    assert run("coherence", "--in", work / "f.mfld", "--pair", "1,1", "--out", work / "s.csv").returncode == 0
    header, data = read_csv(work / "s.csv")
    np.testing.assert_allclose(data[:, header.index("coh2")], 1.0, rtol=1e-12)


def test_lag_one_smoke(work):
    r = run("coherence", "--in", work / "f.mfld", "--lag", "1", "--out", work / "lag.csv")
    assert r.returncode == 0, r.stderr
    header, data = read_csv(work / "lag.csv")
    assert header == ["w1", "w2", "coh2", "abs_coh", "phase", "gain"]
    assert data.shape == (256, 6)
    coh2 = data[:, 2]
    assert np.all((coh2 >= 0) & (coh2 <= 1))


def test_shifted_copy_phase(tmp_path):
    rng = np.random.default_rng(0)
    g = GridSpec((32, 32), (1.0, 1.0))
    x = rng.standard_normal((20, 32, 32))
    # variable 0 is variable 1 moved by u = (3, 0) cells, so Z2(s) = Z1(s + u)
    vals = np.stack([np.roll(x, 3, axis=1), x], axis=1)
    write_field(MultiField(g, vals), tmp_path / "s.mfld")
    assert run("coherence", "--in", tmp_path / "s.mfld", "--out", tmp_path / "c.csv").returncode == 0
    _, data = read_csv(tmp_path / "c.csv")
    w = data[:, :2]
    r = np.hypot(w[:, 0], w[:, 1])
    low = np.argsort(r)[1:11]
    expected = np.angle(np.exp(-1j * 3 * w[low, 0]))
    err = np.angle(np.exp(1j * (data[low, 4] - expected)))
    assert np.all(np.abs(err) < 0.2)


def test_fit_marginal_and_cross(work):
    r = run("fit", "--in", work / "f.mfld", "--stage", "marginal", "--var", "0", "--out", work / "m0.json")
    assert r.returncode == 0, r.stderr
    res = json.loads((work / "m0.json").read_text())
    assert set(res["estimates"]) == {"sigma2", "nu", "a"}
    margs = json.dumps([{"sigma2": 1, "nu": 1, "a": 1}] * 2)
    r = run("fit", "--in", work / "f.mfld", "--stage", "cross", "--marginals", margs, "--out", work / "c.json")
    assert r.returncode == 0, r.stderr
    assert set(json.loads((work / "c.json").read_text())["estimates"]) == {"rho", "nu12", "a12"}


def test_fit_from_coherence_csv(work):
    run("coherence", "--in", work / "f.mfld", "--out", work / "coh.csv")
    margs = json.dumps([{"sigma2": 1, "nu": 1, "a": 1}] * 2)
    r = run("fit", "--in", work / "coh.csv", "--stage", "cross", "--marginals", margs, "--out", work / "cc.json")
    assert r.returncode == 0, r.stderr


def test_fit_lag_table(work):
    margs = json.dumps([{"sigma2": 1, "nu": 1, "a": 1}] * 2)
    r = run("fit", "--in", work / "f.mfld", "--stage", "cross", "--marginals", margs, "--lags", "0,1",
            "--out", work / "t.json")
    assert r.returncode == 0, r.stderr
    lines = r.stdout.strip().splitlines()
    assert lines[-4].split()[0] == "param"
    assert [ln.split()[0] for ln in lines[-3:]] == ["rho", "a12", "nu12"]


def test_fit_empty_band_is_numerical_failure(work):
    r = run("fit", "--in", work / "f.mfld", "--stage", "marginal", "--band", "500:600", "--out", work / "e.json")
    assert r.returncode == 4


def test_filter_experiment(tmp_path):
    m = bivariate(tmp_path / "m.json")
    out = tmp_path / "fe.csv"
    args = ["filter-experiment", "--model", m, "--grid", "16,16", "--spacing", "0.25,0.25", "--reps", "3", "--seed", "1"]
    assert run(*args, "--out", out).returncode == 0
    first = sha(out)
    with open(out) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["filter", "corr", "nreps"]
    assert [r[0] for r in rows[1:]] == ["lowpass", "highpass"]
    assert all(-1 <= float(r[1]) <= 1 and r[2] == "3" for r in rows[1:])
    run(*args, "--out", out)
    assert sha(out) == first


def test_thread_env_does_not_change_output(work, monkeypatch):
    outs = []
    for threads in ("1", "3"):
        monkeypatch.setenv("SPECCOH_THREADS", threads)
        out = work / f"t{threads}.csv"
        assert run("coherence", "--in", work / "f.mfld", "--out", out).returncode == 0
        outs.append(sha(out))
    assert outs[0] == outs[1]
