import csv
import json
import math
import os

import pytest

import volfluct
from volfluct.cli import main


def _cfg(tmp_path, name="cfg.json", **kw):
    path = tmp_path / name
    path.write_text(json.dumps(kw))
    return str(path)


def _run(args):
    return main(list(args))


def _read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return rows


def _read_bytes(out, names):
    return {n: (out / n).read_bytes() for n in names}


# ---------------------------------------------------------------------------
# limit
# ---------------------------------------------------------------------------


def test_limit_additive_unit_exact(tmp_path):
    cfg = _cfg(tmp_path, preset="additive-unit", x0=0.0, T=1.0, N=4)
    out = tmp_path / "o"
    assert _run(["limit", "--config", cfg, "--out", str(out),
                 "--assert"]) == 0
    lim = _read_csv(out / "limit.csv")
    assert [r["t"] for r in lim] == ["0", "0.25", "0.5", "0.75", "1"]
    assert all(float(r["x"]) == 0.0 for r in lim)
    var = _read_csv(out / "variance.csv")
    assert float(var[0]["var_y"]) == 0.0
    assert [float(r["var_y"]) for r in var] == [0.0, 0.25, 0.5, 0.75, 1.0]


def test_limit_fbm_variance(tmp_path):
    cfg = _cfg(tmp_path, preset="fbm-additive", H=0.7, x0=0.0, N=512)
    out = tmp_path / "o"
    assert _run(["limit", "--config", cfg, "--out", str(out)]) == 0
    var = _read_csv(out / "variance.csv")
    assert abs(float(var[-1]["var_y"]) - 1.0) < 2e-2


def test_limit_rerun_is_byte_identical(tmp_path):
    cfg = _cfg(tmp_path, preset="trig", N=32)
    out = tmp_path / "o"
    names = ("limit.csv", "variance.csv", "manifest.json")
    assert _run(["limit", "--config", cfg, "--out", str(out)]) == 0
    first = _read_bytes(out, names)
    assert _run(["limit", "--config", cfg, "--out", str(out)]) == 0
    assert _read_bytes(out, names) == first


def test_manifest_contents(tmp_path):
    cfg = _cfg(tmp_path, preset="additive-unit", x0=0.0, N=4)
    out = tmp_path / "o"
    assert _run(["limit", "--config", cfg, "--out", str(out)]) == 0
    doc = json.loads((out / "manifest.json").read_text())
    assert doc["version"] == volfluct.__version__
    assert doc["command"] == "limit"
    assert doc["config"]["preset"] == "additive-unit"
    assert doc["config"]["N"] == 4
    assert doc["config"]["out_dir"] == str(out)


# ---------------------------------------------------------------------------
# config rejection
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("doc", [
    {"bogus_key": 1},
    {"N": 8192},
    {"M": 10},
    {"T": -1.0},
    {"epsilons": [0.2, 0.4]},
    {"epsilons": [1.5]},
    {"epsilons": []},
    {"preset": "fbm-additive"},              # H missing
    {"preset": "trig", "H": 0.7},            # H forbidden
    {"preset": "fbm-additive", "H": 0.7, "params": {"H": 0.7}},
    {"preset": "no-such-preset"},
    {"test_functions": ["gauss"]},
    {"seed": -3},
])
def test_bad_configs_exit_2(tmp_path, capsys, doc):
    cfg = _cfg(tmp_path, **doc)
    assert _run(["limit", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "config error" in capsys.readouterr().err


def test_missing_and_malformed_config_files(tmp_path, capsys):
    assert _run(["limit", "--config", str(tmp_path / "nope.json")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert _run(["limit", "--config", str(bad)]) == 2
    err = capsys.readouterr().err
    assert "config error" in err and "JSON" in err


def test_vf_threads_validation(tmp_path, capsys, monkeypatch):
    cfg = _cfg(tmp_path, N=4, x0=0.0)
    monkeypatch.setenv("VF_THREADS", "abc")
    assert _run(["limit", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "VF_THREADS" in capsys.readouterr().err
    monkeypatch.setenv("VF_THREADS", "0")
    assert _run(["limit", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


# ---------------------------------------------------------------------------
# rate-scan
# ---------------------------------------------------------------------------


def test_rate_scan_exact_zero_distances(tmp_path):
    # x0 = 0 and dyadic epsilons make the coupled Xt and Y bitwise equal,
    # so every distance is exactly zero and the fits are unresolvable
    cfg = _cfg(tmp_path, preset="additive-unit", x0=0.0, N=16, M=200,
               epsilons=[0.5, 0.25, 0.125])
    out = tmp_path / "o"
    assert _run(["rate-scan", "--config", cfg, "--out", str(out),
                 "--assert"]) == 0
    for row in _read_csv(out / "distances.csv"):
        assert float(row["kolmogorov"]) == 0.0
        assert float(row["tv_histogram"]) == 0.0
    status = {r["metric"]: r["status"] for r in _read_csv(out / "ratefit.csv")}
    assert status["rms_x_gap"] == "ok"
    assert status["rms_xt_y"] == "below resolution"
    assert status["rms_second"] == "below resolution"
    assert status["kolmogorov"] == "below resolution"
    fit = [r for r in _read_csv(out / "ratefit.csv")
           if r["metric"] == "rms_x_gap"][0]
    assert float(fit["slope"]) == pytest.approx(1.0, rel=1e-9)


def test_rate_scan_requires_three_epsilons(tmp_path, capsys):
    cfg = _cfg(tmp_path, epsilons=[0.4, 0.2], N=8, M=100)
    assert _run(["rate-scan", "--config", cfg,
                 "--out", str(tmp_path / "o")]) == 2
    assert "at least 3" in capsys.readouterr().err


def test_rate_scan_thread_count_does_not_change_bytes(tmp_path, monkeypatch):
    cfg = _cfg(tmp_path, preset="trig", N=32, M=4100,
               epsilons=[0.4, 0.2, 0.1])
    out = tmp_path / "o"
    names = ("distances.csv", "strong.csv", "ratefit.csv", "manifest.json")
    monkeypatch.setenv("VF_THREADS", "1")
    assert _run(["rate-scan", "--config", cfg, "--out", str(out)]) == 0
    first = _read_bytes(out, names)
    monkeypatch.setenv("VF_THREADS", "4")
    assert _run(["rate-scan", "--config", cfg, "--out", str(out)]) == 0
    assert _read_bytes(out, names) == first


def test_rate_scan_observe_times_snap(tmp_path, capsys):
    cfg = _cfg(tmp_path, preset="trig", N=16, M=150,
               epsilons=[0.4, 0.2, 0.1], observe_times=[0.5, 1.0])
    out = tmp_path / "o"
    assert _run(["rate-scan", "--config", cfg, "--out", str(out)]) == 0
    ts = sorted({float(r["t"]) for r in _read_csv(out / "distances.csv")})
    assert ts == [0.5, 1.0]
    bad = _cfg(tmp_path, name="bad.json", preset="trig", N=16, M=150,
               epsilons=[0.4, 0.2, 0.1], observe_times=[0.33])
    assert _run(["rate-scan", "--config", bad, "--out", str(out)]) == 2
    assert "grid" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# thm2
# ---------------------------------------------------------------------------


def test_thm2_additive_unit_exact_zero(tmp_path):
    cfg = _cfg(tmp_path, preset="additive-unit", x0=0.0, N=16, M=300,
               epsilons=[0.25], test_functions=["cos", "const"])
    out = tmp_path / "o"
    assert _run(["thm2", "--config", cfg, "--out", str(out),
                 "--assert"]) == 0
    rows = _read_csv(out / "thm2.csv")
    assert len(rows) == 2
    for row in rows:
        assert float(row["lhs"]) == 0.0
        assert float(row["rhs"]) == 0.0
        assert float(row["gap_over_se"]) == 0.0
        assert row["status"] == "ok"


def test_thm2_degenerate_variance(tmp_path, capsys):
    # x0 = 0 kills the multiplicative noise, so Var(Y_T) = 0
    cfg = _cfg(tmp_path, preset="multiplicative", x0=0.0, N=16, M=200,
               epsilons=[0.25], test_functions=["cos"])
    out = tmp_path / "o"
    assert _run(["thm2", "--config", cfg, "--out", str(out)]) == 0
    rows = _read_csv(out / "thm2.csv")
    assert rows[0]["status"] == "degenerate"
    assert math.isnan(float(rows[0]["lhs"]))
    assert _run(["thm2", "--config", cfg, "--out", str(out),
                 "--assert"]) == 4
    assert "assert failed" in capsys.readouterr().err


def test_seed_override_changes_samples_and_manifest(tmp_path):
    cfg = _cfg(tmp_path, preset="trig", N=16, M=200, epsilons=[0.25])
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    assert _run(["thm2", "--config", cfg, "--out", str(out_a)]) == 0
    assert _run(["thm2", "--config", cfg, "--out", str(out_b),
                 "--seed", "999"]) == 0
    rows_a = _read_csv(out_a / "thm2.csv")
    rows_b = _read_csv(out_b / "thm2.csv")
    assert rows_a[0]["lhs"] != rows_b[0]["lhs"]
    doc = json.loads((out_b / "manifest.json").read_text())
    assert doc["config"]["seed"] == 999


# ---------------------------------------------------------------------------
# kernel-check
# ---------------------------------------------------------------------------


def test_kernel_check_brownian_exact(tmp_path):
    cfg = _cfg(tmp_path, N=64, M=2000, H_list=[0.5], t_list=[0.25, 1.0],
               cov_pairs=[[1.0, 0.5], [0.5, 0.25]])
    out = tmp_path / "o"
    assert _run(["kernel-check", "--config", cfg, "--out", str(out),
                 "--assert"]) == 0
    rows = _read_csv(out / "kernel.csv")
    kinds = {r["kind"] for r in rows}
    assert kinds == {"l2mass", "covariance"}  # no varmargin at H = 1/2
    for r in rows:
        if r["kind"] == "l2mass":
            assert float(r["err"]) == 0.0
        else:
            t, s = float(r["t"]), float(r["s"])
            assert float(r["target"]) == min(t, s)
            assert abs(float(r["z"])) <= 3.0


def test_kernel_check_rough_and_smooth(tmp_path):
    cfg = _cfg(tmp_path, N=128, M=4000, H_list=[0.3, 0.7], t_list=[0.5, 1.0],
               cov_pairs=[[1.0, 0.5]])
    out = tmp_path / "o"
    assert _run(["kernel-check", "--config", cfg, "--out", str(out),
                 "--assert"]) == 0
    rows = _read_csv(out / "kernel.csv")
    mass = [r for r in rows if r["kind"] == "l2mass"]
    assert len(mass) == 4
    for r in mass:
        rel = abs(float(r["err"])) / float(r["target"])
        assert rel <= 1e-3
    margins = [r for r in rows if r["kind"] == "varmargin"]
    assert [float(r["H"]) for r in margins] == [0.7]
    assert float(margins[0]["value"]) >= 0.0


# ---------------------------------------------------------------------------
# numerical failure paths
# ---------------------------------------------------------------------------


def test_divergent_limit_exits_3(tmp_path, capsys):
    cfg = _cfg(tmp_path, preset="linear-growth", params={"a": 1.0},
               T=800.0, N=1024)
    assert _run(["limit", "--config", cfg,
                 "--out", str(tmp_path / "o")]) == 3
    assert "numerical divergence" in capsys.readouterr().err
