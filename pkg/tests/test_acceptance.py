"""End-to-end acceptance checks, one test per numbered criterion.

Each test drives the public surface (mostly the CLI) at the stated
parameters and registers a one-line verdict that conftest prints after
the run.  Heavy Monte Carlo artifacts are shared through module-scoped
fixtures so the sweep work is done once.
"""
import csv
import dataclasses
import json
import math
import os

import numpy as np
import pytest

from volfluct.cli import main
from volfluct.kernels import make_preset
from volfluct.deterministic import (TimeGrid, solve_deterministic_limit,
                                    solve_derivative_field)
from volfluct import simulate as sim
from volfluct import stats as st

SEED = 12345
SWEEP = [0.4, 0.2, 0.1, 0.05]


def _run_cli(args, threads="4"):
    old = os.environ.get("VF_THREADS")
    os.environ["VF_THREADS"] = threads
    try:
        return main(list(args))
    finally:
        if old is None:
            os.environ.pop("VF_THREADS", None)
        else:
            os.environ["VF_THREADS"] = old


def _write_cfg(path, **doc):
    path.write_text(json.dumps(doc))
    return str(path)


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("accept")


@pytest.fixture(scope="module")
def sweep_m1e4(workdir):
    """rate-scan at M=1e4 for both presets: criteria 3 and 6."""
    outs = {}
    for preset in ("trig", "multiplicative"):
        cfg = _write_cfg(workdir / ("c3_%s.json" % preset), preset=preset,
                         N=256, M=10000, epsilons=SWEEP, seed=SEED)
        out = workdir / ("c3_" + preset)
        assert _run_cli(["rate-scan", "--config", cfg, "--out", str(out)]) == 0
        outs[preset] = out
    return outs


@pytest.fixture(scope="module")
def sweep_m1e5(workdir):
    """rate-scan at M=1e5 for both presets: criterion 4."""
    outs = {}
    for preset in ("trig", "multiplicative"):
        cfg = _write_cfg(workdir / ("c4_%s.json" % preset), preset=preset,
                         N=256, M=100000, epsilons=SWEEP, seed=SEED)
        out = workdir / ("c4_" + preset)
        assert _run_cli(["rate-scan", "--config", cfg, "--out", str(out)]) == 0
        outs[preset] = out
    return outs


@pytest.fixture(scope="module")
def thm2_m1e6(workdir):
    """thm2 at eps=0.05, M=1e6 for both presets: criterion 5."""
    outs = {}
    for preset in ("trig", "multiplicative"):
        cfg = _write_cfg(workdir / ("c5_%s.json" % preset), preset=preset,
                         N=256, M=1000000, epsilons=[0.05], seed=SEED,
                         test_functions=["cos", "tanh"])
        out = workdir / ("c5_" + preset)
        assert _run_cli(["thm2", "--config", cfg, "--out", str(out)]) == 0
        outs[preset] = out
    return outs


def test_criterion_1_kernel_mass_identity(workdir, record_criterion):
    cfg = _write_cfg(workdir / "c1.json", N=64, M=500,
                     H_list=[0.3, 0.5, 0.7, 0.9], t_list=[0.25, 0.5, 1.0],
                     cov_pairs=[[1.0, 0.5]], seed=SEED)
    out = workdir / "c1"
    assert _run_cli(["kernel-check", "--config", cfg, "--out", str(out)]) == 0
    rels = []
    for row in _read_csv(out / "kernel.csv"):
        if row["kind"] != "l2mass":
            continue
        rels.append(abs(float(row["err"])) / float(row["target"]))
    record_criterion(1, len(rels) == 12 and max(rels) <= 1e-3,
                     "12 (H, t) pairs, max rel err %.2e" % max(rels))


def test_criterion_2_fbm_covariance(workdir, record_criterion):
    cfg = _write_cfg(workdir / "c2.json", N=512, M=100000,
                     H_list=[0.3, 0.7], t_list=[1.0], seed=SEED)
    out = workdir / "c2"
    assert _run_cli(["kernel-check", "--config", cfg, "--out", str(out)]) == 0
    zs = [abs(float(r["z"])) for r in _read_csv(out / "kernel.csv")
          if r["kind"] == "covariance"]
    record_criterion(2, len(zs) == 12 and max(zs) <= 3.0,
                     "6 pairs x 2 H values, max |z| = %.2f" % max(zs))


def _slopes(out, metrics, t="1"):
    picked = {}
    for row in _read_csv(out / "ratefit.csv"):
        if row["metric"] in metrics and row["t"] == t:
            picked[row["metric"]] = (row["status"],
                                     float(row["slope"]))
    return picked


def test_criterion_3_strong_rates(sweep_m1e4, record_criterion):
    ok = True
    parts = []
    for preset, out in sweep_m1e4.items():
        got = _slopes(out, ("rms_x_gap", "rms_xt_y"))
        for metric in ("rms_x_gap", "rms_xt_y"):
            status, slope = got[metric]
            ok = ok and status == "ok" and 0.85 <= slope <= 1.15
            parts.append("%s %s %.3f" % (preset, metric, slope))
    record_criterion(3, ok, ", ".join(parts))


def test_criterion_4_kolmogorov_rate(sweep_m1e5, record_criterion):
    ok = True
    parts = []
    for preset, out in sweep_m1e5.items():
        status, slope = _slopes(out, ("kolmogorov",))["kolmogorov"]
        ok = ok and status == "ok" and slope >= 0.75
        parts.append("%s %.3f" % (preset, slope))
    record_criterion(4, ok, "terminal-node slopes " + ", ".join(parts))


def test_criterion_5_weak_expansion(thm2_m1e6, record_criterion):
    ok = True
    parts = []
    for preset, out in thm2_m1e6.items():
        for row in _read_csv(out / "thm2.csv"):
            ratio = float(row["gap_over_se"])
            ok = ok and row["status"] == "ok" and ratio <= 3.0
            parts.append("%s/%s %.2f" % (preset, row["phi"], ratio))
            if preset != "multiplicative":
                continue
            # independent quadrature oracle for the flat-geometry preset
            f = st.resolve_test_function(row["phi"])
            oracle = st.gauss_hermite_mean(
                lambda xi: f(xi) * (xi ** 3 - 3.0 * xi)) / 2.0
            z = abs(float(row["rhs"]) - oracle) / float(row["rhs_se"])
            ok = ok and z <= 3.0
            parts.append("oracle/%s %.2f" % (row["phi"], z))
    record_criterion(5, ok, "gap/SE " + ", ".join(parts))


def test_criterion_6_second_order_decreasing(sweep_m1e4, record_criterion):
    ok = True
    parts = []
    for preset, out in sweep_m1e4.items():
        rows = _read_csv(out / "strong.csv")
        vals = [(float(r["rms_second"]), float(r["rms_second_se"]))
                for r in rows]
        for (a, sa), (b, sb) in zip(vals, vals[1:]):
            ok = ok and b <= a + 2.0 * math.hypot(sa, sb)
        parts.append("%s %s" % (preset,
                                "->".join("%.3g" % v for v, _ in vals)))
    record_criterion(6, ok, "; ".join(parts))


def test_criterion_7_variance_margin(workdir, record_criterion):
    cfg = _write_cfg(workdir / "c7.json", N=512, M=100, H_list=[0.7],
                     t_list=[1.0], cov_pairs=[[1.0, 0.5]],
                     params={"sigma0": 1.0}, seed=SEED)
    out = workdir / "c7"
    assert _run_cli(["kernel-check", "--config", cfg, "--out", str(out)]) == 0
    rows = [r for r in _read_csv(out / "kernel.csv")
            if r["kind"] == "varmargin"]
    margin = float(rows[0]["value"])
    record_criterion(7, len(rows) == 1 and margin >= 0.0,
                     "minimum node margin %.4f at t=%s"
                     % (margin, rows[0]["t"]))


def test_criterion_8_exactness(record_criterion):
    grid = TimeGrid(T=1.0, N=64)
    checks = []

    # zero diffusion: the fluctuation vanishes identically
    zero = lambda t, s, x: np.zeros(np.shape(x))
    c = dataclasses.replace(make_preset("linear-growth", a=0.8),
                            sigma=zero, dsigma=zero, d2sigma=zero)
    x = solve_deterministic_limit(c, grid, 1.2)
    batch = sim.sample_brownian(50, grid, SEED)
    Xt = sim.fluctuation(sim.simulate_X(c, grid, 1.2, 0.25, batch), x, 0.25)
    checks.append(bool(np.all(Xt.values == 0.0)))

    # pure additive noise with dyadic eps: Xt and Y bitwise equal
    c = make_preset("additive-unit")
    x = solve_deterministic_limit(c, grid, 0.0)
    Xt = sim.fluctuation(sim.simulate_X(c, grid, 0.0, 0.25, batch), x, 0.25)
    Y = sim.simulate_Y_euler(c, grid, x, batch)
    checks.append(bool(np.array_equal(Xt.values, Y.values)))
    checks.append(st.kolmogorov_distance(Xt.values[:, -1],
                                         Y.values[:, -1]) == 0.0)
    checks.append(st.tv_histogram(Xt.values[:, -1], Y.values[:, -1],
                                  16) == 0.0)

    # flat drift curvature and state-free sigma: Z and the rhs vanish
    c = make_preset("linear-growth", a=0.8)
    x = solve_deterministic_limit(c, grid, 1.0)
    D = solve_derivative_field(c, grid, x)
    Y = sim.simulate_Y_euler(c, grid, x, batch)
    Z = sim.simulate_Z(c, grid, x, Y, batch)
    checks.append(bool(np.all(Z.values == 0.0)))
    DZ = sim.simulate_DZ_terminal(c, grid, x, Y, D, batch).DZ
    delta = st.skorokhod_term(Y.values[:, -1], Z.values[:, -1], DZ,
                              D.D[:, grid.N], grid)
    varY = float((D.D[:, grid.N] ** 2).sum() * grid.delta)
    rhs, _ = st.thm2_rhs("cos", Y.values[:, -1], delta, varY)
    checks.append(rhs == 0.0)

    record_criterion(8, all(checks),
                     "%d/%d identities hold exactly"
                     % (sum(checks), len(checks)))


def test_criterion_9_determinism(workdir, record_criterion):
    jobs = {
        "limit": dict(preset="trig", N=64, seed=SEED),
        "rate-scan": dict(preset="trig", N=32, M=4100,
                          epsilons=[0.4, 0.2, 0.1], seed=SEED),
        "thm2": dict(preset="multiplicative", N=32, M=2500,
                     epsilons=[0.25, 0.125], seed=SEED),
        "kernel-check": dict(N=64, M=2500, H_list=[0.3, 0.7],
                             t_list=[1.0], cov_pairs=[[1.0, 0.5]],
                             seed=SEED),
    }
    ok = True
    for command, doc in jobs.items():
        cfg = _write_cfg(workdir / ("c9_%s.json" % command), **doc)
        out = workdir / ("c9_" + command.replace("-", "_"))
        snaps = []
        for threads in ("1", "1", "4"):
            assert _run_cli([command, "--config", cfg, "--out", str(out)],
                            threads=threads) == 0
            snaps.append({p.name: p.read_bytes()
                          for p in sorted(out.iterdir())})
        ok = ok and snaps[0] == snaps[1] == snaps[2]
    record_criterion(9, ok, "4 subcommands, reruns and VF_THREADS in {1, 4}")
