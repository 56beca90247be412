import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from acmobility import harness
from acmobility.cli import main
from acmobility.config import parse_config
from acmobility.harness import (SLOPE_COLUMNS, SUMMARY_COLUMNS, SWEEP_QUANTITIES, emit_outputs, fit_slope, knee_mask,
                                point_config, read_field, run_point, run_sweep, write_field)

pytestmark = pytest.mark.filterwarnings("ignore:h_min")


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_knee_mask():
    assert knee_mask([8, 4, 2, 1]).all()
    assert knee_mask([8, 4, 2, 1.9, 1.95]).tolist() == [True, True, True, False, False]
    # never drops below min_points
    assert knee_mask([1.0, 1.0, 1.0]).tolist() == [True, True, False]


@given(slope=st.floats(-4, 4), c=st.floats(-3, 3))
def test_fit_slope_exact_power_law(slope, c):
    x = np.array([0.5, 0.25, 0.125, 0.0625])
    fit = fit_slope(x, np.exp(c) * x**slope)
    assert fit.slope == pytest.approx(slope, abs=1e-9)
    assert fit.r2 == pytest.approx(1.0, abs=1e-9)


def test_fit_slope_least_squares_oracle(rng):
    x = np.geomspace(1e-3, 1, 7)
    y = np.exp(rng.normal(size=7)) * x**2
    fit = fit_slope(x, y)
    p = np.polyfit(np.log(x), np.log(y), 1)
    resid = np.log(y) - np.polyval(p, np.log(x))
    r2 = 1 - resid @ resid / np.sum((np.log(y) - np.log(y).mean()) ** 2)
    assert (fit.slope, fit.intercept, fit.r2) == pytest.approx((p[0], p[1], r2), rel=1e-10)
    semi = fit_slope(x, np.log(y), transform="semilog")
    assert semi.slope == pytest.approx(p[0], rel=1e-10)
    assert np.isnan(fit_slope(x, -y).slope)


def test_point_config():
    cfg = parse_config("", preset="steady")
    assert point_config(cfg.replace(sweep="gamma"), 3).gamma == 0.125
    assert point_config(cfg.replace(sweep="h", h_base_n=4), 2).n == 16
    assert point_config(cfg.replace(sweep="tau"), 2).tau == pytest.approx(0.0025)
    with pytest.raises(ValueError):
        point_config(cfg, 1)


SMALL = "n = 8\nT = 0.01\ntau = 0.002\ngamma = 0.25\nsnapshot_times = 0, 0.004, 0.05\n"


@pytest.fixture(scope="module")
def small_result():
    return run_point(parse_config(SMALL))


def test_emit_outputs_layout(tmp_path, small_result):
    out = emit_outputs(small_result, tmp_path / "run")
    for name in ("effective_config.ini", "summary.csv", "intervals.csv", "certificate.txt",
                 "certificate_intervals.csv", "diagnostics.csv", "final_state.txt"):
        assert (out / name).is_file(), name
    snaps = sorted(p.name for p in (out / "snapshots").iterdir())
    assert snaps == ["field_t0.0000.txt", "field_t0.0040.txt"]  # 0.05 > T is skipped
    (summary,) = read_csv(out / "summary.csv")
    assert list(summary) == SUMMARY_COLUMNS and summary["status"] == "ok"
    assert len(read_csv(out / "intervals.csv")) == 5
    meta, data = read_field(out / "snapshots" / "field_t0.0040.txt")
    traj = small_result.trajectory
    assert float(meta["t"]) == 0.004
    assert np.array_equal(data[:, 2], traj.phi_at(0.004))
    assert "certificate (general)" in (out / "certificate.txt").read_text()


def test_field_round_trip(tmp_path, small_result):
    traj = small_result.trajectory
    write_field(tmp_path / "f.txt", traj.space, traj.phi[2], traj.mu[2], traj.times[2], traj.gamma)
    meta, data = read_field(tmp_path / "f.txt")
    assert np.array_equal(data[:, :2], traj.space.nodes)
    assert np.array_equal(data[:, 3], traj.mu[2])
    assert meta["mesh"] == traj.space.mesh.fingerprint
    (tmp_path / "g.txt").write_text("x y\n1 2\n")
    with pytest.raises(ValueError):
        read_field(tmp_path / "g.txt")


def test_diagnostics_small_annulus(small_result):
    d = small_result.diagnostics
    assert np.all(np.diff(d["energy"]) <= 1e-10)
    assert d["inner_radius"][0] == pytest.approx(0.4, abs=0.05)
    assert d["outer_radius"][0] == pytest.approx(1.0, abs=0.05)


def test_sweep_reruns_are_byte_identical(tmp_path):
    cfg = parse_config(SMALL + "sweep = gamma\nsweep_k = 2..3")
    run_sweep(cfg, tmp_path / "a")
    run_sweep(cfg, tmp_path / "b")
    for name in ("sweep.csv", "slopes.csv", "gamma_k2/intervals.csv", "gamma_k3/certificate.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    slopes = read_csv(tmp_path / "a" / "slopes.csv")
    assert list(slopes[0]) == SLOPE_COLUMNS
    assert [s["quantity"] for s in slopes] == list(SWEEP_QUANTITIES["gamma"])


def test_sweep_isolates_failures(tmp_path, monkeypatch):
    real = harness.run_point

    def flaky(cfg, eigen=None, certify=True):
        if cfg.gamma == 0.125:
            raise RuntimeError("boom")
        return real(cfg, eigen=eigen, certify=certify)

    monkeypatch.setattr(harness, "run_point", flaky)
    cfg = parse_config("sweep = gamma\nsweep_k = 2..4", preset="steady")
    rows, slopes = run_sweep(cfg, tmp_path)
    assert [r["status"] for r in rows][0] == "ok" and rows[2]["status"] == "ok"
    assert rows[1]["status"].startswith("failed: RuntimeError: boom")
    assert all(s["n_used"] <= 2 for s in slopes)


def test_cli_single_run(tmp_path, capsys):
    assert main(["--preset", "steady", "--out", str(tmp_path / "cli")]) == 0
    out = capsys.readouterr().out
    assert "certificate (general)" in out and "satisfied" in out
    assert (tmp_path / "cli" / "summary.csv").is_file()


def test_cli_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("tau = 0.003\n")
    assert main(["--config", str(bad)]) == 2
    assert "tau" in capsys.readouterr().err
    assert main(["--config", str(tmp_path / "missing.ini")]) == 2
