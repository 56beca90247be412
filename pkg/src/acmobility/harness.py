"""Experiment runner: single runs, parameter sweeps, slope fits and file output.

Output layout of a single run (``emit_outputs``)::

    effective_config.ini        the configuration actually used
    summary.csv                 one row, schema SUMMARY_COLUMNS
    intervals.csv               per time interval, schema INTERVAL_COLUMNS
    certificate.txt             human-readable stability certificate
    certificate_intervals.csv   per-interval alpha parts and cumulative exponent
    diagnostics.csv             energy, zero-level radii, phi at the origin per time node
    snapshots/field_t<t>.txt    field dumps (FIELD_HEADER format) at the snapshot times
    final_state.txt | trajectory.{npz,json}   checkpoint, depending on the policy

A sweep writes one such directory per grid point (``<axis>_k<k>/``) plus
``sweep.csv`` (SUMMARY_COLUMNS), ``slopes.csv`` (SLOPE_COLUMNS) and, when
matplotlib is available and plots are requested, ``sweep.svg``.
"""
from __future__ import annotations

import csv
import logging
import math
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .certify import Certificate, assemble_certificate, constant_mobility_certificate, initial_relative_terms
from .config import RunConfig, initial_condition_annulus
from .eigen import integrated_positive_eigenvalue
from .estimator import CSV_COLUMNS, EstimatorReport, IntervalContext, estimate_trajectory
from .fem import FESpace
from .mesh import build_structured_mesh
from .model import (constant_mobility, default_mobility, derive_bound_constants, quadratic_potential,
                    quartic_potential)
from .solver import Trajectory, discrete_energy, run_simulation, save_trajectory

__all__ = [
    "FIELD_HEADER", "SUMMARY_COLUMNS", "INTERVAL_COLUMNS", "SLOPE_COLUMNS",
    "RunResult", "SlopeFit", "build_model", "build_space", "run_point", "annulus_diagnostics",
    "fit_slope", "knee_mask", "point_config", "run_sweep", "sweep_slopes", "emit_outputs",
    "write_field", "read_field",
]

log = logging.getLogger(__name__)

FIELD_HEADER = "# acmobility field v1"
SUMMARY_COLUMNS = [
    "axis", "k", "gamma", "tau", "n", "h_min", "h_max", "N", "est1", "est2", "est3", "est4", "fdiff",
    "int_lambda_plus", "int_gamma_dtphihat", "int_b2_muhat", "int_gamma2_muhat_sq",
    "A", "log_M", "condition", "satisfied", "collapse_time", "status",
]
INTERVAL_COLUMNS = CSV_COLUMNS + ["lambda_left", "lambda_mid", "lambda_right"]
SLOPE_COLUMNS = ["axis", "quantity", "x", "transform", "slope", "intercept", "r2", "n_used", "n_dropped"]
SWEEP_QUANTITIES = {
    "gamma": ("est1", "est2", "est3", "est4"),
    "h": ("est1", "est2", "est3", "est4"),
    "tau": ("est1", "est2", "est3", "est4"),
    "eigen": ("int_lambda_plus", "int_gamma_dtphihat", "int_b2_muhat", "int_gamma2_muhat_sq"),
    "Mcomponents": ("int_lambda_plus", "int_gamma_dtphihat", "int_b2_muhat", "int_gamma2_muhat_sq"),
}
SWEEP_X = {"gamma": "gamma", "h": "h_max", "tau": "tau", "eigen": "gamma", "Mcomponents": "gamma"}
KNEE_AXES = ("h", "tau")


# -- single run ---------------------------------------------------------------------


def build_model(cfg: RunConfig):
    potential = quartic_potential() if cfg.potential == "quartic" else quadratic_potential()
    mobility = default_mobility(cfg.mobility_c) if cfg.mobility == "default" else constant_mobility(1.0)
    constants = derive_bound_constants(mobility, potential, C_i=cfg.C_i, C_e=cfg.C_e)
    return potential, mobility, constants


def build_space(cfg: RunConfig) -> FESpace:
    return FESpace(build_structured_mesh(cfg.domain, cfg.n, cfg.mesh_pattern))


def initial_datum(cfg: RunConfig):
    if cfg.preset == "steady":
        return lambda x, y: np.ones_like(np.asarray(x, dtype=float))
    return lambda x, y: initial_condition_annulus(np.stack([x, y], axis=-1), cfg.gamma, cfg.r_inner,
                                                  cfg.r_outer)


@dataclass
class RunResult:
    config: RunConfig
    trajectory: Trajectory
    report: EstimatorReport
    eigen: dict | None
    certificate: Certificate | None
    constant_mobility: Certificate | None
    initial: dict
    diagnostics: dict
    b2: float

    def summary(self, axis="none", k=""):
        rep, tau, g = self.report, self.trajectory.tau, self.trajectory.gamma
        tot = rep.totals()
        mu_mid = rep.column("mu_inf_mid")
        row = {
            "axis": axis, "k": k, "gamma": g, "tau": tau, "n": self.config.n,
            "h_min": rep.h_min, "h_max": rep.h_max, "N": self.trajectory.n_steps,
            **{q: tot[q] for q in ("est1", "est2", "est3", "est4", "fdiff")},
            "int_lambda_plus": float(self.eigen["cumulative"][-1]) if self.eigen else "",
            "int_gamma_dtphihat": float(tau * g * np.sum(rep.column("dt_phi_hat_inf"))),
            "int_b2_muhat": float(tau * self.b2 * np.sum(mu_mid)),
            "int_gamma2_muhat_sq": float(tau * g**2 * np.sum(mu_mid**2)),
            "A": "", "log_M": "", "condition": "", "satisfied": "",
            "collapse_time": _blank(self.diagnostics["collapse_time"]),
            "status": "ok",
        }
        c = self.certificate
        if c is not None:
            row.update(A=c.A, log_M=math.log(c.M), condition=c.condition, satisfied=int(c.satisfied))
        return row


def _blank(v):
    return "" if v is None else v


def annulus_diagnostics(traj: Trajectory, potential=None, n_samples=801):
    """Energy, inner/outer zero-level radii along the positive x-axis and the collapse time.

    The inner radius is the first sign change from negative to positive
    going outward from the origin; it is ``nan`` once ``phi(0) >= 0``, which
    is taken as the collapse of the inner interface. The collapse time is
    linearly interpolated between the bracketing time nodes.
    """
    space = traj.space
    x0, x1 = float(space.mesh.vertices[:, 0].min()), float(space.mesh.vertices[:, 0].max())
    r = np.linspace(max(0.0, x0), x1, n_samples)
    pts = np.column_stack([r, np.zeros_like(r)])
    E = space.evaluation_matrix(pts)
    inner = np.full(traj.n_steps + 1, np.nan)
    outer = np.full(traj.n_steps + 1, np.nan)
    origin = np.empty(traj.n_steps + 1)
    energy = np.empty(traj.n_steps + 1)
    for k in range(traj.n_steps + 1):
        v = E @ traj.phi[k]
        origin[k] = v[0]
        energy[k] = discrete_energy(space, traj.phi[k], traj.gamma, potential)
        up = np.flatnonzero((v[:-1] < 0) & (v[1:] >= 0))
        down = np.flatnonzero((v[:-1] >= 0) & (v[1:] < 0))
        if v[0] < 0 and len(up):
            i = up[0]
            inner[k] = r[i] + (r[i + 1] - r[i]) * v[i] / (v[i] - v[i + 1])
        if len(down):
            i = down[-1]
            outer[k] = r[i] + (r[i + 1] - r[i]) * v[i] / (v[i] - v[i + 1])
    collapse = None
    hit = np.flatnonzero(origin >= 0)
    if len(hit) and hit[0] > 0:
        k = hit[0]
        t0, t1 = traj.times[k - 1], traj.times[k]
        collapse = float(t0 + (t1 - t0) * (-origin[k - 1]) / (origin[k] - origin[k - 1]))
    return {"times": traj.times, "energy": energy, "inner_radius": inner, "outer_radius": outer,
            "phi_origin": origin, "collapse_time": collapse}


def run_point(cfg: RunConfig, eigen: bool | None = None, certify: bool = True) -> RunResult:
    """Simulate, estimate and (when eigenvalues are computed) certify one configuration."""
    potential, mobility, constants = build_model(cfg)
    space = build_space(cfg)
    phi0 = initial_datum(cfg)
    traj = run_simulation(space, phi0, cfg.gamma, cfg.tau, cfg.T, potential, mobility)
    ctx = IntervalContext(traj, constants, potential)
    report = estimate_trajectory(traj, constants, potential)
    want_eigen = cfg.eigen if eigen is None else eigen
    eig = integrated_positive_eigenvalue(traj, potential=potential) if want_eigen else None
    initial = initial_relative_terms(traj, constants, potential, phi0=phi0, ctx=ctx)
    cert = corr = None
    if certify and eig is not None:
        cert = assemble_certificate(traj, report, eig, constants, beta2=cfg.beta2, initial=initial,
                                    alpha_plus=cfg.alpha_plus)
        if mobility.constant:
            corr = constant_mobility_certificate(traj, report, eig, constants, beta2=cfg.beta2,
                                                 initial=initial, alpha_plus=cfg.alpha_plus)
    diag = annulus_diagnostics(traj, potential)
    return RunResult(cfg, traj, report, eig, cert, corr, initial, diag, constants.b2)


# -- slope fitting ------------------------------------------------------------------


@dataclass
class SlopeFit:
    slope: float
    intercept: float
    r2: float
    n_used: int
    n_dropped: int


def knee_mask(y, tol=0.1, min_points=2):
    """Keep-mask that drops trailing points whose ratio to the previous one is within ``tol`` of 1."""
    y = np.asarray(y, dtype=float)
    keep = np.ones(len(y), dtype=bool)
    last = len(y) - 1
    while last >= min_points and y[last - 1] != 0 and abs(y[last] / y[last - 1] - 1.0) <= tol:
        keep[last] = False
        last -= 1
    return keep


def fit_slope(x, y, transform="loglog", knee=False, tol=0.1) -> SlopeFit:
    """Least-squares line through ``(log x, log y)`` (or ``(log x, y)`` for ``semilog``).

    Points must be ordered along the refinement direction for the knee
    detector to make sense. Non-finite or non-positive data give a nan fit.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    keep = knee_mask(y, tol) if knee else np.ones(len(y), dtype=bool)
    xs, ys = x[keep], y[keep]
    bad = SlopeFit(math.nan, math.nan, math.nan, int(keep.sum()), int((~keep).sum()))
    if len(xs) < 2 or np.any(xs <= 0) or not np.all(np.isfinite(ys)):
        return bad
    if transform == "loglog":
        if np.any(ys <= 0):
            return bad
        ys = np.log(ys)
    X = np.log(xs)
    (slope, intercept), *_ = np.linalg.lstsq(np.column_stack([X, np.ones_like(X)]), ys, rcond=None)
    resid = ys - (slope * X + intercept)
    ss_tot = float(np.sum((ys - ys.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return SlopeFit(float(slope), float(intercept), r2, int(keep.sum()), int((~keep).sum()))


# -- sweeps -------------------------------------------------------------------------


def point_config(cfg: RunConfig, k: int) -> RunConfig:
    """Configuration of grid point ``k`` on the active axis."""
    axis = cfg.sweep
    if axis in ("gamma", "eigen", "Mcomponents"):
        return cfg.replace(gamma=2.0**-k, sweep="none")
    if axis == "h":
        return cfg.replace(n=cfg.h_base_n * 2**k, sweep="none")
    if axis == "tau":
        return cfg.replace(tau=cfg.T * 2.0**-k, sweep="none")
    raise ValueError(f"no sweep axis set (sweep = {axis!r})")


def _sweep_worker(args):
    cfg, axis, k, out_dir, eigen, snapshots = args
    pcfg = point_config(cfg, k)
    try:
        res = run_point(pcfg, eigen=eigen)
        row = res.summary(axis, k)
        if out_dir is not None:
            emit_outputs(res, Path(out_dir) / f"{axis}_k{k}", snapshots=snapshots, row=row)
        return row
    except Exception as exc:  # isolation: one bad point must not sink the sweep
        log.warning("sweep point %s k=%s failed: %s", axis, k, exc)
        log.debug("%s", traceback.format_exc())
        row = {c: "" for c in SUMMARY_COLUMNS}
        row.update(axis=axis, k=k, gamma=pcfg.gamma, tau=pcfg.tau, n=pcfg.n,
                   status=f"failed: {type(exc).__name__}: {exc}")
        return row


def run_sweep(cfg: RunConfig, out_dir=None, workers=None, eigen=None, snapshots=False, plots=False):
    """Run every grid point of ``cfg.sweep``; returns ``(rows, slopes)``.

    ``eigen`` defaults to True on the eigen/Mcomponents axes and to
    ``cfg.eigen`` otherwise. Rows come back in grid order whatever the
    worker count.
    """
    axis = cfg.sweep
    if axis == "none":
        raise ValueError("config has no sweep axis")
    grid = cfg.grid()
    if eigen is None:
        eigen = True if axis in ("eigen", "Mcomponents") else cfg.eigen
    workers = workers or cfg.workers
    jobs = [(cfg, axis, k, None if out_dir is None else str(out_dir), eigen, snapshots) for k in grid]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_worker, jobs))
    else:
        rows = [_sweep_worker(j) for j in jobs]
    slopes = sweep_slopes(axis, rows)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "effective_config.ini").write_text(cfg.dumps())
        _write_csv(out / "sweep.csv", SUMMARY_COLUMNS, rows)
        _write_csv(out / "slopes.csv", SLOPE_COLUMNS, slopes)
        if plots:
            _plot_sweep(out / "sweep.svg", axis, rows)
    return rows, slopes


def sweep_slopes(axis, rows):
    """One fit per quantity over the successful rows (ordered by ``k``)."""
    ok = sorted((r for r in rows if r["status"] == "ok"), key=lambda r: r["k"])
    xname = SWEEP_X[axis]
    out = []
    for q in SWEEP_QUANTITIES[axis]:
        pts = [(float(r[xname]), float(r[q])) for r in ok if r[q] != ""]
        transform = "semilog" if q == "int_lambda_plus" else "loglog"
        if pts:
            x, y = map(np.array, zip(*pts))
            fit = fit_slope(x, y, transform, knee=axis in KNEE_AXES)
        else:
            fit = SlopeFit(math.nan, math.nan, math.nan, 0, 0)
        out.append({"axis": axis, "quantity": q, "x": xname, "transform": transform,
                    "slope": fit.slope, "intercept": fit.intercept, "r2": fit.r2,
                    "n_used": fit.n_used, "n_dropped": fit.n_dropped})
    return out


# -- output -------------------------------------------------------------------------


def _write_csv(path, columns, rows):
    try:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({c: _fmt(r.get(c, "")) for c in columns})
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer, np.bool_)):
        return str(int(v))
    return v


def write_field(path, space: FESpace, phi, mu, t, gamma):
    """Plain-text dump: header lines, then ``x y phi mu`` per degree of freedom."""
    lines = [FIELD_HEADER, f"# t = {float(t)!r}", f"# gamma = {float(gamma)!r}", f"# n_dofs = {space.n_dofs}",
             f"# mesh = {space.mesh.fingerprint}", "# columns: x y phi mu"]
    body = np.column_stack([space.nodes, phi, mu])
    text = "\n".join(lines) + "\n" + "\n".join(" ".join(f"{v:.17g}" for v in row) for row in body) + "\n"
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def read_field(path):
    """Inverse of :func:`write_field`: returns ``(meta, data)`` with data columns x, y, phi, mu."""
    meta = {}
    with open(path) as fh:
        first = fh.readline().rstrip("\n")
        if first != FIELD_HEADER:
            raise ValueError(f"{path}: not a field dump ({first!r})")
        for line in fh:
            if not line.startswith("#"):
                break
            key, _, val = line[1:].partition("=")
            if val:
                meta[key.strip()] = val.strip()
    data = np.loadtxt(path, comments="#", ndmin=2)
    return meta, data


def emit_outputs(result: RunResult, out_dir, snapshots=True, row=None):
    """Write all files of one run into ``out_dir`` (created if needed)."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out}: {exc}") from exc
    cfg, traj = result.config, result.trajectory
    (out / "effective_config.ini").write_text(cfg.dumps())
    _write_csv(out / "summary.csv", SUMMARY_COLUMNS, [row or result.summary()])

    rows = result.report.rows()
    if result.eigen is not None:
        lam, mid = result.eigen["nodes"], result.eigen["mid"]
        for n, r in enumerate(rows):
            r.update(lambda_left=lam[n], lambda_mid=mid[n], lambda_right=lam[n + 1])
    _write_csv(out / "intervals.csv", INTERVAL_COLUMNS, rows)

    if result.certificate is not None:
        text = result.certificate.report()
        if result.constant_mobility is not None:
            text += "\n" + result.constant_mobility.report()
        (out / "certificate.txt").write_text(text)
        cols = ["n", "t"] + list(result.certificate.alpha_components) + ["cumulative"]
        _write_csv(out / "certificate_intervals.csv", cols, result.certificate.alpha_intervals)
    else:
        (out / "certificate.txt").write_text("certificate: not assembled (eigenvalues disabled)\n")

    d = result.diagnostics
    diag_rows = [{"n": k, "t": d["times"][k], "energy": d["energy"][k], "inner_radius": d["inner_radius"][k],
                  "outer_radius": d["outer_radius"][k], "phi_origin": d["phi_origin"][k]}
                 for k in range(len(d["times"]))]
    _write_csv(out / "diagnostics.csv", ["n", "t", "energy", "inner_radius", "outer_radius", "phi_origin"],
               diag_rows)

    if snapshots:
        snap = out / "snapshots"
        snap.mkdir(exist_ok=True)
        for t in cfg.snapshot_times:
            if t > traj.T + 1e-12:
                continue
            write_field(snap / f"field_t{t:.4f}.txt", traj.space, traj.phi_at(t), traj.mu_at(t), t, traj.gamma)
    if cfg.checkpoint == "final":
        write_field(out / "final_state.txt", traj.space, traj.phi[-1], traj.mu[-1], traj.T, traj.gamma)
    elif cfg.checkpoint == "all":
        save_trajectory(traj, out / "trajectory")
    return out


def _plot_sweep(path, axis, rows):
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.info("matplotlib not available; skipping %s", path)
        return None
    matplotlib.rcParams["svg.hashsalt"] = "acmobility"
    ok = sorted((r for r in rows if r["status"] == "ok"), key=lambda r: r["k"])
    xname = SWEEP_X[axis]
    fig, ax = plt.subplots(figsize=(5, 4))
    for q in SWEEP_QUANTITIES[axis]:
        pts = [(float(r[xname]), float(r[q])) for r in ok if r[q] != "" and float(r[q]) > 0]
        if pts:
            x, y = zip(*pts)
            ax.loglog(x, y, "o-", label=q)
    ax.set_xlabel({"gamma": "gamma", "h_max": "h_max", "tau": "tau"}[xname])
    ax.set_ylabel("value")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path
