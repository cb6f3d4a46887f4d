"""Experiment orchestration: one function per experiment kind, the
ε-sweep and the particle/kinetic comparison, plus artifact export."""
from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .config import RunConfig
from .core import Distribution, WealthGrid, XGrid, build_grid, lognormal_distribution, quadrature
from .equilibrium import (equilibrium_fixed_point, inverse_gamma_cdf, inverse_gamma_equilibrium,
                          inverse_gamma_parameters, l1_distance, mean_wealth, nash_residual)
from .errors import ConfigError
from .hydro import hydro_state_from_moments, run_hydro
from .invariants import collision_invariant_solve, conservation_report, poincare_gap, weighted_norms
from .io import write_csv, write_json
from .kinetic import (local_equilibrium_field, moments_field, relax_homogeneous,
                      run_inhomogeneous)
from .particles import (SampleLaw, distribution_cdf, empirical_histogram, init_ensemble,
                        ks_distributions, ks_samples, step_ensemble)

SMALL_N = 1000
LARGE_EPSILON = 0.5


@dataclass
class ArtifactSet:
    out_dir: Path
    files: Dict[str, Path]
    metadata: dict
    exit_status: int = 0


# ---------------------------------------------------------------------------
# Initial data helpers
# ---------------------------------------------------------------------------

def initial_distribution(config: RunConfig, grid: WealthGrid) -> Distribution:
    ini, p = config.initial, config.params
    law, mean, sig = ini["y_law"], ini["y_mean"], ini["y_sigma"]
    if law == "lognormal":
        return lognormal_distribution(grid, mean, sig)
    if law == "inverse-gamma":
        return inverse_gamma_equilibrium(mean, p, grid)[0]
    if law == "uniform":
        v = ((grid.nodes >= mean - sig) & (grid.nodes <= mean + sig)).astype(float)
        return Distribution.from_values(grid, v)
    raise ConfigError("a constant wealth law has no density on the grid; use it for particles only")


def wealth_law(config: RunConfig) -> SampleLaw:
    ini, p = config.initial, config.params
    law, mean, sig = ini["y_law"], ini["y_mean"], ini["y_sigma"]
    if law == "lognormal":
        return SampleLaw("lognormal", mean, sig)
    if law == "inverse-gamma":
        alpha, _ = inverse_gamma_parameters(mean, p)
        return SampleLaw("inverse-gamma", alpha, (alpha - 1) * mean)
    if law == "uniform":
        return SampleLaw("uniform", mean - sig, mean + sig)
    return SampleLaw("constant", mean)


def position_law(config: RunConfig) -> SampleLaw:
    ini = config.initial
    return SampleLaw(ini["x_law"], ini["x_a"], ini["x_b"])


def initial_profile(config: RunConfig, xg: XGrid):
    ini = config.initial
    x = xg.centers
    s = (x - xg.x_min) / xg.length
    if ini["profile"] == "uniform":
        rho, ups = np.full(x.shape, ini["rho0"]), np.full(x.shape, ini["ups0"])
    elif ini["profile"] == "sine":
        wave = np.sin(2 * math.pi * ini["wavenumber"] * s)
        rho = ini["rho0"] * (1 + ini["rho_amp"] * wave)
        ups = ini["ups0"] * (1 + ini["ups_amp"] * wave)
    elif ini["profile"] == "riemann":
        left = s < 0.5
        rho = np.where(left, ini["rho0"], ini["rho_right"])
        ups = np.where(left, ini["ups0"], ini["ups_right"])
    else:
        bump = np.exp(-((s - 0.5) / 0.1) ** 2)
        rho = ini["rho0"] * (1 + ini["rho_amp"] * bump)
        ups = ini["ups0"] * (1 + ini["ups_amp"] * bump)
    if np.any(rho < 0) or np.any(ups <= 0):
        raise ConfigError("initial profile must have rho >= 0 and Upsilon > 0")
    return rho, ups


def _require_quadratic(p, what: str):
    if not p.is_quadratic:
        raise ConfigError(f"{what}: the inverse-gamma equilibria require the quadratic potential")


def _x_period(config: RunConfig):
    xg = config.x_grid
    return (xg.x_min, xg.x_max) if xg.bc == "periodic" else None


def _l1_x(a, b, dx):
    return float(np.sum(np.abs(np.asarray(a) - np.asarray(b))) * dx)


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------

def _run_equilibrium(config: RunConfig):
    p, num, grid = config.params, config.numerics, config.y_grid
    nu0 = initial_distribution(config, grid)
    res = equilibrium_fixed_point(nu0, p, num["tol"], num["max_iter"], num["damping"])
    y = grid.nodes
    header = ["y", "nu", "xi"]
    cols = [y, res.nu_star.values, res.xi_star.values]
    results = {
        "converged": res.converged, "iterations": res.iterations, "residual": res.residual,
        "self_consistency": res.self_consistency,
        "unconstrained_residual": res.unconstrained_residual,
        "wealth_multiplier": res.wealth_multiplier, "mean_wealth": res.mean_wealth,
    }
    try:
        results["nash_residual"] = nash_residual(res.nu_star, p)
    except ValueError as exc:
        results["nash_residual"] = repr(exc)
    if p.is_quadratic:
        ref, Z = inverse_gamma_equilibrium(mean_wealth(nu0), p, grid)
        header.append("reference")
        cols.append(ref.values)
        results["l1_to_inverse_gamma"] = l1_distance(res.nu_star, ref)
        results["partition_value"] = Z
    return {"equilibrium.csv": (header, cols)}, results, {}


def _run_kinetic_homogeneous(config: RunConfig):
    p, num, grid = config.params, config.numerics, config.y_grid
    nu0 = initial_distribution(config, grid)
    final, snaps, times = relax_homogeneous(nu0, p, num["t_end"], num["dt"], num["scheme"],
                                            num["face_mean"], num["record_every"])
    rep = conservation_report(snaps, grid)
    results = {"t_end": times[-1], "steps": int(round(num["t_end"] / num["dt"]))}
    if p.is_quadratic:
        ref, _ = inverse_gamma_equilibrium(mean_wealth(nu0), p, grid)
        results["l1_to_inverse_gamma"] = l1_distance(final, ref)
    files = {
        "kinetic.csv": (["y", "nu"], [grid.nodes, final.values]),
        "moments.csv": (["t", "mass", "wealth"], [np.array(times), np.array(rep.masses),
                                                  np.array(rep.wealths)]),
    }
    return files, results, rep.as_dict()


def _run_kinetic_inhomogeneous(config: RunConfig):
    p, num, yg, xg = config.params, config.numerics, config.y_grid, config.x_grid
    _require_quadratic(p, "local-equilibrium initial data")
    rho, ups = initial_profile(config, xg)
    f0 = local_equilibrium_field(xg, yg, rho, ups, p)
    f, masses = run_inhomogeneous(f0, p, num["t_end"], num["dt"], face_mean=num["face_mean"])
    mf = moments_field(f)
    X, Yv = np.meshgrid(xg.centers, yg.nodes, indexing="ij")
    files = {
        "field.csv": (["x", "y", "f"], [X, Yv, f.values]),
        "moments.csv": (["x", "rho", "upsilon"], [xg.centers, mf.rho, mf.upsilon]),
    }
    cons = {"mass_drift": float((masses[-1] - masses[0]) / masses[0]),
            "wealth_drift": float((f.total_wealth - f0.total_wealth) / f0.total_wealth)}
    return files, {"t_end": f.time, "epsilon": f.epsilon}, cons


def _particle_run(config: RunConfig, ensemble, t_end: float, dt: float, on_record=None, stride: int = 0):
    """Advance the ensemble; accumulates the quadratic variation of the mean wealth."""
    p = config.params
    n = max(1, int(round(t_end / dt)))
    qv = 0.0
    for k in range(1, n + 1):
        qv += 2 * p.d * dt * float(np.sum(ensemble.Y ** 2)) / ensemble.N ** 2
        ensemble = step_ensemble(ensemble, dt, p)
        if on_record is not None and stride and (k % stride == 0 or k == n):
            on_record(ensemble)
    return ensemble, qv


def _run_particles(config: RunConfig):
    num, grid, ini = config.numerics, config.y_grid, config.initial
    ens0 = init_ensemble(ini["N"], position_law(config), wealth_law(config), num["seed"],
                         _x_period(config))
    out = config.values["output"]
    rows: List[np.ndarray] = []
    sel = np.arange(0, ens0.N, max(1, out["agent_stride"]))

    def record(e):
        rows.append(np.stack([np.full(sel.size, e.time), sel.astype(float), e.X[sel], e.Y[sel]], 1))

    record(ens0)
    ens, qv = _particle_run(config, ens0, num["t_end"], num["dt"], record, out["stride"])
    traj = np.concatenate(rows)
    hist = empirical_histogram(ens, grid)
    drift = ens.mean_wealth() - ens0.mean_wealth()
    results = {"N": ens.N, "t_end": ens.time, "mean_wealth_initial": ens0.mean_wealth(),
               "mean_wealth_final": ens.mean_wealth(), "martingale_z": drift / math.sqrt(qv) if qv > 0 else 0.0,
               "rejections": ens0.rejections, "histogram_flags": sorted(hist.flags)}
    files = {
        "trajectory.csv": (["t", "j", "X", "Y"], [traj[:, 0], traj[:, 1].astype(int), traj[:, 2], traj[:, 3]]),
        "histogram.csv": (["y", "nu"], [grid.nodes, hist.values]),
    }
    return files, results, {"wealth_drift": drift / ens0.mean_wealth()}


def _run_hydro(config: RunConfig):
    p, num, xg = config.params, config.numerics, config.x_grid
    rho, ups = initial_profile(config, xg)
    s0 = hydro_state_from_moments(xg, rho, ups)
    s, ledger = run_hydro(s0, p, num["t_end"], None, num["cfl"], num["dt"])
    m0, w0 = s0.totals()
    m1, w1 = s.totals()
    cons = {"mass_drift": (m1 - m0) / m0, "wealth_drift": (w1 - w0) / w0,
            "max_step_mass": float(np.max(np.abs(np.diff(ledger["mass"])), initial=0.0)) / m0,
            "max_step_wealth": float(np.max(np.abs(np.diff(ledger["wealth"])), initial=0.0)) / w0}
    results = {"steps": ledger["steps"], "max_cfl": max(ledger["cfl"], default=0.0), "t_end": s.time}
    return {"hydro.csv": (["x", "rho", "upsilon"], [xg.centers, s.rho, s.upsilon])}, results, cons


def _run_invariants(config: RunConfig):
    p, inv = config.params, config.values["invariants"]
    g = config.values["grid"]
    grid = build_grid(inv["y_min"], inv["y_max"], inv["G"], g["spacing"])
    Y = inv["Y"]
    M, _ = inverse_gamma_equilibrium(Y, p, grid)
    ci = collision_invariant_solve(Y, p, grid)
    lam, vec = poincare_gap(M, grid)
    norms = weighted_norms(ci.chi, M, grid)
    results = {"ci_residual": ci.residual, "ci_slope": ci.slope, "y0": ci.y0, "poincare_gap": lam,
               "chi_x_norm": norms.x_norm, "chi_h_seminorm": norms.h_seminorm}
    return {"invariants.csv": (["y", "M", "chi", "eigvec"], [grid.nodes, M.values, ci.chi, vec])}, results, {}


# ---------------------------------------------------------------------------
# ε-sweep
# ---------------------------------------------------------------------------

@dataclass
class SweepTable:
    epsilons: List[float]
    err_rho: List[float]
    err_w: List[float]
    errors: List[float]
    order: float
    monotone: bool
    warnings: List[str]
    timings: Dict[str, float] = field(default_factory=dict)


def epsilon_sweep(config: RunConfig, epsilons: Optional[Sequence[float]] = None) -> SweepTable:
    """Kinetic runs from local-equilibrium data at several ε against the hydro run.

    With ``[sweep] hydro_flux = kinetic`` the hydro reference uses the
    velocity-sign flux splitting on the same x-grid and wealth grid, which is
    exactly the zero-ε limit of the kinetic upwind transport.  The shared
    first-order spatial error then cancels and the table measures the
    kinetic-to-hydro gap itself.  Its time step is capped at the kinetic one.
    """
    eps = list(config.get("sweep", "epsilons") if epsilons is None else epsilons)
    if len(eps) < 3:
        raise ConfigError("an epsilon sweep needs at least three epsilon values")
    p, yg, xg = config.params, config.y_grid, config.x_grid
    _require_quadratic(p, "the epsilon sweep")
    t_end, dt, flux = (config.get("sweep", k) for k in ("t_end", "dt", "hydro_flux"))
    notes: List[str] = []
    for e in eps:
        if e > LARGE_EPSILON:
            notes.append(f"epsilon={e} violates the scale-separation assumption")
            warnings.warn(f"epsilon sweep: epsilon={e} is not small", RuntimeWarning, stacklevel=2)
    timings = {}

    rho, ups = initial_profile(config, xg)
    t0 = time.perf_counter()
    ref, _ = run_hydro(hydro_state_from_moments(xg, rho, ups), p, t_end, yg,
                       config.numerics["cfl"], dt, flux)
    h_rho, h_w = np.asarray(ref.rho), np.asarray(ref.w)
    timings["hydro"] = time.perf_counter() - t0

    e_rho, e_w = [], []
    for e in eps:
        t0 = time.perf_counter()
        f0 = local_equilibrium_field(xg, yg, rho, ups, p, epsilon=e)
        f, _ = run_inhomogeneous(f0, p, t_end, dt, face_mean=config.numerics["face_mean"])
        mf = moments_field(f)
        e_rho.append(_l1_x(mf.rho, h_rho, xg.dx))
        e_w.append(_l1_x(quadrature(f.values * f.y_grid.nodes, f.y_grid), h_w, xg.dx))
        timings[f"kinetic_eps_{e!r}"] = time.perf_counter() - t0
    errs = [a + b for a, b in zip(e_rho, e_w)]
    order_ = float(np.polyfit(np.log(eps), np.log(errs), 1)[0])
    srt = np.argsort(eps)[::-1]
    ordered = np.asarray(errs)[srt]
    monotone = bool(np.all(np.diff(ordered) < 0))
    if not monotone:
        notes.append("moment errors are not monotone in epsilon")
        warnings.warn("epsilon sweep: non-monotone errors", RuntimeWarning, stacklevel=2)
    return SweepTable(eps, e_rho, e_w, errs, order_, monotone, notes, timings)


def _run_sweep(config: RunConfig):
    tab = epsilon_sweep(config)
    files = {"sweep.csv": (["epsilon", "err_rho", "err_w", "err_total"],
                           [tab.epsilons, tab.err_rho, tab.err_w, tab.errors])}
    return files, {"order": tab.order, "monotone": tab.monotone, "warnings": tab.warnings}, {}


# ---------------------------------------------------------------------------
# Particle / kinetic comparison
# ---------------------------------------------------------------------------

@dataclass
class CompareReport:
    N: int
    t_end: float
    ks_particles_kinetic: float
    ks_particles_reference: float
    ks_kinetic_reference: float
    ks_particles_reference_rescaled: float
    reference: str
    upsilon0: float
    martingale_z: float
    warnings: List[str]
    histogram: Distribution
    kinetic: Distribution
    reference_dist: Distribution

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "N", "t_end", "ks_particles_kinetic", "ks_particles_reference", "ks_kinetic_reference",
            "ks_particles_reference_rescaled", "reference", "upsilon0", "martingale_z", "warnings")}


def micro_meso_compare(config: RunConfig) -> CompareReport:
    """Particle and kinetic runs from the same initial law, compared by KS."""
    p, num, grid, ini = config.params, config.numerics, config.y_grid, config.initial
    vel = p.velocity
    if not (p.psi.is_global or (vel.kind == "constant" and vel.v0 == 0.0)):
        raise ConfigError("micro-meso comparison needs a homogeneous setting (global kernel or V = 0)")
    if ini["y_law"] == "constant":
        raise ConfigError("matched initial data need a wealth law with a density on the grid")
    notes: List[str] = []
    if ini["N"] < SMALL_N:
        notes.append(f"small ensemble N={ini['N']}: KS distances are dominated by sampling noise")

    ens0 = init_ensemble(ini["N"], position_law(config), wealth_law(config), num["seed"],
                         _x_period(config))
    ens, qv = _particle_run(config, ens0, num["t_end"], num["dt"])
    nu0 = initial_distribution(config, grid)
    kin, _, _ = relax_homogeneous(nu0, p, num["t_end"], config.get("compare", "kinetic_dt"),
                                  num["scheme"], num["face_mean"])
    kin = Distribution.from_values(grid, kin.values)
    ups0 = ens0.mean_wealth()

    if p.is_quadratic:
        alpha, beta = inverse_gamma_parameters(ups0, p)
        ref_cdf = lambda y: inverse_gamma_cdf(y, alpha, beta)
        _, beta_t = inverse_gamma_parameters(ens.mean_wealth(), p)
        rescaled = ks_samples(ens.Y, lambda y: inverse_gamma_cdf(y, alpha, beta_t))
        ref_dist, _ = inverse_gamma_equilibrium(mean_wealth(nu0), p, grid)
        reference = "inverse-gamma"
    else:
        fp = equilibrium_fixed_point(nu0, p, num["tol"], num["max_iter"], num["damping"])
        ref_dist = fp.nu_star
        ref_cdf = lambda y: distribution_cdf(ref_dist, y)
        rescaled = math.nan
        reference = "fixed-point"

    return CompareReport(
        N=ens.N, t_end=ens.time,
        ks_particles_kinetic=ks_samples(ens.Y, lambda y: distribution_cdf(kin, y)),
        ks_particles_reference=ks_samples(ens.Y, ref_cdf),
        ks_kinetic_reference=ks_distributions(kin, ref_dist),
        ks_particles_reference_rescaled=rescaled, reference=reference, upsilon0=ups0,
        martingale_z=(ens.mean_wealth() - ups0) / math.sqrt(qv) if qv > 0 else 0.0,
        warnings=notes, histogram=empirical_histogram(ens, grid), kinetic=kin, reference_dist=ref_dist)


def _run_compare(config: RunConfig):
    rep = micro_meso_compare(config)
    y = config.y_grid.nodes
    files = {"compare.csv": (["y", "nu_particles", "nu_kinetic", "nu_reference"],
                             [y, rep.histogram.values, rep.kinetic.values, rep.reference_dist.values])}
    return files, rep.as_dict(), {}


RUNNERS = {
    "equilibrium": _run_equilibrium,
    "kinetic-homogeneous": _run_kinetic_homogeneous,
    "kinetic-inhomogeneous": _run_kinetic_inhomogeneous,
    "particles": _run_particles,
    "hydro": _run_hydro,
    "invariants": _run_invariants,
    "epsilon-sweep": _run_sweep,
    "micro-meso-compare": _run_compare,
}


def run_experiment(config: RunConfig, out_dir=None) -> ArtifactSet:
    """Run the configured experiment and write its CSV files and metadata.json."""
    out = Path(out_dir if out_dir is not None else config.get("output", "dir"))
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    tables, results, conservation = RUNNERS[config.experiment](config)
    elapsed = time.perf_counter() - t0
    files = {}
    for name, (header, cols) in tables.items():
        files[name] = write_csv(out / name, header, cols)
    meta = {
        "experiment": config.experiment,
        "version": __version__,
        "config": config.resolved(),
        "results": results,
        "conservation": conservation,
        "timings": {"wall_seconds": elapsed},
        "files": sorted(files),
    }
    files["metadata.json"] = write_json(out / "metadata.json", meta)
    return ArtifactSet(out, files, meta, 0)
