"""Macroscopic (ρ, w = ρΥ) conservation system with quadratic-case closure.

Fluxes are F(ρ, w) = (ρ u(Υ), ρ 𝓔(Υ)) with u = ∫V M_Υ dy and 𝓔 = ∫y V M_Υ dy,
evaluated by quadrature against the inverse-gamma equilibrium sampled on the
wealth grid (the same grid and renormalization the kinetic solver uses).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np

from .core import ModelParams, WealthGrid, XGrid, build_grid, quadrature
from .equilibrium import CostProfile, gibbs_measure, inverse_gamma_parameters
from .errors import CFLError, ClosureError, ConfigError, NumericalAbort

HYDRO_CFL = 0.45
VACUUM_FLOOR = 1e-12
DIFF_STEP = 1e-4
DEGENERACY_TOL = 1e-6


@lru_cache(maxsize=4)
def default_closure_grid() -> WealthGrid:
    """Wide grid on which truncation of the closure moments is negligible."""
    return build_grid(1e-4, 1e8, 8192)


@dataclass(frozen=True)
class ClosureFluxes:
    u: float
    e: float


def _require_constant_kappa(params: ModelParams):
    if not params.xi.is_constant:
        raise ConfigError("the macroscopic closure is implemented for constant rho*xi(rho) = kappa only")


def _equilibria(ups: np.ndarray, params: ModelParams, grid: WealthGrid) -> np.ndarray:
    """Rows M_Υ on the grid for every Υ in ``ups`` (renormalized)."""
    alpha, _ = inverse_gamma_parameters(1.0, params)
    beta = params.kappa * ups / params.d
    y = grid.nodes
    logm = -(1 + alpha) * np.log(y)[None, :] - beta[:, None] / y[None, :]
    m = np.exp(logm - logm.max(axis=1, keepdims=True))
    return m / quadrature(m, grid)[:, None]


def _tail_check(integrand: np.ndarray, grid: WealthGrid):
    """Raise when y·V·M decays no faster than 1/y at the top of the grid."""
    y = grid.nodes
    top, prev = integrand[..., -1], integrand[..., -2]
    ok = (top > 0) & (prev > 0)
    if not np.any(ok):
        return
    slope = np.log(top[ok] / prev[ok]) / math.log(y[-1] / y[-2])
    if np.any(slope >= -1.0):
        raise ClosureError(
            "closure integral does not converge: the integrand of the wealth flux decays "
            "like y^s with s >= -1 (the quadratic closure needs kappa > d for V growing like y)",
            state={"tail_slope": float(np.max(slope))})


def _separable_moments(ups: np.ndarray, params: ModelParams, grid: WealthGrid):
    """(∫g M_Υ, ∫y g M_Υ) for V = c(x) g(y): g = 1 (constant) or g = y (linear)."""
    y = grid.nodes
    uniq, inv = np.unique(ups, return_inverse=True)
    M = _equilibria(uniq, params, grid)
    g = np.ones_like(y) if params.velocity.kind == "constant" else y
    _tail_check(y * g * M, grid)
    return quadrature(g * M, grid)[inv], quadrature(y * g * M, grid)[inv]


def closure_arrays(x, ups, params: ModelParams, grid: WealthGrid):
    """Vectorized (u, 𝓔) for matching arrays of positions and mean wealths.

    Equal (x, Υ) pairs give bitwise-equal results: the equilibria are
    evaluated once per distinct Υ.
    """
    _require_constant_kappa(params)
    if params.kappa <= 0:
        raise ClosureError("kappa <= 0: the quadratic equilibrium is not normalizable")
    x = np.asarray(x, dtype=float)
    ups = np.asarray(ups, dtype=float)
    x, ups = np.broadcast_arrays(x, ups)
    if np.any(~(ups > 0)):
        raise ValueError("mean wealth must be positive in the closure")
    vel = params.velocity
    y = grid.nodes
    if vel.kind == "tabulated":
        pairs = np.stack([x.ravel(), ups.ravel()], axis=1)
        uniq, inv = np.unique(pairs, axis=0, return_inverse=True)
        M = _equilibria(uniq[:, 1], params, grid)
        V = vel(uniq[:, :1], y[None, :])
        _tail_check(y * V * M, grid)
        u = quadrature(V * M, grid)[inv]
        e = quadrature(y * V * M, grid)[inv]
        return u.reshape(x.shape), e.reshape(x.shape)
    p0, p1 = _separable_moments(ups.ravel(), params, grid)
    c = vel.coefficient(x.ravel()) if vel.kind == "linear" else vel.v0
    u, e = c * p0, c * p1
    return u.reshape(x.shape), e.reshape(x.shape)


def closure_fluxes(x: float, upsilon: float, params: ModelParams,
                   grid: Optional[WealthGrid] = None) -> ClosureFluxes:
    """u = ∫V M_Υ dy and 𝓔 = ∫y V M_Υ dy at one (x, Υ)."""
    grid = grid or default_closure_grid()
    u, e = closure_arrays(np.array([x]), np.array([upsilon]), params, grid)
    return ClosureFluxes(float(u[0]), float(e[0]))


def closure_from_profile(x: float, xi: CostProfile, params: ModelParams) -> ClosureFluxes:
    """Diagnostic (u, 𝓔) against a supplied Gibbs equilibrium M_Ξ."""
    M, _ = gibbs_measure(xi, params)
    y = xi.grid.nodes
    V = params.velocity(np.full(y.shape, float(x)), y)
    _tail_check(y * V * M.values, xi.grid)
    return ClosureFluxes(quadrature(V * M.values, xi.grid), quadrature(y * V * M.values, xi.grid))


def _closure_with_derivatives(x, ups, params, grid):
    h = DIFF_STEP * ups
    xs = np.concatenate([x, x, x])
    us = np.concatenate([ups, ups + h, ups - h])
    u, e = closure_arrays(xs, us, params, grid)
    n = ups.size
    u0, up, um = u[:n], u[n:2 * n], u[2 * n:]
    e0, ep, em = e[:n], e[n:2 * n], e[2 * n:]
    return u0, e0, (up - um) / (2 * h), (ep - em) / (2 * h)


@dataclass(frozen=True)
class JacobianResult:
    matrix: np.ndarray
    eigenvalues: np.ndarray
    hyperbolic: bool
    discriminant: float
    literal_inequality: bool
    identity_inequality: bool

    @property
    def literal_agrees(self) -> bool:
        return self.literal_inequality == (self.discriminant > 0)


def _eigen_2x2(T, D):
    disc = T * T - 4 * D
    root = np.sqrt(np.maximum(disc, 0.0))
    return disc, (T - root) / 2, (T + root) / 2


def flux_jacobian(rho: float, w: float, x: float, params: ModelParams,
                  grid: Optional[WealthGrid] = None) -> JacobianResult:
    """Jacobian of (ρu(Υ), ρ𝓔(Υ)) in (ρ, w) with closed-form eigenvalues.

    Trace T = u − Υu' + 𝓔' and determinant D = u𝓔' − u'𝓔, so the
    discriminant is T² − 4u²(𝓔/u)'.  ``literal_inequality`` evaluates the
    condition T² > 4u²(u/𝓔)' exactly as commonly quoted, and
    ``identity_inequality`` the version with (𝓔/u)' that equals the
    discriminant; each derivative is a centered difference in Υ.
    """
    if not rho > 0:
        raise NumericalAbort("vacuum cell: the flux Jacobian needs rho > 0", state={"rho": rho})
    grid = grid or default_closure_grid()
    ups = w / rho
    u, e, du, de = (float(v[0]) for v in _closure_with_derivatives(
        np.array([x], float), np.array([ups], float), params, grid))
    J = np.array([[u - ups * du, du], [e - ups * de, de]])
    T = u - ups * du + de
    D = u * de - du * e
    disc, l1, l2 = _eigen_2x2(T, D)
    if disc < 0:
        eig = np.array([complex(T / 2, -math.sqrt(-disc) / 2), complex(T / 2, math.sqrt(-disc) / 2)])
    else:
        eig = np.array([l1, l2])
    scale = max(1.0, abs(l1), abs(l2))
    hyperbolic = bool(disc > 0 and (l2 - l1) > DEGENERACY_TOL * scale)

    h = DIFF_STEP * ups
    (up_, um_), (ep_, em_) = closure_arrays(np.array([x, x]), np.array([ups + h, ups - h]), params, grid)
    d_u_over_e = (up_ / ep_ - um_ / em_) / (2 * h)
    d_e_over_u = (ep_ / up_ - em_ / um_) / (2 * h)
    literal = bool(T * T > 4 * u * u * d_u_over_e)
    ident = bool(T * T > 4 * u * u * d_e_over_u)
    if abs(disc) > 1e-6 * max(T * T, 1e-300) and ident != (disc > 0):
        raise NumericalAbort("hyperbolicity identity disagrees with the eigenvalue discriminant",
                             state={"T": T, "D": D, "upsilon": ups})
    return JacobianResult(J, eig, hyperbolic, float(disc), literal, ident)


# ---------------------------------------------------------------------------
# Finite-volume solver
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class HydroState:
    x_grid: XGrid
    rho: np.ndarray
    w: np.ndarray
    time: float = 0.0
    rho_floor: Optional[float] = None
    upsilon_carry: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in ("rho", "w"):
            arr = np.array(getattr(self, name), dtype=float)
            if arr.shape != (self.x_grid.cells,):
                raise ValueError(f"{name} must have one value per x-cell")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if np.any(self.rho < 0) or not np.all(np.isfinite(self.rho)) or not np.all(np.isfinite(self.w)):
            raise NumericalAbort("invalid hydro state", state=self.dump())
        if self.rho_floor is None:
            object.__setattr__(self, "rho_floor", VACUUM_FLOOR * float(self.rho.max(initial=0.0)))
        valid = self.rho > self.rho_floor
        ups = np.where(valid, self.w / np.where(valid, self.rho, 1.0), np.nan)
        if self.upsilon_carry is not None:
            ups = np.where(valid, ups, self.upsilon_carry)
        elif not np.all(valid):
            fill = np.nanmean(ups) if np.any(valid) else 1.0
            ups = np.where(valid, ups, fill)
        ups.setflags(write=False)
        object.__setattr__(self, "upsilon_carry", ups)

    @property
    def valid(self) -> np.ndarray:
        return self.rho > self.rho_floor

    @property
    def upsilon(self) -> np.ndarray:
        return self.upsilon_carry

    def totals(self):
        dx = self.x_grid.dx
        return float(np.sum(self.rho) * dx), float(np.sum(self.w) * dx)

    def dump(self) -> dict:
        return {"time": self.time, "rho": np.asarray(self.rho).tolist(), "w": np.asarray(self.w).tolist()}


def hydro_state_from_moments(x_grid: XGrid, rho, upsilon) -> HydroState:
    rho = np.broadcast_to(np.asarray(rho, dtype=float), (x_grid.cells,))
    ups = np.broadcast_to(np.asarray(upsilon, dtype=float), (x_grid.cells,))
    return HydroState(x_grid, rho, rho * ups)


def cell_fluxes(state: HydroState, params: ModelParams, grid: WealthGrid):
    """Physical fluxes and max |eigenvalue| per cell (zero in vacuum cells)."""
    x = state.x_grid.centers
    ups = state.upsilon
    u, e, du, de = _closure_with_derivatives(x, ups, params, grid)
    T = u - ups * du + de
    D = u * de - du * e
    disc, l1, l2 = _eigen_2x2(T, D)
    speed = np.where(disc >= 0, np.maximum(np.abs(l1), np.abs(l2)), np.sqrt(np.maximum(D, 0.0)))
    valid = state.valid
    F1 = np.where(valid, state.rho * u, 0.0)
    F2 = np.where(valid, state.rho * e, 0.0)
    return F1, F2, np.where(valid, speed, 0.0)


def max_wave_speed(state: HydroState, params: ModelParams, grid: WealthGrid) -> float:
    return float(np.max(cell_fluxes(state, params, grid)[2]))


def stable_dt(state: HydroState, params: ModelParams, grid: WealthGrid, cfl: float = HYDRO_CFL) -> float:
    s = max_wave_speed(state, params, grid)
    return math.inf if s == 0 else cfl * state.x_grid.dx / s


def _kinetic_face_fluxes(state: HydroState, params: ModelParams, grid: WealthGrid):
    """Flux-vector splitting by the sign of the velocity: each face takes
    ∫V⁺(1, y)ρM from the left cell and ∫V⁻(1, y)ρM from the right cell.

    Returns the flux differences (d1, d2) per cell.
    """
    vel = params.velocity
    if vel.kind == "tabulated":
        raise ConfigError("the kinetic flux needs a constant or linear velocity field")
    xg = state.x_grid
    p0, p1 = _separable_moments(np.asarray(state.upsilon), params, grid)
    valid = state.valid
    q0 = np.where(valid, state.rho * p0, 0.0)
    q1 = np.where(valid, state.rho * p1, 0.0)
    xf = xg.faces
    c = vel.coefficient(xf) if vel.kind == "linear" else np.full(xf.shape, vel.v0)
    cp, cm = np.maximum(c, 0.0), np.minimum(c, 0.0)
    if xg.bc == "periodic":
        L = lambda q: np.roll(q, 1)
        # face k sits between cells k−1 and k
        G1 = cp[:-1] * L(q0) + cm[:-1] * q0
        G2 = cp[:-1] * L(q1) + cm[:-1] * q1
        return np.roll(G1, -1) - G1, np.roll(G2, -1) - G2
    ext = lambda v: np.concatenate([v[:1], v, v[-1:]])
    e0, e1 = ext(q0), ext(q1)
    G1 = cp * e0[:-1] + cm * e0[1:]
    G2 = cp * e1[:-1] + cm * e1[1:]
    return G1[1:] - G1[:-1], G2[1:] - G2[:-1]


def hydro_step(state: HydroState, dt: float, params: ModelParams,
               grid: Optional[WealthGrid] = None, cfl: float = HYDRO_CFL,
               flux: str = "rusanov") -> HydroState:
    """Finite-volume step for (ρ, w).

    ``flux="rusanov"`` is the local Lax-Friedrichs flux.  ``flux="kinetic"``
    is the velocity-sign splitting, i.e. the zero-ε limit of the upwind
    kinetic transport, which makes kinetic and macroscopic runs share their
    spatial discretization.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    if flux not in ("rusanov", "kinetic"):
        raise ConfigError(f"unknown hydro flux {flux!r}")
    grid = grid or default_closure_grid()
    xg = state.x_grid
    F1, F2, s = cell_fluxes(state, params, grid)
    number = dt * float(np.max(s)) / xg.dx
    if number > cfl * (1 + 1e-12):
        raise CFLError(f"hydro CFL number {number:.4g} exceeds {cfl}",
                       state={"dt": dt, "dx": xg.dx, "max_speed": float(np.max(s))})
    rho, w = np.asarray(state.rho), np.asarray(state.w)
    if flux == "kinetic":
        d1, d2 = _kinetic_face_fluxes(state, params, grid)
    elif xg.bc == "periodic":
        nb = lambda a: np.roll(a, -1)
        R = [nb(a) for a in (rho, w, F1, F2, s)]
        a = np.maximum(s, R[4])
        G1 = 0.5 * (F1 + R[2]) - 0.5 * a * (R[0] - rho)
        G2 = 0.5 * (F2 + R[3]) - 0.5 * a * (R[1] - w)
        # G[k] is the flux through the right face of cell k
        d1 = G1 - np.roll(G1, 1)
        d2 = G2 - np.roll(G2, 1)
    else:
        ext = lambda v: np.concatenate([v[:1], v, v[-1:]])
        er, ew, e1, e2, es = (ext(v) for v in (rho, w, F1, F2, s))
        a = np.maximum(es[:-1], es[1:])
        G1 = 0.5 * (e1[:-1] + e1[1:]) - 0.5 * a * (er[1:] - er[:-1])
        G2 = 0.5 * (e2[:-1] + e2[1:]) - 0.5 * a * (ew[1:] - ew[:-1])
        d1 = G1[1:] - G1[:-1]
        d2 = G2[1:] - G2[:-1]
    lam = dt / xg.dx
    rho_new = rho - lam * d1
    w_new = w - lam * d2
    if np.any(rho_new < 0) or not np.all(np.isfinite(rho_new)):
        raise NumericalAbort("negative density after hydro update; reduce dt or check the closure",
                             state=state.dump())
    return HydroState(xg, rho_new, w_new, state.time + dt, state.rho_floor, state.upsilon_carry)


def run_hydro(state: HydroState, params: ModelParams, t_end: float,
              grid: Optional[WealthGrid] = None, cfl: float = HYDRO_CFL, dt_max: float = math.inf,
              flux: str = "rusanov"):
    """Advance to t_end with adaptive CFL steps; returns (state, ledger)."""
    grid = grid or default_closure_grid()
    ledger = {"steps": 0, "cfl": [], "mass": [state.totals()[0]], "wealth": [state.totals()[1]]}
    while state.time < t_end * (1 - 1e-14):
        speed = max_wave_speed(state, params, grid)
        dt = cfl * state.x_grid.dx / speed if speed > 0 else math.inf
        dt = min(dt, dt_max, t_end - state.time)
        state = hydro_step(state, dt, params, grid, cfl, flux)
        ledger["steps"] += 1
        ledger["cfl"].append(dt * speed / state.x_grid.dx)
        m, wl = state.totals()
        ledger["mass"].append(m)
        ledger["wealth"].append(wl)
    return state, ledger
