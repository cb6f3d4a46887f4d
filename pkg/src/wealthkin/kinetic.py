"""Homogeneous and ε-scaled inhomogeneous kinetic solvers.

The collision operator is discretized in the divergence form
∂_y( d y² M_Ξ ∂_y(ν/M_Ξ) ) on the wealth grid.  Face fluxes use exponential
(Scharfetter-Gummel) fitting by default:

    J_f = D_f ( B(−δ_f) ν_{i+1} − B(δ_f) ν_i ),  D_f = d y_f²/Δy_i,
    δ_f = (Ξ_{i+1} − Ξ_i)/d,  B(x) = x/(e^x − 1),

which vanishes exactly on the discrete Gibbs measure exp(−Ξ/d), yields an
M-matrix and conserves mass by telescoping.  ``face_mean="geometric"``
selects the √(M_i M_{i+1}) face average instead.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import solve_banded

from .core import (Distribution, ModelParams, WealthGrid, XGrid, check_same_grid,
                   quadrature)
from .equilibrium import (CostProfile, inverse_gamma_parameters, trading_cost_arrays,
                          twisted_arrays)
from .errors import CFLError, GridMismatchError, NumericalAbort

FACE_MEANS = ("sg", "geometric")
RHO_FLOOR = 1e-14
TRANSPORT_CFL = 0.9


def bernoulli(x):
    """B(x) = x/(e^x − 1) with B(0) = 1, stable for large |x|."""
    x = np.asarray(x, dtype=float)
    out = np.ones_like(x)
    nz = x != 0
    with np.errstate(over="ignore"):
        out[nz] = x[nz] / np.expm1(x[nz])
    return out


@dataclass(frozen=True, eq=False)
class CollisionOperator:
    """Tridiagonal generator A with rate = A ν (batched along leading axes).

    ``lower[..., i]`` multiplies ν_{i−1}, ``upper[..., i]`` multiplies ν_{i+1}.
    """

    grid: WealthGrid
    lower: np.ndarray
    diag: np.ndarray
    upper: np.ndarray
    underflow_faces: int = 0

    def apply(self, values):
        v = np.asarray(values, dtype=float)
        out = self.diag * v
        out[..., 1:] += self.lower[..., 1:] * v[..., :-1]
        out[..., :-1] += self.upper[..., :-1] * v[..., 1:]
        return out

    @property
    def explicit_dt_limit(self) -> float:
        """Largest explicit-Euler step keeping the update a positive map."""
        return float(1.0 / np.max(-self.diag))

    def banded(self, dt: float, index=None) -> np.ndarray:
        """(I − dt A) in LAPACK banded layout for one member of the batch."""
        lo, di, up = (a if index is None else a[index] for a in (self.lower, self.diag, self.upper))
        ab = np.zeros((3, di.size))
        ab[0, 1:] = -dt * up[:-1]
        ab[1] = 1.0 - dt * di
        ab[2, :-1] = -dt * lo[1:]
        return ab


def face_coefficients(xi, grid: WealthGrid, d: float, face_mean: str = "sg"):
    """(c_minus, c_plus, bad) per face: J_f = c_plus ν_{i+1} − c_minus ν_i."""
    if face_mean not in FACE_MEANS:
        raise ValueError(f"unknown face mean {face_mean!r}")
    y = grid.nodes
    yf = 0.5 * (y[1:] + y[:-1])
    D = d * yf * yf / np.diff(y)
    delta = np.diff(np.asarray(xi, dtype=float), axis=-1) / d
    with np.errstate(over="ignore"):
        if face_mean == "sg":
            c_plus, c_minus = D * bernoulli(-delta), D * bernoulli(delta)
        else:
            c_plus, c_minus = D * np.exp(0.5 * delta), D * np.exp(-0.5 * delta)
    bad = ~(np.isfinite(c_plus) & np.isfinite(c_minus)) | (c_plus == 0) | (c_minus == 0)
    if np.any(bad):
        # an under- or overflowed face carries no flux
        c_plus = np.where(bad, 0.0, c_plus)
        c_minus = np.where(bad, 0.0, c_minus)
    return c_minus, c_plus, bad


def collision_operator_from_xi(xi, grid: WealthGrid, d: float, face_mean: str = "sg") -> CollisionOperator:
    c_minus, c_plus, bad = face_coefficients(xi, grid, d, face_mean)
    w = grid.weights
    shape = c_minus.shape[:-1] + (grid.size,)
    lower, diag, upper = np.zeros(shape), np.zeros(shape), np.zeros(shape)
    upper[..., :-1] = c_plus / w[:-1]
    diag[..., :-1] -= c_minus / w[:-1]
    diag[..., 1:] -= c_plus / w[1:]
    lower[..., 1:] = c_minus / w[1:]
    return CollisionOperator(grid, lower, diag, upper, int(np.count_nonzero(bad)))


def _xi_batch(values, grid: WealthGrid, params: ModelParams, kappa):
    _, dp, d2p = trading_cost_arrays(values, grid, params.phi, kappa)
    return twisted_arrays(grid, dp, d2p, params.d)


def collision_operator(nu: Distribution, params: ModelParams, face_mean: str = "sg") -> CollisionOperator:
    """Linearization 𝒬_{Ξ_ν} frozen at ν."""
    xi = _xi_batch(nu.values / nu.mass, nu.grid, params, params.kappa)
    return collision_operator_from_xi(xi, nu.grid, params.d, face_mean)


def collision_apply(nu: Distribution, params: ModelParams, face_mean: str = "sg") -> np.ndarray:
    """Q(ν) = 𝒬_{Ξ_ν}(ν) as a rate array on the wealth grid."""
    return collision_operator(nu, params, face_mean).apply(nu.values)


def linear_collision_apply(nu: Distribution, xi: CostProfile, params: ModelParams,
                           face_mean: str = "sg") -> np.ndarray:
    """𝒬_Ξ(ν) for a prescribed twisted cost Ξ."""
    check_same_grid(nu.grid, xi.grid)
    return collision_operator_from_xi(xi.values, nu.grid, params.d, face_mean).apply(nu.values)


def explicit_dt_limit(nu: Distribution, params: ModelParams, face_mean: str = "sg") -> float:
    return collision_operator(nu, params, face_mean).explicit_dt_limit


def _as_distribution(grid, values, normalized_hint: bool) -> Distribution:
    return Distribution(grid, np.maximum(values, 0.0))


def step_homogeneous(nu: Distribution, dt: float, params: ModelParams,
                     scheme: str = "semi-implicit", face_mean: str = "sg") -> Distribution:
    """Advance ∂_tν = Q(ν) by one step with Ξ_ν frozen at the step start."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    op = collision_operator(nu, params, face_mean)
    if scheme == "explicit-euler":
        new = nu.values + dt * op.apply(nu.values)
        if np.any(new < 0):
            raise CFLError(
                f"explicit step dt={dt:g} produced negative density (stable limit "
                f"{op.explicit_dt_limit:.3g}); use the semi-implicit scheme",
                state={"dt": dt, "dt_limit": op.explicit_dt_limit})
        return Distribution(nu.grid, new)
    if scheme != "semi-implicit":
        raise ValueError(f"unknown scheme {scheme!r}")
    new = solve_banded((1, 1), op.banded(dt), nu.values, check_finite=False)
    return _as_distribution(nu.grid, new, True)


def relax_homogeneous(nu0: Distribution, params: ModelParams, t_end: float, dt: float,
                      scheme: str = "semi-implicit", face_mean: str = "sg", record_every: int = 0):
    """Integrate to t_end with a fixed step; returns (final, snapshots, times)."""
    n = max(1, int(round(t_end / dt)))
    nu = nu0
    snaps, times = [nu0], [0.0]
    for k in range(1, n + 1):
        nu = step_homogeneous(nu, dt, params, scheme, face_mean)
        if record_every and (k % record_every == 0 or k == n):
            snaps.append(nu)
            times.append(k * dt)
    if not record_every:
        snaps.append(nu)
        times.append(n * dt)
    return nu, snaps, times


# ---------------------------------------------------------------------------
# Inhomogeneous problem
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class KineticField:
    """f(x_k, y_j) on an XGrid × WealthGrid (density per unit x per unit y)."""

    x_grid: XGrid
    y_grid: WealthGrid
    values: np.ndarray
    epsilon: float
    time: float = 0.0
    rho_floor: Optional[float] = None

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != (self.x_grid.cells, self.y_grid.size):
            raise GridMismatchError(f"field shape {v.shape} does not match the grids")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise NumericalAbort("kinetic field must be finite and nonnegative",
                                 state={"min": float(np.nanmin(v))})
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        if self.rho_floor is None:
            rho = quadrature(v, self.y_grid)
            object.__setattr__(self, "rho_floor", RHO_FLOOR * float(np.max(rho, initial=0.0)))

    def evolve(self, values, dt: float) -> "KineticField":
        return KineticField(self.x_grid, self.y_grid, values, self.epsilon, self.time + dt, self.rho_floor)

    @property
    def total_mass(self) -> float:
        return float(np.sum(quadrature(self.values, self.y_grid)) * self.x_grid.dx)

    @property
    def total_wealth(self) -> float:
        return float(np.sum(quadrature(self.values * self.y_grid.nodes, self.y_grid)) * self.x_grid.dx)


@dataclass(frozen=True, eq=False)
class MomentField:
    rho: np.ndarray
    upsilon: np.ndarray
    defined: np.ndarray


def moments_field(f: KineticField, floor: Optional[float] = None) -> MomentField:
    """Per-cell ρ = ∫f dy and Υ = ∫y f dy / ρ (NaN where ρ ≤ floor)."""
    grid = f.y_grid
    rho = quadrature(f.values, grid)
    w = quadrature(f.values * grid.nodes, grid)
    floor = f.rho_floor if floor is None else floor
    defined = rho > floor
    ups = np.full(rho.shape, np.nan)
    ups[defined] = w[defined] / rho[defined]
    return MomentField(rho, ups, defined)


def local_equilibrium_field(x_grid: XGrid, y_grid: WealthGrid, rho, upsilon,
                            params: ModelParams, epsilon: Optional[float] = None) -> KineticField:
    """f = ρ(x) M_{Υ(x)} with the quadratic-case inverse-gamma equilibria,
    renormalized on the truncated grid so the cell density is exactly ρ."""
    rho = np.broadcast_to(np.asarray(rho, dtype=float), (x_grid.cells,))
    ups = np.broadcast_to(np.asarray(upsilon, dtype=float), (x_grid.cells,))
    kap = params.xi.local_kappa(rho, params.kappa)
    y = y_grid.nodes
    vals = np.zeros((x_grid.cells, y_grid.size))
    for k in range(x_grid.cells):
        if rho[k] <= 0:
            continue
        p = params.with_(kappa=float(kap[k]))
        a, b = inverse_gamma_parameters(ups[k], p)
        logm = -(1 + a) * np.log(y) - b / y
        m = np.exp(logm - logm.max())
        vals[k] = rho[k] * m / quadrature(m, y_grid)
    eps = params.epsilon if epsilon is None else epsilon
    return KineticField(x_grid, y_grid, vals, eps)


def _face_velocity(x_grid: XGrid, y_grid: WealthGrid, params: ModelParams) -> np.ndarray:
    """V at every x-face (cells+1) and wealth node."""
    xf = x_grid.faces
    return params.velocity(xf[:, None], y_grid.nodes[None, :])


def _upwind_step(f: np.ndarray, vf: np.ndarray, tau, dx: float, bc: str) -> np.ndarray:
    """One upwind step of ∂_t f + ∂_x(V f) = 0; tau broadcasts over y."""
    if bc == "periodic":
        left = np.roll(f, 1, axis=0)
        # face k sits between cells k−1 and k; face 0 and face N coincide
        v = vf[:-1]
        flux = np.maximum(v, 0) * left + np.minimum(v, 0) * f
        flux_next = np.roll(flux, -1, axis=0)
    else:
        ext = np.concatenate([f[:1], f, f[-1:]], axis=0)
        flux_all = np.maximum(vf, 0) * ext[:-1] + np.minimum(vf, 0) * ext[1:]
        flux, flux_next = flux_all[:-1], flux_all[1:]
    return f - tau / dx * (flux_next - flux)


def transport(f: np.ndarray, dt: float, x_grid: XGrid, vf: np.ndarray, substeps: bool = True) -> np.ndarray:
    """Advance the free transport over dt per wealth slice.

    With ``substeps`` each slice is sub-cycled so that its own CFL number is
    at most 0.9; otherwise a CFL violation raises.
    """
    dx = x_grid.dx
    vmax = np.max(np.abs(vf), axis=0)
    cfl = vmax * dt / dx
    if not substeps:
        if np.max(cfl) > TRANSPORT_CFL:
            raise CFLError(f"transport CFL {np.max(cfl):.3g} exceeds {TRANSPORT_CFL}",
                           state={"dt": dt, "dx": dx, "vmax": float(np.max(vmax))})
        return _upwind_step(f, vf, dt, dx, x_grid.bc)
    n_sub = np.maximum(1, np.ceil(cfl / TRANSPORT_CFL - 1e-12)).astype(int)
    tau = dt / n_sub
    out = f.copy()
    for k in range(1, int(n_sub.max()) + 1):
        active = n_sub >= k
        if active.all():
            out = _upwind_step(out, vf, tau, dx, x_grid.bc)
        else:
            out[:, active] = _upwind_step(out[:, active], vf[:, active], tau[active], dx, x_grid.bc)
    return out


def collide_field(values: np.ndarray, dt_eff: float, y_grid: WealthGrid, params: ModelParams,
                  rho_floor: float, face_mean: str = "sg") -> np.ndarray:
    """Semi-implicit collision step of length dt_eff in every non-empty x-cell."""
    rho = quadrature(values, y_grid)
    active = np.flatnonzero(rho > rho_floor)
    out = values.copy()
    if active.size == 0:
        return out
    nu = values[active] / rho[active, None]
    kap = params.xi.local_kappa(rho[active], params.kappa)
    xi = _xi_batch(nu, y_grid, params, kap)
    op = collision_operator_from_xi(xi, y_grid, params.d, face_mean)
    for n, k in enumerate(active):
        out[k] = solve_banded((1, 1), op.banded(dt_eff, n), values[k], check_finite=False)
    return np.maximum(out, 0.0)


def step_inhomogeneous(f: KineticField, dt: float, params: ModelParams,
                       transport_substeps: bool = True, face_mean: str = "sg") -> KineticField:
    """Strang step: half transport, collision over dt/ε, half transport."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    vf = _face_velocity(f.x_grid, f.y_grid, params)
    v = transport(np.array(f.values), 0.5 * dt, f.x_grid, vf, transport_substeps)
    v = collide_field(v, dt / f.epsilon, f.y_grid, params, f.rho_floor, face_mean)
    v = transport(v, 0.5 * dt, f.x_grid, vf, transport_substeps)
    return f.evolve(v, dt)


def run_inhomogeneous(f0: KineticField, params: ModelParams, t_end: float, dt: float,
                      transport_substeps: bool = True, face_mean: str = "sg"):
    """Integrate to t_end with steps of at most dt; returns (field, mass ledger)."""
    n = max(1, int(math.ceil(t_end / dt - 1e-12)))
    h = t_end / n
    f = f0
    masses = [f0.total_mass]
    vf = _face_velocity(f0.x_grid, f0.y_grid, params)
    for _ in range(n):
        v = transport(np.array(f.values), 0.5 * h, f.x_grid, vf, transport_substeps)
        v = collide_field(v, h / f.epsilon, f.y_grid, params, f.rho_floor, face_mean)
        v = transport(v, 0.5 * h, f.x_grid, vf, transport_substeps)
        f = f.evolve(v, h)
        masses.append(f.total_mass)
    return f, np.array(masses)
