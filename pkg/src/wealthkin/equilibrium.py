"""Trading cost, twisted cost, Gibbs measures and the self-consistent equilibrium.

Conventions
-----------
* Φ_ν(y) = κ ∫ φ(y − y') ν(y') dy' is evaluated together with its first two
  y-derivatives.  For polynomial potentials the convolution is expanded in the
  moments of ν (algebraically identical to direct summation, O(G) instead of
  O(G²)); tabulated potentials use direct summation.
* Ξ is built from ∂_yΞ = Φ'/y² + 2d/y by integrating a cubic Hermite
  interpolant of Φ' against 1/y² exactly on every cell, and is anchored to
  zero at ``grid.ref_index``.
* The fixed-point iteration keeps the mean wealth of the initial datum fixed
  through a scalar multiplier λ on 1/y (see ``equilibrium_fixed_point``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.optimize import brentq
from scipy.special import comb, gammaincc, gammaln

from .core import (Distribution, ModelParams, TradingPotential, WealthGrid,
                   check_same_grid, quadrature, warn)
from .errors import EquilibriumError, GridMismatchError

COST_KINDS = ("trading", "twisted", "augmented")
SUPPORT_THRESHOLD = 1e-12


@dataclass(frozen=True, eq=False)
class CostProfile:
    """Scalar cost on a wealth grid.

    ``derivative`` / ``second_derivative`` are optional exact y-derivatives
    carried along by ``trading_cost`` so that ``twisted_cost`` need not
    difference the profile numerically.
    """

    grid: WealthGrid
    values: np.ndarray
    kind: str
    derivative: Optional[np.ndarray] = None
    second_derivative: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in COST_KINDS:
            raise ValueError(f"unknown cost kind {self.kind!r}")
        for name in ("values", "derivative", "second_derivative"):
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = np.array(arr, dtype=float)
            if arr.shape != (self.grid.size,):
                raise GridMismatchError(f"{name} shape {arr.shape} does not match grid")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not np.all(np.isfinite(self.values[1:-1])):
            raise EquilibriumError(f"{self.kind} cost is not finite at interior nodes")

    def shifted(self, c: float) -> "CostProfile":
        return CostProfile(self.grid, self.values + c, self.kind,
                           self.derivative, self.second_derivative)


@dataclass(frozen=True, eq=False)
class EquilibriumResult:
    nu_star: Distribution
    xi_star: CostProfile
    iterations: int
    residual: float
    converged: bool
    mean_wealth: float
    self_consistency: float
    unconstrained_residual: float
    wealth_multiplier: float
    history: tuple = field(default=(), repr=False)


# ---------------------------------------------------------------------------
# Trading cost
# ---------------------------------------------------------------------------

def _poly_coeffs(phi: TradingPotential) -> Optional[np.ndarray]:
    """Coefficients of φ in powers of s (not s²), or None for tabulated φ."""
    if phi.kind == "quadratic":
        return np.array([0.0, 0.0, 0.5])
    if phi.kind == "even-polynomial":
        c = np.zeros(2 * len(phi.coeffs) - 1)
        c[::2] = phi.coeffs
        return c
    return None


def _cost_poly_moments(values: np.ndarray, grid: WealthGrid, coeffs: np.ndarray, kappa):
    """Polynomial coefficients in y of κ∫φ(y−y')ν(y')dy', batched over rows.

    φ(y−y') = Σ_n c_n Σ_m C(n,m) y^{n−m} (−y')^m, so the y^p coefficient is
    κ Σ_n c_n C(n, n−p) (−1)^{n−p} M_{n−p} with M_m = ∫ y^m ν dy.
    """
    deg = coeffs.size - 1
    pw = grid.nodes[None, :] ** np.arange(deg + 1)[:, None]          # (deg+1, G)
    moments = values @ (pw * grid.weights).T                          # (..., deg+1)
    out = np.zeros(values.shape[:-1] + (deg + 1,))
    for n, cn in enumerate(coeffs):
        if cn == 0.0:
            continue
        for p in range(n + 1):
            m = n - p
            out[..., p] += cn * comb(n, m, exact=True) * (-1) ** m * moments[..., m]
    return out * np.asarray(kappa, dtype=float)[..., None]


def _polyval_rows(coef: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Evaluate a batch of polynomials (rows of coef) at y by Horner."""
    out = np.zeros(coef.shape[:-1] + y.shape)
    for k in range(coef.shape[-1] - 1, -1, -1):
        out = out * y + coef[..., k, None]
    return out


def _direct_cost(values: np.ndarray, grid: WealthGrid, phi: TradingPotential, kappa, block: int = 512):
    y, w = grid.nodes, grid.weights
    vw = values * w
    shape = values.shape[:-1] + (grid.size,)
    out = [np.empty(shape) for _ in range(3)]
    for i0 in range(0, grid.size, block):
        s = y[i0:i0 + block, None] - y[None, :]
        for k, f in enumerate((phi.value, phi.derivative, phi.second_derivative)):
            out[k][..., i0:i0 + block] = vw @ f(s).T
    k = np.asarray(kappa, dtype=float)[..., None]
    return out[0] * k, out[1] * k, out[2] * k


def trading_cost_arrays(values, grid: WealthGrid, phi: TradingPotential, kappa, method: str = "auto"):
    """(Φ, Φ', Φ'') for a density (or a batch of densities along axis 0)."""
    values = np.asarray(values, dtype=float)
    coeffs = _poly_coeffs(phi)
    if method == "direct" or coeffs is None:
        return _direct_cost(values, grid, phi, kappa)
    if method not in ("auto", "moments"):
        raise ValueError(f"unknown trading-cost method {method!r}")
    a = _cost_poly_moments(values, grid, coeffs, kappa)
    y = grid.nodes
    a1 = a[..., 1:] * np.arange(1, a.shape[-1])
    a2 = a1[..., 1:] * np.arange(1, a1.shape[-1]) if a1.shape[-1] > 1 else np.zeros(a.shape[:-1] + (1,))
    return _polyval_rows(a, y), _polyval_rows(a1, y), _polyval_rows(a2, y)


def trading_cost(nu: Distribution, params: ModelParams, method: str = "auto") -> CostProfile:
    """Φ_ν(y_i) = κ Σ_j w_j φ(y_i − y_j) ν(y_j) with exact derivatives."""
    v, dv, d2v = trading_cost_arrays(nu.values, nu.grid, params.phi, params.kappa, method)
    return CostProfile(nu.grid, v, "trading", dv, d2v)


# ---------------------------------------------------------------------------
# Twisted cost
# ---------------------------------------------------------------------------

_SERIES_TERMS = 24
_SERIES_CUT = 0.1


def _inv_square_moments(a: np.ndarray, h: np.ndarray):
    """I_k = ∫_0^h t^k/(a+t)² dt for k = 0..3 on every cell."""
    u = h / a
    small = u < _SERIES_CUT
    us = np.where(small, u, 0.0)
    # series ∫_0^u s^k (1+s)^{-2} ds = Σ_n (−1)^n (n+1) u^{n+k+1}/(n+k+1)
    J = np.zeros((4,) + u.shape)
    n = np.arange(_SERIES_TERMS)[:, None]
    sign = (-1.0) ** n * (n + 1)
    for k in range(4):
        p = n + k + 1
        J[k] = np.sum(sign * us[None, :] ** p / p, axis=0)
    series = [a ** (k - 1) * J[k] for k in range(4)]

    b = a + h
    L = np.log1p(u)
    closed = [
        h / (a * b),
        L - h / b,
        h - 2 * a * L + a * h / b,
        0.5 * (b * b - a * a) - 3 * a * h + 3 * a * a * L - a * a * h / b,
    ]
    return [np.where(small, s, c) for s, c in zip(series, closed)]


def twisted_arrays(grid: WealthGrid, dphi, d2phi, d: float) -> np.ndarray:
    """Anchored Ξ from Φ' and Φ'' (arrays batched along leading axes)."""
    y = grid.nodes
    a, h = y[:-1], np.diff(y)
    p0, p1 = dphi[..., :-1], dphi[..., 1:]
    q0, q1 = d2phi[..., :-1], d2phi[..., 1:]
    slope = (p1 - p0) / h
    c2 = (3 * slope - 2 * q0 - q1) / h
    c3 = (q0 + q1 - 2 * slope) / (h * h)
    I0, I1, I2, I3 = _inv_square_moments(a, h)
    inc = p0 * I0 + q0 * I1 + c2 * I2 + c3 * I3 + 2.0 * d * np.log1p(h / a)
    xi = np.concatenate([np.zeros(inc.shape[:-1] + (1,)), np.cumsum(inc, axis=-1)], axis=-1)
    return xi - xi[..., grid.ref_index, None]


def twisted_cost(phi_profile: CostProfile, params: ModelParams) -> CostProfile:
    """Twisted cost Ξ with ∂_yΞ = Φ'/y² + 2d/y, anchored at ``grid.ref_index``.

    Uses the exact derivatives carried by a trading profile; when absent they
    are replaced by second-order nonuniform centered differences.
    """
    if phi_profile.kind != "trading":
        raise ValueError("twisted_cost expects a trading-kind profile")
    grid = phi_profile.grid
    dphi = phi_profile.derivative
    if dphi is None:
        dphi = np.gradient(phi_profile.values, grid.nodes, edge_order=2)
    d2phi = phi_profile.second_derivative
    if d2phi is None:
        d2phi = np.gradient(dphi, grid.nodes, edge_order=2)
    xi = twisted_arrays(grid, dphi, d2phi, params.d)
    dxi = dphi / grid.nodes ** 2 + 2 * params.d / grid.nodes
    return CostProfile(grid, xi, "twisted", dxi)


def twisted_cost_of(nu: Distribution, params: ModelParams) -> CostProfile:
    return twisted_cost(trading_cost(nu, params), params)


# ---------------------------------------------------------------------------
# Gibbs measure and the inverse-gamma family
# ---------------------------------------------------------------------------

def _gibbs_values(xi: np.ndarray, d: float, grid: WealthGrid):
    e = -np.asarray(xi, dtype=float) / d
    if not np.all(np.isfinite(e)):
        raise EquilibriumError("non-finite exponent in Gibbs measure; check Ξ/d",
                               state={"min": float(np.nanmin(e)), "max": float(np.nanmax(e))})
    shift = e.max(axis=-1, keepdims=True)
    m = np.exp(e - shift)
    z = quadrature(m, grid)
    return m, z, shift


def gibbs_measure(xi: CostProfile, params: ModelParams):
    """M_Ξ = exp(−Ξ/d)/Z on the grid; returns (Distribution, Z)."""
    m, z, shift = _gibbs_values(xi.values, params.d, xi.grid)
    if not (z > 0 and math.isfinite(z)):
        raise EquilibriumError("Gibbs weights vanish on the whole grid")
    log_z = math.log(z) + float(shift[0])
    Z = math.exp(log_z) if log_z < 700 else math.inf
    return Distribution(xi.grid, m / z, normalized=True), Z


def inverse_gamma_parameters(upsilon: float, params: ModelParams):
    """(α, β) = ((κ+d)/d, κΥ/d)."""
    return (params.kappa + params.d) / params.d, params.kappa * upsilon / params.d


def inverse_gamma_logpdf(y, alpha: float, beta: float):
    y = np.asarray(y, dtype=float)
    return alpha * math.log(beta) - gammaln(alpha) - (1 + alpha) * np.log(y) - beta / y


def inverse_gamma_pdf(y, alpha: float, beta: float):
    return np.exp(inverse_gamma_logpdf(y, alpha, beta))


def inverse_gamma_cdf(y, alpha: float, beta: float):
    """P(Y ≤ y) = Q(α, β/y), the regularized upper incomplete gamma."""
    y = np.asarray(y, dtype=float)
    return gammaincc(alpha, beta / y)


def inverse_gamma_equilibrium(upsilon: float, params: ModelParams, grid: WealthGrid):
    """Sample g_{α,β} on the grid, renormalize over the truncated range.

    Returns (Distribution, Z_Υ) with the untruncated Z_Υ = Γ(α)/β^α.
    """
    if not upsilon > 0:
        raise ValueError(f"mean wealth must be positive, got {upsilon}")
    alpha, beta = inverse_gamma_parameters(upsilon, params)
    if params.kappa <= 0:
        warn("kappa <= 0: the exponential cutoff at y=0 is lost and the "
             "equilibrium is not normalizable on (0, inf)")
    y = grid.nodes
    logm = -(1 + alpha) * np.log(y) - beta / y
    m = np.exp(logm - logm.max())
    dist = Distribution.from_values(grid, m)
    Z = math.exp(gammaln(alpha) - alpha * math.log(beta)) if beta > 0 else math.inf
    return dist, Z


def mean_wealth(nu: Distribution) -> float:
    """Υ_ν = ∫ y ν dy / ∫ ν dy (the ratio equals ∫yν for normalized ν)."""
    if not nu.mass > 0:
        raise ValueError("mean wealth of a zero distribution is undefined")
    return quadrature(nu.grid.nodes * nu.values, nu.grid) / nu.mass


def l1_distance(a: Distribution, b: Distribution) -> float:
    check_same_grid(a.grid, b.grid)
    return quadrature(np.abs(a.values - b.values), a.grid)


# ---------------------------------------------------------------------------
# Fixed point
# ---------------------------------------------------------------------------

def _anchored_gibbs(xi: np.ndarray, d: float, grid: WealthGrid, target: float, lam0: float):
    """Gibbs measure of Ξ + λ/y with λ chosen so its mean equals ``target``.

    The mean is increasing in λ with slope (E[y]E[1/y] − 1)/d, so Newton from
    the previous multiplier converges in a few steps; brentq is the fallback.
    """
    y = grid.nodes
    inv_y = 1.0 / y

    def moments(lam):
        m, z, _ = _gibbs_values(xi + lam * inv_y, d, grid)
        m = m / z
        return m, quadrature(y * m, grid), quadrature(inv_y * m, grid)

    lam = lam0
    for _ in range(50):
        m, ey, einv = moments(lam)
        f = ey - target
        if abs(f) <= 1e-15 * target:
            return m, lam
        slope = (ey * einv - 1.0) / d
        if not slope > 0:
            break
        step = f / slope
        lam_new = lam - step
        if abs(step) <= 1e-15 * max(1.0, abs(lam)):
            return moments(lam_new)[0], lam_new
        lam = lam_new

    def g(l):
        return moments(l)[1] - target
    lo, hi = -1.0, 1.0
    for _ in range(200):
        if g(lo) < 0 < g(hi):
            break
        lo, hi = 2 * lo, 2 * hi
    else:
        raise EquilibriumError("could not bracket the wealth multiplier")
    lam = brentq(g, lo, hi, xtol=1e-15, rtol=4e-16)
    return moments(lam)[0], lam


def equilibrium_fixed_point(nu0: Distribution, params: ModelParams, tol: float = 1e-10,
                            max_iter: int = 10000, damping: float = 0.5,
                            anchor_wealth: bool = True) -> EquilibriumResult:
    """Damped Picard iteration ν ← (1−θ)ν + θ·M, stopping on the L1 step.

    With ``anchor_wealth`` the Gibbs image is M_{Ξ_ν + λ/y} with λ fixing the
    mean wealth at that of ``nu0``.  Wealth is a collision invariant, so the
    equilibria form a one-parameter family indexed by Υ; on a truncated grid
    the plain map (λ = 0) leaks a little wealth every iteration and slides
    along that family instead of settling.  λ vanishes as the truncation is
    removed and is reported as ``wealth_multiplier``.

    On convergence ν* is the last Gibbs image.  ``self_consistency`` is the L1
    distance from ν* to its own (anchored) image; ``unconstrained_residual``
    is ‖ν* − M_{Ξ_{ν*}}‖ and measures the truncation leak.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    if not 0 < damping <= 1:
        raise ValueError("damping must lie in (0, 1]")
    if abs(nu0.mass - 1.0) > 1e-8:
        raise ValueError(f"initial distribution must be normalized (mass {nu0.mass!r})")
    grid, d = nu0.grid, params.d
    target = mean_wealth(nu0)

    def image(v, lam):
        _, dp, d2p = trading_cost_arrays(v, grid, params.phi, params.kappa)
        xi = twisted_arrays(grid, dp, d2p, d)
        if anchor_wealth:
            m, lam = _anchored_gibbs(xi, d, grid, target, lam)
        else:
            m, z, _ = _gibbs_values(xi, d, grid)
            m = m / z
        return m, lam, xi

    nu = np.array(nu0.values)
    lam = 0.0
    history = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        m, lam, _ = image(nu, lam)
        new = (1 - damping) * nu + damping * m
        step = quadrature(np.abs(new - nu), grid)
        history.append(step)
        nu = new
        if not math.isfinite(step):
            raise EquilibriumError("fixed-point iteration produced non-finite values",
                                   state={"iteration": it})
        if step < tol:
            converged = True
            nu = m
            break

    nu = nu / quadrature(nu, grid)
    m_con, lam_star, xi_con = image(nu, lam)
    self_cons = quadrature(np.abs(m_con - nu), grid)
    _, dp, d2p = trading_cost_arrays(nu, grid, params.phi, params.kappa)
    xi_star = twisted_arrays(grid, dp, d2p, d)
    m_free, z, _ = _gibbs_values(xi_star, d, grid)
    uncon = quadrature(np.abs(m_free / z - nu), grid)

    nu_star = Distribution(grid, nu, normalized=True)
    xi_profile = CostProfile(grid, xi_star, "twisted", dp / grid.nodes ** 2 + 2 * d / grid.nodes)
    return EquilibriumResult(
        nu_star=nu_star, xi_star=xi_profile, iterations=it,
        residual=history[-1] if history else 0.0, converged=converged,
        mean_wealth=mean_wealth(nu_star), self_consistency=self_cons,
        unconstrained_residual=uncon, wealth_multiplier=lam_star, history=tuple(history))


def multi_start(initial: Sequence[Distribution], params: ModelParams, tol: float = 1e-10,
                max_iter: int = 10000, damping: float = 0.5, separation: float = 100.0):
    """Run the fixed point from several initial data and keep distinct results.

    Two converged equilibria are distinct when their L1 distance exceeds
    ``separation * tol``.  Returns (all_results, distinct_results).
    """
    results = [equilibrium_fixed_point(n, params, tol, max_iter, damping) for n in initial]
    distinct: list = []
    for r in results:
        if not r.converged:
            continue
        if all(l1_distance(r.nu_star, q.nu_star) > separation * tol for q in distinct):
            distinct.append(r)
    return results, distinct


# ---------------------------------------------------------------------------
# Nash residual
# ---------------------------------------------------------------------------

def interpolate_distribution(nu: Distribution, grid: WealthGrid) -> Distribution:
    """Transfer ν to another grid by a cubic spline of ln ν in ln y.

    Nodes outside the support of ν (or outside its grid range) get zero.
    """
    y, v = nu.grid.nodes, nu.values
    pos = v > 0
    if pos.sum() < 4:
        raise ValueError("need at least four positive nodes to interpolate")
    idx = np.flatnonzero(pos)
    lo, hi = y[idx[0]], y[idx[-1]]
    spline = CubicSpline(np.log(y[pos]), np.log(v[pos]))
    z = grid.nodes
    inside = (z >= lo) & (z <= hi)
    out = np.zeros(grid.size)
    out[inside] = np.exp(spline(np.log(z[inside])))
    return Distribution.from_values(grid, out)


def augmented_cost(nu: Distribution, params: ModelParams, threshold: float = SUPPORT_THRESHOLD,
                   xi: Optional[CostProfile] = None):
    """μ = Ξ_ν + d ln ν on the support {ν > threshold·max ν}; NaN elsewhere.

    A supplied ``xi`` replaces Ξ_ν (for probing the d ln ν term alone).
    """
    v = nu.values
    vmax = v.max()
    if not vmax > 0:
        raise ValueError("augmented cost of a zero distribution is undefined")
    support = v > threshold * vmax
    idx = np.flatnonzero(support)
    if np.any(v[idx[0]:idx[-1] + 1] == 0):
        raise ValueError("distribution vanishes inside its support; ln ν is undefined there")
    if xi is None:
        xi = twisted_cost_of(nu, params)
    else:
        check_same_grid(xi.grid, nu.grid)
    xi = xi.values
    mu = np.full(nu.grid.size, np.nan)
    mu[support] = xi[support] + params.d * np.log(v[support])
    return CostProfile(nu.grid, np.nan_to_num(mu, nan=0.0), "augmented"), support, mu


def nash_residual(nu: Distribution, params: ModelParams, reference_grid: Optional[WealthGrid] = None,
                  threshold: float = SUPPORT_THRESHOLD, xi: Optional[CostProfile] = None) -> float:
    """max μ − min μ over the support of ν; zero exactly at a Nash equilibrium.

    With ``reference_grid`` ν is first interpolated onto that grid, which lets
    equilibria computed at different resolutions be compared on equal terms.
    """
    if reference_grid is not None:
        if xi is not None:
            raise ValueError("a supplied xi cannot be combined with a reference grid")
        nu = interpolate_distribution(nu, reference_grid)
    _, support, mu = augmented_cost(nu, params, threshold, xi)
    vals = mu[support]
    return float(vals.max() - vals.min())
