"""N-agent system with kernel-localized pairwise trading and geometric noise.

Randomness is counter based: the Gaussian for agent j at step n is a pure
function of (seed, stream, n, j), so results do not depend on how the agent
range is chunked or scheduled.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np
from scipy.special import comb

from .core import Distribution, InteractionKernel, ModelParams, WealthGrid
from .errors import ConfigError, NumericalAbort

MAX_AGENTS = 100_000
_STREAM_NOISE = 0
_STREAM_X = 1
_STREAM_Y = 2
_TWO53 = 2.0 ** -53


# ---------------------------------------------------------------------------
# Counter-based Gaussians
# ---------------------------------------------------------------------------

def _philox_words(seed: int, stream: int, step: int, block0: int, nwords: int) -> np.ndarray:
    bg = np.random.Philox(key=np.array([seed & (2**64 - 1), stream], dtype=np.uint64),
                          counter=np.array([block0, step, 0, 0], dtype=np.uint64))
    return bg.random_raw(nwords)


def counter_normals(seed: int, stream: int, step: int, j0: int, n: int) -> np.ndarray:
    """Standard normals for agents j0..j0+n−1 at a given step.

    Agent j consumes raw words 2j and 2j+1 (Box-Muller, cosine branch).
    ``j0`` must be even so that chunk boundaries align with Philox blocks.
    """
    if j0 % 2:
        raise ValueError("chunk start must be even")
    if n <= 0:
        return np.zeros(0)
    raw = _philox_words(seed, stream, step, j0 // 2, 2 * n)
    u1 = ((raw[0::2] >> np.uint64(11)).astype(float) + 0.5) * _TWO53
    u2 = (raw[1::2] >> np.uint64(11)).astype(float) * _TWO53
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * math.pi * u2)


# ---------------------------------------------------------------------------
# Initial laws
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SampleLaw:
    """Initial sampler.

    kinds: constant(value), uniform(low, high), normal(mean, sd),
    lognormal(mean, sigma) with the given arithmetic mean,
    inverse-gamma(alpha, beta).
    """

    kind: str = "constant"
    a: float = 1.0
    b: float = 0.0

    def __post_init__(self):
        if self.kind not in ("constant", "uniform", "normal", "lognormal", "inverse-gamma"):
            raise ConfigError(f"unknown sampling law {self.kind!r}")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "constant":
            return np.full(n, float(self.a))
        if self.kind == "uniform":
            return rng.uniform(self.a, self.b, n)
        if self.kind == "normal":
            return rng.normal(self.a, self.b, n)
        if self.kind == "lognormal":
            mu = math.log(self.a) - 0.5 * self.b ** 2
            return rng.lognormal(mu, self.b, n)
        return self.b / rng.gamma(self.a, 1.0, n)

    def mean(self) -> float:
        if self.kind in ("constant", "lognormal", "normal"):
            return float(self.a)
        if self.kind == "uniform":
            return 0.5 * (self.a + self.b)
        return self.b / (self.a - 1) if self.a > 1 else math.inf

    def variance(self) -> float:
        if self.kind == "constant":
            return 0.0
        if self.kind == "uniform":
            return (self.b - self.a) ** 2 / 12
        if self.kind == "normal":
            return self.b ** 2
        if self.kind == "lognormal":
            return self.a ** 2 * math.expm1(self.b ** 2)
        a, b = self.a, self.b
        return b * b / ((a - 1) ** 2 * (a - 2)) if a > 2 else math.inf

    def describe(self) -> dict:
        return {"kind": self.kind, "a": self.a, "b": self.b}


# ---------------------------------------------------------------------------
# Ensemble
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Ensemble:
    X: np.ndarray
    Y: np.ndarray
    seed: int
    step: int = 0
    time: float = 0.0
    x_period: Optional[Tuple[float, float]] = None
    rejections: int = 0

    def __post_init__(self):
        for name in ("X", "Y"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.X.shape != self.Y.shape or self.X.ndim != 1 or self.X.size < 1:
            raise ValueError("ensemble needs matching 1-d X and Y with N >= 1")
        if np.any(self.Y <= 0):
            raise ValueError("wealths must be positive")

    @property
    def N(self) -> int:
        return self.X.size

    def mean_wealth(self) -> float:
        return float(np.mean(self.Y))


def init_ensemble(N: int, x_law: SampleLaw, y_law: SampleLaw, seed: int,
                  x_period: Optional[Tuple[float, float]] = None,
                  max_rounds: int = 1000) -> Ensemble:
    """Sample positions and wealths; nonpositive wealths are redrawn."""
    if int(N) != N or N < 1:
        raise ConfigError("N must be a positive integer")
    if N > MAX_AGENTS:
        raise ConfigError(f"N={N} exceeds the pairwise-force guard {MAX_AGENTS}")
    rng_x = np.random.Generator(np.random.Philox(key=np.array([seed & (2**64 - 1), _STREAM_X], dtype=np.uint64)))
    rng_y = np.random.Generator(np.random.Philox(key=np.array([seed & (2**64 - 1), _STREAM_Y], dtype=np.uint64)))
    X = x_law.sample(rng_x, N)
    Y = y_law.sample(rng_y, N)
    rejections = 0
    for _ in range(max_rounds):
        bad = ~(Y > 0)
        if not bad.any():
            break
        rejections += int(bad.sum())
        Y[bad] = y_law.sample(rng_y, int(bad.sum()))
    else:
        raise ConfigError("wealth law keeps producing nonpositive samples")
    if x_period is not None:
        X = _wrap(X, x_period)
    return Ensemble(X, Y, seed, x_period=x_period, rejections=rejections)


def _wrap(x, period):
    a, b = period
    return a + np.mod(x - a, b - a)


def _separation(xj, xk, period):
    r = xj - xk
    if period is not None:
        L = period[1] - period[0]
        r = r - L * np.round(r / L)
    return np.abs(r)


def local_density(ensemble: Ensemble, psi: InteractionKernel, block: int = 2048) -> np.ndarray:
    """ρ_j = (1/N) Σ_{ℓ≠j} Ψ(|X_ℓ − X_j|) by direct summation."""
    N = ensemble.N
    if psi.is_global:
        return np.full(N, (N - 1) / N)
    X = ensemble.X
    out = np.empty(N)
    self_term = float(psi(0.0))
    for j0 in range(0, N, block):
        r = _separation(X[j0:j0 + block, None], X[None, :], ensemble.x_period)
        out[j0:j0 + block] = psi(r).sum(axis=1) - self_term
    return out / N


def _poly_derivative_coeffs(params: ModelParams):
    """Coefficients of φ' in powers of s, or None for tabulated φ."""
    phi = params.phi
    if phi.kind == "quadratic":
        return np.array([0.0, 1.0])
    if phi.kind == "even-polynomial":
        c = np.zeros(2 * len(phi.coeffs))
        for k, ck in enumerate(phi.coeffs):
            if k:
                c[2 * k - 1] = 2 * k * ck
        return c
    return None


def trading_drift(ensemble: Ensemble, params: ModelParams, block: int = 1024) -> np.ndarray:
    """a_j = −(1/N) Σ_k ξ_jk Ψ(|X_j − X_k|) φ'(Y_j − Y_k)."""
    N, X, Y = ensemble.N, ensemble.X, ensemble.Y
    psi, law = params.psi, params.xi
    dcoef = _poly_derivative_coeffs(params)
    if psi.is_global and law.is_constant and dcoef is not None:
        # Σ_k (Y_j − Y_k)^n expanded in power sums of the centered wealths
        Yc = Y - Y.mean()
        S = np.array([np.sum(Yc ** m) for m in range(dcoef.size)])
        out = np.zeros(N)
        for n, cn in enumerate(dcoef):
            if cn == 0.0:
                continue
            acc = np.zeros(N)
            for m in range(n + 1):
                acc += comb(n, m, exact=True) * (-1) ** m * S[m] * Yc ** (n - m)
            out += cn * acc
        return -params.kappa * out / N
    rho = None if law.is_constant else local_density(ensemble, psi)
    out = np.empty(N)
    for j0 in range(0, N, block):
        sl = slice(j0, j0 + block)
        k = psi(_separation(X[sl, None], X[None, :], ensemble.x_period))
        if law.is_constant:
            k = k * params.kappa
        else:
            k = k * law.xi(0.5 * (rho[sl, None] + rho[None, :]), params.kappa)
        out[sl] = np.sum(k * params.phi.derivative(Y[sl, None] - Y[None, :]), axis=1)
    return -out / N


def step_ensemble(ensemble: Ensemble, dt: float, params: ModelParams,
                  noise: Optional[np.ndarray] = None) -> Ensemble:
    """Euler step for positions, Itô log-Euler step for wealths.

    ``noise`` replaces the counter-based standard normals, e.g. to drive
    several step sizes with one Brownian path.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    X, Y = ensemble.X, ensemble.Y
    a = trading_drift(ensemble, params)
    if noise is None:
        z = counter_normals(ensemble.seed, _STREAM_NOISE, ensemble.step, 0, ensemble.N)
    else:
        z = np.asarray(noise, dtype=float)
        if z.shape != Y.shape:
            raise ValueError("noise must have one entry per agent")
    d = params.d
    with np.errstate(over="ignore"):
        Y_new = Y * np.exp((a / Y - d) * dt + math.sqrt(2 * d * dt) * z)
    if not np.all(np.isfinite(Y_new)):
        bad = int(np.argmin(np.isfinite(Y_new)))
        raise NumericalAbort("wealth overflow in the log-Euler step; reduce dt",
                             state={"step": ensemble.step, "dt": dt, "agent": bad,
                                    "Y": float(Y[bad]), "drift": float(a[bad])})
    if params.velocity.kind == "constant" and params.velocity.v0 == 0.0:
        X_new = X
    else:
        X_new = X + params.velocity(X, Y) * dt
        if ensemble.x_period is not None:
            X_new = _wrap(X_new, ensemble.x_period)
    return Ensemble(X_new, Y_new, ensemble.seed, ensemble.step + 1, ensemble.time + dt,
                    ensemble.x_period, ensemble.rejections)


def run_ensemble(ensemble: Ensemble, params: ModelParams, t_end: float, dt: float,
                 record_every: int = 0, callback: Optional[Callable] = None) -> Ensemble:
    n = max(1, int(round(t_end / dt)))
    for k in range(1, n + 1):
        ensemble = step_ensemble(ensemble, dt, params)
        if callback is not None and record_every and k % record_every == 0:
            callback(ensemble)
    return ensemble


# ---------------------------------------------------------------------------
# Empirical distributions and KS distances
# ---------------------------------------------------------------------------

def empirical_histogram(ensemble: Ensemble, grid: WealthGrid,
                        x_window: Optional[Tuple[float, float]] = None) -> Distribution:
    """Cell-count histogram of the wealths on the grid's cells.

    Agents outside [y_min, y_max] are dropped and the result flagged
    ``"truncated"``; an empty selection gives a zero density flagged
    ``"empty"``.
    """
    Y = ensemble.Y
    if x_window is not None:
        lo, hi = x_window
        Y = Y[(ensemble.X >= lo) & (ensemble.X <= hi)]
    counts, _ = np.histogram(Y, bins=grid.cell_edges)
    n = counts.sum()
    flags = set()
    if n < Y.size:
        flags.add("truncated")
    if n == 0:
        flags.add("empty")
        return Distribution(grid, np.zeros(grid.size), normalized=False, flags=frozenset(flags))
    return Distribution(grid, counts / (n * grid.weights), normalized=True, flags=frozenset(flags))


def distribution_cdf(dist: Distribution, y) -> np.ndarray:
    """CDF of a Distribution, uniform within each cell."""
    cdf = dist.cdf_at_edges() / dist.mass
    return np.interp(y, dist.grid.cell_edges, cdf, left=0.0, right=1.0)


def ks_samples(samples, cdf: Callable) -> float:
    """sup |F_n − F| for a sample against a continuous CDF."""
    x = np.sort(np.asarray(samples, dtype=float))
    n = x.size
    F = cdf(x)
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - F), np.max(F - (i - 1) / n)))


def ks_distributions(a: Distribution, b: Distribution) -> float:
    """sup |F_a − F_b| over the union of both grids' cell edges."""
    pts = np.union1d(a.grid.cell_edges, b.grid.cell_edges)
    return float(np.max(np.abs(distribution_cdf(a, pts) - distribution_cdf(b, pts))))
