"""Shared model ingredients: wealth grids, quadrature, potentials, kernels,
velocity fields, the parameter bundle and the Distribution container.

All containers are frozen dataclasses holding read-only numpy arrays.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.interpolate import CubicSpline, RegularGridInterpolator

from .errors import ConfigError, GridMismatchError


def _readonly(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


# ---------------------------------------------------------------------------
# Wealth grid and quadrature
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class WealthGrid:
    """Truncated discretization of the wealth half-line.

    Edges sit at y_min, the midpoints between consecutive nodes, and y_max,
    so each cell width equals the trapezoid weight of its node.  Finite-volume
    cell masses and trapezoid quadrature therefore coincide.
    """

    nodes: np.ndarray
    cell_edges: np.ndarray
    weights: np.ndarray
    spacing: str = "custom"

    def __post_init__(self):
        y = self.nodes
        if y.ndim != 1 or y.size < 2:
            raise ConfigError("a wealth grid needs at least two nodes")
        if not np.all(np.isfinite(y)) or y[0] <= 0:
            raise ConfigError("wealth grid nodes must be finite and positive")
        if np.any(np.diff(y) <= 0):
            raise ConfigError("wealth grid nodes must be strictly increasing")
        if self.cell_edges.size != y.size + 1 or self.weights.size != y.size:
            raise ConfigError("inconsistent edge/weight array sizes")
        if np.any(self.weights <= 0):
            raise ConfigError("quadrature weights must be positive")

    @classmethod
    def from_nodes(cls, nodes, spacing: str = "custom") -> "WealthGrid":
        y = np.asarray(nodes, dtype=float)
        edges = np.concatenate(([y[0]], 0.5 * (y[1:] + y[:-1]), [y[-1]]))
        return cls(_readonly(y), _readonly(edges), _readonly(np.diff(edges)), spacing)

    @property
    def size(self) -> int:
        return self.nodes.size

    @property
    def y_min(self) -> float:
        return float(self.nodes[0])

    @property
    def y_max(self) -> float:
        return float(self.nodes[-1])

    @property
    def steps(self) -> np.ndarray:
        """Node spacings Δy_i = y_{i+1} − y_i."""
        return np.diff(self.nodes)

    @property
    def ref_index(self) -> int:
        """Node nearest the geometric mean of the range (anchor for Ξ)."""
        target = 0.5 * (math.log(self.y_min) + math.log(self.y_max))
        return int(np.argmin(np.abs(np.log(self.nodes) - target)))

    @property
    def key(self) -> tuple:
        return (self.size, self.spacing, hash(self.nodes.tobytes()))

    def same_as(self, other: "WealthGrid") -> bool:
        return self is other or (self.size == other.size and np.array_equal(self.nodes, other.nodes))

    def describe(self) -> dict:
        return {"y_min": self.y_min, "y_max": self.y_max, "G": self.size, "spacing": self.spacing}


def build_grid(y_min: float, y_max: float, G: int, spacing: str = "log") -> WealthGrid:
    """Build a log- or uniformly-spaced wealth grid with both endpoints as nodes."""
    if not (y_min > 0):
        raise ConfigError(f"nonpositive y_min={y_min}: the model lives on y > 0")
    if not (y_max > y_min):
        raise ConfigError(f"y_max={y_max} must exceed y_min={y_min}")
    if int(G) != G or G < 2:
        raise ConfigError(f"node count G={G} must be an integer >= 2")
    G = int(G)
    if spacing == "log":
        nodes = np.geomspace(y_min, y_max, G)
    elif spacing == "uniform":
        nodes = np.linspace(y_min, y_max, G)
    else:
        raise ConfigError(f"unknown grid spacing {spacing!r}")
    nodes[0], nodes[-1] = y_min, y_max
    return WealthGrid.from_nodes(nodes, spacing)


def quadrature(values, grid: WealthGrid):
    """Trapezoid rule over [y_min, y_max]; batched along the last axis."""
    v = np.asarray(values, dtype=float)
    if v.shape[-1] != grid.size:
        raise GridMismatchError(f"values have length {v.shape[-1]}, grid has {grid.size} nodes")
    out = v @ grid.weights
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# Trading potential
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TradingPotential:
    """Even interaction potential φ.

    ``even-polynomial`` stores coefficients c_k of s^{2k} (k = 0, 1, ...).
    ``tabulated-even`` stores samples on s >= 0 starting at 0 and uses a cubic
    spline clamped to zero slope at the origin, extended evenly.
    """

    kind: str = "quadratic"
    coeffs: tuple = ()
    s_nodes: tuple = ()
    s_values: tuple = ()
    _spline: Optional[CubicSpline] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.kind == "quadratic":
            return
        if self.kind == "even-polynomial":
            if len(self.coeffs) == 0:
                raise ConfigError("even-polynomial potential needs coefficients")
            return
        if self.kind == "tabulated-even":
            s = np.asarray(self.s_nodes, float)
            v = np.asarray(self.s_values, float)
            if s.size < 4 or s.size != v.size:
                raise ConfigError("tabulated potential needs >= 4 matching samples")
            if s[0] != 0.0 or np.any(np.diff(s) <= 0):
                raise ConfigError("tabulated potential samples must start at s=0 and increase")
            object.__setattr__(self, "_spline", CubicSpline(s, v, bc_type=((1, 0.0), "natural")))
            return
        raise ConfigError(f"unknown potential kind {self.kind!r}")

    @property
    def s_max(self) -> float:
        return float(self.s_nodes[-1]) if self.kind == "tabulated-even" else math.inf

    def _check_range(self, s):
        if self.kind == "tabulated-even" and np.max(np.abs(s), initial=0.0) > self.s_max * (1 + 1e-12):
            raise ConfigError(f"|s| exceeds tabulated range {self.s_max}")

    def value(self, s):
        s = np.asarray(s, dtype=float)
        if self.kind == "quadratic":
            return 0.5 * s * s
        if self.kind == "even-polynomial":
            s2 = s * s
            return np.polynomial.polynomial.polyval(s2, self.coeffs)
        self._check_range(s)
        return self._spline(np.abs(s))

    def derivative(self, s):
        s = np.asarray(s, dtype=float)
        if self.kind == "quadratic":
            return s.copy()
        if self.kind == "even-polynomial":
            # d/ds Σ c_k s^{2k} = s Σ 2k c_k s^{2(k-1)}
            c = [2 * k * ck for k, ck in enumerate(self.coeffs)][1:]
            return s * np.polynomial.polynomial.polyval(s * s, c) if c else np.zeros_like(s)
        self._check_range(s)
        return np.sign(s) * self._spline(np.abs(s), 1)

    def second_derivative(self, s):
        s = np.asarray(s, dtype=float)
        if self.kind == "quadratic":
            return np.ones_like(s)
        if self.kind == "even-polynomial":
            c = [2 * k * (2 * k - 1) * ck for k, ck in enumerate(self.coeffs)][1:]
            return np.polynomial.polynomial.polyval(s * s, c) if c else np.zeros_like(s)
        self._check_range(s)
        return self._spline(np.abs(s), 2)

    def describe(self) -> dict:
        out = {"kind": self.kind}
        if self.coeffs:
            out["coeffs"] = list(self.coeffs)
        if self.s_nodes:
            out["s_nodes"] = list(self.s_nodes)
            out["s_values"] = list(self.s_values)
        return out


def quadratic_potential() -> TradingPotential:
    return TradingPotential("quadratic")


def even_polynomial(coeffs: Sequence[float]) -> TradingPotential:
    return TradingPotential("even-polynomial", coeffs=tuple(float(c) for c in coeffs))


def tabulated_even(s_nodes, s_values) -> TradingPotential:
    return TradingPotential("tabulated-even", s_nodes=tuple(map(float, s_nodes)),
                            s_values=tuple(map(float, s_values)))


def eval_potential(phi: TradingPotential, s):
    """Return (φ(s), φ'(s))."""
    v, dv = phi.value(s), phi.derivative(s)
    if np.ndim(v) == 0:
        return float(v), float(dv)
    return v, dv


# ---------------------------------------------------------------------------
# Interaction kernel
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class InteractionKernel:
    """Radial kernel Ψ(|x|) with unit integral.

    ``global`` is Ψ ≡ 1 (every agent trades with every other); it has no
    finite integral and is meant for homogeneous runs.
    """

    kind: str = "global"
    width: float = 1.0

    def __post_init__(self):
        if self.kind not in ("gaussian", "top-hat", "global"):
            raise ConfigError(f"unknown kernel kind {self.kind!r}")
        if self.kind != "global" and not self.width > 0:
            raise ConfigError("kernel width must be positive")

    @property
    def is_global(self) -> bool:
        return self.kind == "global"

    def __call__(self, r):
        r = np.abs(np.asarray(r, dtype=float))
        if self.kind == "global":
            return np.ones_like(r)
        if self.kind == "gaussian":
            w = self.width
            return np.exp(-0.5 * (r / w) ** 2) / (math.sqrt(2 * math.pi) * w)
        return np.where(r <= self.width, 0.5 / self.width, 0.0)

    def integral(self, n: int = 200001) -> float:
        """∫Ψ(|x|)dx by trapezoid on a wide symmetric window."""
        if self.kind == "global":
            return math.inf
        if self.kind == "top-hat":
            return 2 * self.width * (0.5 / self.width)
        half = 12 * self.width
        x = np.linspace(-half, half, n)
        return float(np.trapezoid(self(x), x))

    def describe(self) -> dict:
        return {"kind": self.kind, "width": self.width}


# ---------------------------------------------------------------------------
# Velocity field V(x, y)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VelocityField:
    """Configuration-space velocity V(x, y).

    kinds: ``constant`` (V = v0), ``linear`` (V = a(x)·y with a constant, or
    piecewise constant on intervals split at ``breakpoints``), ``tabulated``
    (bilinear interpolation on an (x, y) table, clamped at the table edges).
    """

    kind: str = "constant"
    v0: float = 0.0
    a: tuple = (1.0,)
    breakpoints: tuple = ()
    x_nodes: tuple = ()
    y_nodes: tuple = ()
    table: tuple = ()
    _interp: Optional[RegularGridInterpolator] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.kind == "constant":
            return
        if self.kind == "linear":
            if len(self.a) != len(self.breakpoints) + 1:
                raise ConfigError("linear velocity needs len(a) == len(breakpoints) + 1")
            if any(np.diff(self.breakpoints) <= 0):
                raise ConfigError("velocity breakpoints must increase")
            return
        if self.kind == "tabulated":
            tab = np.asarray(self.table, float)
            if tab.shape != (len(self.x_nodes), len(self.y_nodes)):
                raise ConfigError("velocity table shape must be (len(x_nodes), len(y_nodes))")
            interp = RegularGridInterpolator((np.asarray(self.x_nodes, float),
                                              np.asarray(self.y_nodes, float)), tab)
            object.__setattr__(self, "_interp", interp)
            return
        raise ConfigError(f"unknown velocity kind {self.kind!r}")

    @property
    def x_independent(self) -> bool:
        return self.kind == "constant" or (self.kind == "linear" and len(self.a) == 1)

    def coefficient(self, x):
        """a(x) for the linear kind."""
        x = np.asarray(x, dtype=float)
        idx = np.searchsorted(np.asarray(self.breakpoints, float), x, side="right")
        return np.asarray(self.a, float)[idx]

    def __call__(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if self.kind == "constant":
            return np.full(np.broadcast(x, y).shape, float(self.v0))
        if self.kind == "linear":
            return self.coefficient(x) * y
        xs, ys = np.broadcast_arrays(x, y)
        xs = np.clip(xs, self.x_nodes[0], self.x_nodes[-1])
        ys = np.clip(ys, self.y_nodes[0], self.y_nodes[-1])
        pts = np.stack([xs.ravel(), ys.ravel()], axis=-1)
        return self._interp(pts).reshape(xs.shape)

    def describe(self) -> dict:
        if self.kind == "constant":
            return {"kind": "constant", "v0": self.v0}
        if self.kind == "linear":
            return {"kind": "linear", "a": list(self.a), "breakpoints": list(self.breakpoints)}
        return {"kind": "tabulated", "x_nodes": list(self.x_nodes), "y_nodes": list(self.y_nodes)}


# ---------------------------------------------------------------------------
# Trading frequency law
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FrequencyLaw:
    """Trading frequency ξ(ρ).

    ``constant`` is the mode ρξ(ρ) = κ: the local cost prefactor is κ and the
    particle pair frequency is the constant κ.  ``power`` is ξ(ρ) = xi0·ρ^p.
    """

    kind: str = "constant"
    xi0: float = 1.0
    exponent: float = 0.0

    def __post_init__(self):
        if self.kind not in ("constant", "power"):
            raise ConfigError(f"unknown frequency law {self.kind!r}")
        if self.kind == "power" and self.xi0 < 0:
            raise ConfigError("xi0 must be nonnegative")

    @property
    def is_constant(self) -> bool:
        return self.kind == "constant"

    def xi(self, rho, kappa: float):
        rho = np.asarray(rho, dtype=float)
        if self.is_constant:
            return np.full(rho.shape, float(kappa))
        with np.errstate(divide="ignore"):
            return self.xi0 * np.power(rho, self.exponent)

    def local_kappa(self, rho, kappa: float):
        """Prefactor ρξ(ρ) of the localized trading cost."""
        rho = np.asarray(rho, dtype=float)
        if self.is_constant:
            return np.full(rho.shape, float(kappa))
        return rho * self.xi(rho, kappa)

    def describe(self) -> dict:
        return {"kind": self.kind, "xi0": self.xi0, "exponent": self.exponent}


# ---------------------------------------------------------------------------
# Parameter bundle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelParams:
    kappa: float
    d: float
    phi: TradingPotential = field(default_factory=quadratic_potential)
    psi: InteractionKernel = field(default_factory=InteractionKernel)
    xi: FrequencyLaw = field(default_factory=FrequencyLaw)
    velocity: VelocityField = field(default_factory=VelocityField)
    epsilon: float = 1.0

    def __post_init__(self):
        for name in ("kappa", "d", "epsilon"):
            if not math.isfinite(getattr(self, name)):
                raise ConfigError(f"{name} must be finite")
        if not self.d > 0:
            raise ConfigError(f"d={self.d} violates d > 0")
        if self.kappa < 0:
            raise ConfigError(f"kappa={self.kappa} violates kappa >= 0")
        if not self.kappa + self.d > 0:
            raise ConfigError("kappa + d must be positive")
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon={self.epsilon} violates epsilon > 0")

    @property
    def is_quadratic(self) -> bool:
        if self.phi.kind == "quadratic":
            return True
        if self.phi.kind == "even-polynomial":
            c = list(self.phi.coeffs) + [0.0, 0.0]
            return c[1] == 0.5 and not any(c[2:])
        return False

    def with_(self, **changes) -> "ModelParams":
        return replace(self, **changes)

    def describe(self) -> dict:
        return {
            "kappa": self.kappa, "d": self.d, "epsilon": self.epsilon,
            "phi": self.phi.describe(), "psi": self.psi.describe(),
            "xi": self.xi.describe(), "velocity": self.velocity.describe(),
        }


# ---------------------------------------------------------------------------
# Distribution
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Distribution:
    """Nonnegative density on a wealth grid.

    ``flags`` carries diagnostics such as ``"empty"`` for histograms of an
    empty selection.
    """

    grid: WealthGrid
    values: np.ndarray
    normalized: bool = False
    flags: frozenset = frozenset()
    mass: float = field(init=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != (self.grid.size,):
            raise GridMismatchError(f"values shape {v.shape} does not match grid size {self.grid.size}")
        if not np.all(np.isfinite(v)):
            raise ValueError("distribution values must be finite")
        if np.any(v < 0):
            raise ValueError("distribution values must be nonnegative")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        m = quadrature(v, self.grid)
        object.__setattr__(self, "mass", m)
        if self.normalized and abs(m - 1.0) > 1e-10:
            raise ValueError(f"distribution flagged normalized has mass {m!r}")

    @classmethod
    def from_values(cls, grid: WealthGrid, values, normalize: bool = True) -> "Distribution":
        v = np.asarray(values, dtype=float)
        if normalize:
            m = quadrature(v, grid)
            if not m > 0:
                raise ValueError("cannot normalize a distribution with zero mass")
            v = v / m
        return cls(grid, v, normalized=normalize)

    def cell_masses(self) -> np.ndarray:
        return self.values * self.grid.weights

    def cdf_at_edges(self) -> np.ndarray:
        """Cumulative cell mass at the G+1 cell edges."""
        return np.concatenate(([0.0], np.cumsum(self.cell_masses())))


def lognormal_distribution(grid: WealthGrid, mean: float = 1.0, sigma: float = 0.5) -> Distribution:
    """Lognormal density with the given mean, sampled and renormalized on the grid."""
    if not (mean > 0 and sigma > 0):
        raise ConfigError("lognormal mean and sigma must be positive")
    mu = math.log(mean) - 0.5 * sigma * sigma
    y = grid.nodes
    v = np.exp(-((np.log(y) - mu) ** 2) / (2 * sigma * sigma)) / (y * sigma * math.sqrt(2 * math.pi))
    return Distribution.from_values(grid, v)


def check_same_grid(a: WealthGrid, b: WealthGrid):
    if not a.same_as(b):
        raise GridMismatchError("objects live on different wealth grids")


def warn(msg: str):
    warnings.warn(msg, RuntimeWarning, stacklevel=3)


# ---------------------------------------------------------------------------
# Configuration-space grid
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class XGrid:
    """Uniform cells on [x_min, x_max] with periodic or outflow boundaries."""

    x_min: float
    x_max: float
    cells: int
    bc: str = "periodic"

    def __post_init__(self):
        if not self.x_max > self.x_min:
            raise ConfigError("x_max must exceed x_min")
        if int(self.cells) != self.cells or self.cells < 1:
            raise ConfigError("cell count must be a positive integer")
        if self.bc not in ("periodic", "outflow"):
            raise ConfigError(f"unknown boundary condition {self.bc!r}")

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / self.cells

    @property
    def centers(self) -> np.ndarray:
        return self.x_min + (np.arange(self.cells) + 0.5) * self.dx

    @property
    def faces(self) -> np.ndarray:
        return self.x_min + np.arange(self.cells + 1) * self.dx

    @property
    def length(self) -> float:
        return self.x_max - self.x_min

    def describe(self) -> dict:
        return {"x_min": self.x_min, "x_max": self.x_max, "cells": self.cells, "bc": self.bc}
