"""Independent reference implementations used to produce and re-check the
frozen values in the tests.  Nothing here imports the package."""
from __future__ import annotations

import math

import numpy as np
from scipy import integrate, stats


def log_nodes(y_min, y_max, G):
    return np.geomspace(y_min, y_max, G)


def trapezoid_weights(nodes):
    h = np.diff(nodes)
    w = np.zeros(nodes.size)
    w[:-1] += 0.5 * h
    w[1:] += 0.5 * h
    return w


def brute_trading_cost(nodes, density, phi, kappa):
    """Φ(y_i) = κ Σ_j w_j φ(y_i − y_j) ν_j with explicit loops."""
    w = trapezoid_weights(nodes)
    out = np.empty(nodes.size)
    for i, yi in enumerate(nodes):
        acc = 0.0
        for j, yj in enumerate(nodes):
            acc += w[j] * phi(yi - yj) * density[j]
        out[i] = kappa * acc
    return out


def invgamma_pdf(y, alpha, beta):
    return stats.invgamma(alpha, scale=beta).pdf(y)


def invgamma_moment(k, alpha, beta, lo=0.0, hi=np.inf):
    """∫ y^k g_{α,β} dy by adaptive quadrature in z = 1/y."""
    f = lambda z: z ** (-k) * stats.gamma(alpha, scale=1.0 / beta).pdf(z)
    a = 1.0 / hi if hi < np.inf else 0.0
    b = 1.0 / lo if lo > 0 else np.inf
    val, _ = integrate.quad(f, a, b, limit=400, epsabs=0, epsrel=1e-13)
    return val


def invgamma_partition(alpha, beta):
    """∫_0^∞ y^{−(1+α)} e^{−β/y} dy by quadrature."""
    val, _ = integrate.quad(lambda y: y ** (-(1 + alpha)) * math.exp(-beta / y), 0, np.inf,
                            limit=400, epsabs=0, epsrel=1e-13)
    return val


def brute_local_density(X, kernel, period=None):
    N = len(X)
    out = np.zeros(N)
    for j in range(N):
        s = 0.0
        for k in range(N):
            if k == j:
                continue
            r = X[j] - X[k]
            if period is not None:
                L = period[1] - period[0]
                r -= L * round(r / L)
            s += kernel(abs(r))
        out[j] = s / N
    return out


def brute_cell_moments(values, nodes):
    """Per-row trapezoid ∫f dy and ∫y f dy with explicit loops."""
    rho, w = [], []
    for row in values:
        a = b = 0.0
        for i in range(nodes.size - 1):
            h = nodes[i + 1] - nodes[i]
            a += 0.5 * h * (row[i] + row[i + 1])
            b += 0.5 * h * (nodes[i] * row[i] + nodes[i + 1] * row[i + 1])
        rho.append(a)
        w.append(b)
    return np.array(rho), np.array(w)


def quadratic_hydro_jacobian(ups, kappa, d, a=1.0):
    """Jacobian for V = a·y from u = aΥ and 𝓔 = a·κΥ²/(κ−d)."""
    c = kappa / (kappa - d)
    u, du = a * ups, a
    e, de = a * c * ups ** 2, 2 * a * c * ups
    return np.array([[u - ups * du, du], [e - ups * de, de]])


def gbm_exact(y0, d, t, z):
    """Exact solution of dY = √(2d) Y dB: Y_t = y0 exp(−d t + √(2d t) z)."""
    return y0 * np.exp(-d * t + math.sqrt(2 * d * t) * z)
