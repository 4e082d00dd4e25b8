"""Independent oracles and problem generators shared by the test modules."""

from __future__ import annotations

import math

import numpy as np
from scipy import integrate


def gig_log_moment_quad(order: float, chi: float, psi: float, k: int) -> float:
    """``log`` of the integral of ``theta**(order+k-1) exp(-(chi/theta + psi*theta)/2)``.

    Integrated in ``u = log(theta)`` around the mode so narrow peaks are resolved.
    """
    a = order + k
    if psi > 0:
        mode = math.log((a + math.sqrt(a * a + chi * psi)) / psi) if a >= 0 else math.log(chi / (-a + math.sqrt(a * a + chi * psi)))
    else:
        mode = math.log(chi / (-2.0 * a))

    def g(u):
        return a * u - 0.5 * (chi * math.exp(-u) + psi * math.exp(u))

    g0 = g(mode)
    curv = 0.5 * (chi * math.exp(-mode) + psi * math.exp(mode))
    s = 1.0 / math.sqrt(curv)

    def f(u):
        try:
            return math.exp(g(u) - g0)
        except OverflowError:  # far tails underflow to zero
            return 0.0

    total = 0.0
    for lo, hi in ((-np.inf, mode - 5 * s), (mode - 5 * s, mode), (mode, mode + 5 * s), (mode + 5 * s, np.inf)):
        val, _ = integrate.quad(f, lo, hi, epsabs=0.0, epsrel=1e-13, limit=400)
        total += val
    return g0 + math.log(total)


def gig_moments_quad(order: float, chi: float, psi: float) -> tuple[float, float]:
    """``(E[theta], E[1/theta])`` of the law with density proportional to the integrand above."""
    z0 = gig_log_moment_quad(order, chi, psi, 0)
    e_inv = math.exp(gig_log_moment_quad(order, chi, psi, -1) - z0)
    if psi == 0 and order + 1 >= 0:
        return math.inf, e_inv
    e_th = math.exp(gig_log_moment_quad(order, chi, psi, 1) - z0)
    return e_th, e_inv


def random_problem(rng: np.random.Generator, n: int, p: int, sparsity: float = 0.5, noise: float = 0.3):
    """Gaussian design, sparse coefficients, Gaussian noise."""
    X = rng.normal(size=(n, p))
    beta = rng.normal(size=p) * (rng.random(p) > sparsity)
    Y = X @ beta + noise * rng.normal(size=n)
    return X, Y, beta


def rel(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))
