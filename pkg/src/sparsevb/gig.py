"""Conditional moments of the generalized inverse Gaussian (GIG) mixing law.

The prior on each coefficient is a scale mixture of Normals,

    beta_j | theta_j ~ N(0, theta_j),   theta_j ~ GIG(nu, delta, lambda),

with GIG density proportional to ``theta**(nu-1) * exp(-(delta**2/theta +
lambda**2*theta)/2)``.  Given ``beta_j`` (or the second moment ``E[beta_j**2]``
under a Gaussian variational factor) the mixing variable is again GIG with
shape ``nu - 1/2`` and ``chi = delta**2 + beta_j**2``.  Everything the EM and
VBEM updates need is a moment of that conditional law.

All functions take ``beta_sq`` already squared (and, for VBEM, already
augmented with the posterior variance) so a single code path serves both.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.special import gammaln, kve

__all__ = [
    "PriorKind",
    "GigParams",
    "GigDomainError",
    "SingularMomentError",
    "bessel_ratio_half",
    "bessel_k_ratio",
    "cond_inv_theta",
    "cond_theta",
    "log_gig_normalizer",
    "log_marginal_prior",
]


class GigDomainError(ValueError):
    """Parameters or arguments outside the domain of a moment formula."""


class SingularMomentError(GigDomainError):
    """The requested conditional moment is infinite (improper posterior)."""


class PriorKind(enum.Enum):
    LAPLACE_NU1 = "laplace"
    INVGAUSS_NU0 = "invgauss"
    GENERAL_NU = "general"
    JEFFREYS_IMPROPER = "jeffreys"
    POWER_IMPROPER = "power"
    # Degenerate mixing: theta frozen at 1/lam, i.e. a plain Gaussian prior.
    GAUSSIAN = "gaussian"

    @property
    def improper(self) -> bool:
        return self in (PriorKind.JEFFREYS_IMPROPER, PriorKind.POWER_IMPROPER)


_FIXED_NU = {PriorKind.LAPLACE_NU1: 1.0, PriorKind.INVGAUSS_NU0: 0.0, PriorKind.JEFFREYS_IMPROPER: 0.0}


@dataclass(frozen=True)
class GigParams:
    """Prior mixing parameters ``(nu, delta, lambda)`` plus the branch selector.

    ``kind`` decides which moment formulas are legal.  The improper branches
    ignore ``lam`` (it is forced to zero) and require ``nu < 1/2``.
    """

    nu: float = 1.0
    delta: float = 1e-3
    lam: float = 1.0
    kind: PriorKind = PriorKind.LAPLACE_NU1

    def __post_init__(self):
        if self.delta < 0 or self.lam < 0:
            raise GigDomainError(f"delta and lambda must be nonnegative, got {self.delta}, {self.lam}")
        fixed = _FIXED_NU.get(self.kind)
        if fixed is not None and self.nu != fixed:
            raise GigDomainError(f"{self.kind.name} requires nu={fixed}, got nu={self.nu}")
        if self.kind.improper:
            if self.nu >= 0.5:
                raise GigDomainError(f"improper power prior requires nu < 1/2, got {self.nu}")
            if self.lam != 0.0:
                raise GigDomainError("improper priors have lambda = 0")
        elif self.kind is PriorKind.GAUSSIAN:
            if self.lam <= 0:
                raise GigDomainError("GAUSSIAN prior needs a positive precision lam")
        elif self.delta == 0.0 and self.lam == 0.0:
            raise GigDomainError(
                "delta = lambda = 0 is improper; select JEFFREYS_IMPROPER or POWER_IMPROPER explicitly"
            )

    @classmethod
    def laplace(cls, lam: float, delta: float = 1e-3) -> GigParams:
        return cls(1.0, delta, lam, PriorKind.LAPLACE_NU1)

    @classmethod
    def invgauss(cls, lam: float, delta: float = 1e-3) -> GigParams:
        return cls(0.0, delta, lam, PriorKind.INVGAUSS_NU0)

    @classmethod
    def power(cls, nu: float, delta: float = 0.0) -> GigParams:
        kind = PriorKind.JEFFREYS_IMPROPER if nu == 0.0 else PriorKind.POWER_IMPROPER
        return cls(nu, delta, 0.0, kind)


def bessel_ratio_half(order_index: int, z: float) -> float:
    """``K_{order+1/2}(z) / K_{order-1/2}(z)`` for the closed-form orders 0 and 1."""
    if not z > 0:
        raise GigDomainError(f"Bessel ratio needs z > 0, got {z}")
    if order_index == 1:
        return (z + 1.0) / z
    if order_index == 0:
        return 1.0
    raise GigDomainError(f"closed form only for order_index in {{0, 1}}, got {order_index}")


def _log_kv_small_z(v: float, z: NDArray) -> NDArray:
    # leading term of K_v(z) as z -> 0
    av = abs(v)
    if av < 1e-12:
        return np.log(np.maximum(-np.log(z / 2.0) - np.euler_gamma, np.finfo(float).tiny))
    return gammaln(av) - math.log(2.0) + av * (math.log(2.0) - np.log(z))


def _log_kve(v: float, z: NDArray) -> NDArray:
    """``log(K_v(z) * exp(z))`` with a small-argument fallback when kve overflows."""
    with np.errstate(over="ignore", divide="ignore"):
        val = kve(v, z)
        out = np.log(val)
    bad = ~np.isfinite(out) | (val == 0)
    if np.any(bad):
        zb = z[bad]
        out[bad] = _log_kv_small_z(v, zb) + zb
    return out


def bessel_k_ratio(v: float, z: ArrayLike) -> NDArray:
    """``K_{v+1}(z) / K_v(z)`` evaluated as a difference of scaled logs."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if np.any(z <= 0):
        raise GigDomainError("Bessel ratio needs z > 0")
    return np.exp(_log_kve(v + 1.0, z) - _log_kve(v, z))


def _chi(params: GigParams, beta_sq: ArrayLike) -> NDArray:
    beta_sq = np.asarray(beta_sq, dtype=float)
    if np.any(beta_sq < 0):
        raise GigDomainError("beta_sq must be nonnegative")
    return params.delta**2 + beta_sq


def cond_inv_theta(params: GigParams, beta_sq: ArrayLike) -> NDArray | float:
    """``E[1/theta | beta]`` under ``GIG(nu - 1/2, sqrt(delta^2 + beta^2), lambda)``.

    Vectorized over ``beta_sq``; returns a float for scalar input.
    """
    scalar = np.ndim(beta_sq) == 0
    chi = np.atleast_1d(_chi(params, beta_sq))
    kind, lam, nu = params.kind, params.lam, params.nu

    if kind is PriorKind.GAUSSIAN:
        out = np.full_like(chi, lam)
    elif kind.improper or lam == 0.0:
        # inverse-gamma conditional, shape 1/2 - nu, scale chi/2
        if nu >= 0.5:
            raise SingularMomentError("lambda = 0 needs nu < 1/2 for a proper conditional")
        if np.any(chi == 0):
            raise SingularMomentError("E[1/theta] is infinite at beta = delta = 0 for the improper prior")
        out = (1.0 - 2.0 * nu) / chi
    else:
        if np.any(chi == 0):
            if nu - 0.5 <= 1.0:
                raise SingularMomentError("E[1/theta] is infinite at beta = delta = 0 for nu <= 3/2")
            raise GigDomainError("chi = 0 is only handled for nu in the closed-form branches")
        root = np.sqrt(chi)
        if kind is PriorKind.LAPLACE_NU1:
            out = lam / root
        elif kind is PriorKind.INVGAUSS_NU0:
            out = lam / root + 1.0 / chi
        else:
            z = lam * root
            out = (lam / root) * bessel_k_ratio(nu - 0.5, z) - (2.0 * nu - 1.0) / chi
    return float(out[0]) if scalar else out


def cond_theta(params: GigParams, beta_sq: ArrayLike) -> NDArray | float:
    """``E[theta | beta]`` for the same conditional law as :func:`cond_inv_theta`."""
    scalar = np.ndim(beta_sq) == 0
    chi = np.atleast_1d(_chi(params, beta_sq))
    kind, lam, nu = params.kind, params.lam, params.nu

    if kind is PriorKind.GAUSSIAN:
        out = np.full_like(chi, 1.0 / lam)
    elif kind.improper or lam == 0.0:
        if not nu < -0.5:
            raise GigDomainError(f"E[theta] of the improper conditional exists only for nu < -1/2, got {nu}")
        out = -chi / (2.0 * nu + 1.0)
    else:
        root = np.sqrt(chi)
        if kind is PriorKind.LAPLACE_NU1:
            out = (lam * root + 1.0) / lam**2
        elif kind is PriorKind.INVGAUSS_NU0:
            out = root / lam
        else:
            if np.any(chi == 0):
                raise GigDomainError("chi = 0 not supported on the general-nu branch")
            out = (root / lam) * bessel_k_ratio(nu - 0.5, lam * root)
    return float(out[0]) if scalar else out


def log_gig_normalizer(order: float, chi: ArrayLike, psi: float) -> NDArray:
    """``log of the integral of theta**(order-1) * exp(-(chi/theta + psi*theta)/2)`` over theta > 0.

    ``psi = 0`` gives the inverse-gamma normalizer (needs ``order < 0``);
    ``chi = 0`` the gamma normalizer (needs ``order > 0``).
    """
    chi = np.atleast_1d(np.asarray(chi, dtype=float))
    out = np.empty_like(chi)
    if psi == 0.0:
        if order >= 0 or np.any(chi <= 0):
            raise GigDomainError("inverse-gamma normalizer needs order < 0 and chi > 0")
        return gammaln(-order) + order * np.log(chi / 2.0)
    pos = chi > 0
    if np.any(~pos):
        if order <= 0:
            raise GigDomainError("gamma normalizer needs order > 0")
        out[~pos] = gammaln(order) - order * math.log(psi / 2.0)
    c = chi[pos]
    z = np.sqrt(c * psi)
    out[pos] = math.log(2.0) + 0.5 * order * (np.log(c) - math.log(psi)) + _log_kve(order, z) - z
    return out


def log_marginal_prior(params: GigParams, beta_sq: ArrayLike) -> NDArray:
    """Unnormalized log marginal prior ``log p(beta_j)`` (additive constant dropped).

    The marginal of the Normal scale mixture is the GIG normalizer of the
    conditional, so for ``nu = 1`` this is ``-lambda * sqrt(delta^2 + beta^2)``.
    """
    chi = np.atleast_1d(_chi(params, beta_sq))
    if params.kind is PriorKind.GAUSSIAN:
        return -0.5 * params.lam * np.asarray(beta_sq, dtype=float).reshape(chi.shape)
    if params.kind is PriorKind.LAPLACE_NU1:
        return -params.lam * np.sqrt(chi)
    psi = 0.0 if params.kind.improper else params.lam**2
    return log_gig_normalizer(params.nu - 0.5, chi, psi)
