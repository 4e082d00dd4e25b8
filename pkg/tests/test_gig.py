import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate
from scipy.special import kv

from helpers import gig_log_moment_quad, gig_moments_quad
from sparsevb.gig import (
    GigDomainError,
    GigParams,
    PriorKind,
    SingularMomentError,
    bessel_k_ratio,
    bessel_ratio_half,
    cond_inv_theta,
    cond_theta,
    log_gig_normalizer,
    log_marginal_prior,
)


def _conditional(params: GigParams, beta_sq: float) -> tuple[float, float, float]:
    chi = params.delta**2 + beta_sq
    psi = 0.0 if params.kind.improper else params.lam**2
    return params.nu - 0.5, chi, psi


class TestClosedForms:
    def test_laplace_inverse_moment(self):
        g = GigParams.laplace(lam=2.0, delta=0.1)
        b2 = np.array([0.0, 0.5, 4.0])
        np.testing.assert_allclose(cond_inv_theta(g, b2), 2.0 / np.sqrt(0.01 + b2), rtol=1e-15)

    def test_laplace_moment(self):
        g = GigParams.laplace(lam=2.0, delta=0.1)
        chi = 0.01 + 3.0
        assert cond_theta(g, 3.0) == pytest.approx((2.0 * math.sqrt(chi) + 1.0) / 4.0, rel=1e-15)

    def test_invgauss_moments(self):
        g = GigParams.invgauss(lam=0.7, delta=0.2)
        chi = 0.04 + 1.5
        assert cond_inv_theta(g, 1.5) == pytest.approx(0.7 / math.sqrt(chi) + 1.0 / chi, rel=1e-15)
        assert cond_theta(g, 1.5) == pytest.approx(math.sqrt(chi) / 0.7, rel=1e-15)

    def test_improper_inverse_gamma(self):
        g = GigParams.power(nu=-0.25, delta=0.0)
        assert g.kind is PriorKind.POWER_IMPROPER
        assert cond_inv_theta(g, 2.0) == pytest.approx(1.5 / 2.0, rel=1e-15)

    def test_jeffreys(self):
        g = GigParams.power(nu=0.0, delta=0.0)
        assert g.kind is PriorKind.JEFFREYS_IMPROPER
        assert cond_inv_theta(g, 4.0) == pytest.approx(0.25)

    def test_gaussian_kind_is_constant(self):
        g = GigParams(1.0, 1e-3, 3.0, PriorKind.GAUSSIAN)
        np.testing.assert_array_equal(cond_inv_theta(g, np.array([0.0, 1.0, 100.0])), 3.0)
        assert cond_theta(g, 7.0) == pytest.approx(1.0 / 3.0)

    def test_general_nu_reduces_to_closed_forms(self):
        b2 = np.array([1e-4, 0.3, 2.0, 50.0])
        for nu, closed in ((1.0, GigParams.laplace(1.3, 0.05)), (0.0, GigParams.invgauss(1.3, 0.05))):
            gen = GigParams(nu, 0.05, 1.3, PriorKind.GENERAL_NU)
            np.testing.assert_allclose(cond_inv_theta(gen, b2), cond_inv_theta(closed, b2), rtol=1e-12)
            np.testing.assert_allclose(cond_theta(gen, b2), cond_theta(closed, b2), rtol=1e-12)

    def test_scalar_in_scalar_out(self):
        g = GigParams.laplace(1.0)
        assert isinstance(cond_inv_theta(g, 1.0), float)
        assert isinstance(cond_theta(g, 1.0), float)
        assert cond_inv_theta(g, np.array([1.0])).shape == (1,)


class TestQuadratureOracle:
    POINTS = [
        (GigParams.laplace(1.0, 1e-3), 0.0),
        (GigParams.laplace(0.05, 0.5), 3.0),
        (GigParams.laplace(40.0, 1e-2), 1e-3),
        (GigParams.invgauss(2.0, 0.1), 0.7),
        (GigParams.invgauss(0.01, 1.0), 100.0),
        (GigParams(2.5, 0.3, 1.7, PriorKind.GENERAL_NU), 0.2),
        (GigParams(-1.2, 0.3, 0.4, PriorKind.GENERAL_NU), 5.0),
        (GigParams(0.6, 1e-2, 10.0, PriorKind.GENERAL_NU), 1e-2),
        (GigParams.power(-0.8, 0.1), 2.0),
        (GigParams.power(0.0, 0.0), 0.5),
    ]

    @pytest.mark.parametrize("params,beta_sq", POINTS)
    def test_inverse_moment(self, params, beta_sq):
        _, e_inv = gig_moments_quad(*_conditional(params, beta_sq))
        assert cond_inv_theta(params, beta_sq) == pytest.approx(e_inv, rel=1e-9)

    @pytest.mark.parametrize("params,beta_sq", [p for p in POINTS if not p[0].kind.improper or p[0].nu < -0.5])
    def test_moment(self, params, beta_sq):
        e_th, _ = gig_moments_quad(*_conditional(params, beta_sq))
        assert cond_theta(params, beta_sq) == pytest.approx(e_th, rel=1e-9)

    @pytest.mark.parametrize("order,chi,psi", [(0.5, 1.0, 1.0), (-1.5, 2.0, 0.3), (3.0, 1e-3, 4.0), (-0.5, 2.0, 0.0)])
    def test_normalizer(self, order, chi, psi):
        assert log_gig_normalizer(order, chi, psi)[0] == pytest.approx(gig_log_moment_quad(order, chi, psi, 0), rel=1e-10)

    def test_gamma_normalizer_at_chi_zero(self):
        val, _ = integrate.quad(lambda t: t ** (1.5 - 1) * math.exp(-0.5 * 2.0 * t), 0, np.inf)
        assert log_gig_normalizer(1.5, 0.0, 2.0)[0] == pytest.approx(math.log(val), rel=1e-10)


class TestBessel:
    @pytest.mark.parametrize("v", [-1.7, -0.5, 0.0, 0.5, 2.3])
    def test_ratio_matches_scipy(self, v):
        z = np.array([0.01, 0.5, 3.0, 40.0])
        np.testing.assert_allclose(bessel_k_ratio(v, z), kv(v + 1, z) / kv(v, z), rtol=1e-12)

    def test_ratio_large_argument_is_finite(self):
        r = bessel_k_ratio(0.3, np.array([1e4, 1e6]))
        assert np.all(np.isfinite(r))
        np.testing.assert_allclose(r, 1.0, rtol=1e-3)

    def test_ratio_tiny_argument_uses_asymptote(self):
        z = np.array([1e-300])
        r = bessel_k_ratio(1.5, z)
        # K_{v+1}/K_v ~ 2 v / z for z -> 0
        assert r[0] == pytest.approx(2 * 1.5 / 1e-300, rel=1e-6)

    def test_half_orders(self):
        assert bessel_ratio_half(1, 2.0) == pytest.approx(kv(1.5, 2.0) / kv(0.5, 2.0), rel=1e-14)
        assert bessel_ratio_half(0, 2.0) == pytest.approx(kv(0.5, 2.0) / kv(-0.5, 2.0), rel=1e-14)
        with pytest.raises(GigDomainError):
            bessel_ratio_half(2, 1.0)
        with pytest.raises(GigDomainError):
            bessel_ratio_half(1, 0.0)


class TestDomain:
    def test_negative_beta_sq(self):
        with pytest.raises(GigDomainError):
            cond_inv_theta(GigParams.laplace(1.0), -1.0)

    def test_improper_singular_at_zero(self):
        with pytest.raises(SingularMomentError):
            cond_inv_theta(GigParams.power(0.0, 0.0), 0.0)

    def test_laplace_singular_at_zero(self):
        with pytest.raises(SingularMomentError):
            cond_inv_theta(GigParams.laplace(1.0, 0.0), np.array([1.0, 0.0]))

    def test_improper_requires_small_nu(self):
        with pytest.raises(GigDomainError):
            GigParams(0.7, 0.0, 0.0, PriorKind.POWER_IMPROPER)

    def test_improper_mean_needs_nu_below_minus_half(self):
        with pytest.raises(GigDomainError):
            cond_theta(GigParams.power(0.0, 0.1), 1.0)

    def test_fixed_nu_kinds(self):
        with pytest.raises(GigDomainError):
            GigParams(0.5, 1e-3, 1.0, PriorKind.LAPLACE_NU1)

    def test_both_scales_zero_must_be_explicit(self):
        with pytest.raises(GigDomainError):
            GigParams(0.3, 0.0, 0.0, PriorKind.GENERAL_NU)

    def test_negative_scale(self):
        with pytest.raises(GigDomainError):
            GigParams.laplace(-1.0)


class TestMarginalPrior:
    def test_laplace_marginal(self):
        g = GigParams.laplace(2.0, 0.0 + 1e-12)
        np.testing.assert_allclose(log_marginal_prior(g, np.array([1.0, 4.0])), [-2.0, -4.0], rtol=1e-10)

    def test_marginal_matches_mixture_integral(self):
        g = GigParams(1.7, 0.4, 1.1, PriorKind.GENERAL_NU)
        # log int N(b; 0, t) GIG(t) dt up to constants in b: difference between two b values
        def mix(b2):
            return gig_log_moment_quad(g.nu - 0.5, g.delta**2 + b2, g.lam**2, 0)

        lm = log_marginal_prior(g, np.array([0.3, 2.0]))
        assert lm[1] - lm[0] == pytest.approx(mix(2.0) - mix(0.3), rel=1e-10)


@settings(max_examples=60, deadline=None)
@given(
    lam=st.floats(1e-3, 1e3),
    delta=st.floats(1e-4, 1.0),
    b1=st.floats(0.0, 1e3),
    b2=st.floats(0.0, 1e3),
)
def test_inverse_moment_decreases_in_beta(lam, delta, b1, b2):
    lo, hi = sorted((b1, b2))
    for g in (GigParams.laplace(lam, delta), GigParams.invgauss(lam, delta)):
        assert cond_inv_theta(g, hi) <= cond_inv_theta(g, lo) * (1 + 1e-14)
        assert cond_theta(g, hi) >= cond_theta(g, lo) * (1 - 1e-14)


@settings(max_examples=60, deadline=None)
@given(nu=st.floats(-3.0, 3.0), lam=st.floats(1e-2, 1e2), chi=st.floats(1e-4, 1e2))
def test_jensen_bound(nu, lam, chi):
    # E[theta] E[1/theta] >= 1 for any positive law
    g = GigParams(nu, math.sqrt(chi), lam, PriorKind.GENERAL_NU)
    assert cond_theta(g, 0.0) * cond_inv_theta(g, 0.0) >= 1.0 - 1e-10
