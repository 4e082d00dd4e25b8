import math

import numpy as np
import pytest
from scipy.special import kv

from helpers import random_problem, rel
from sparsevb.gaussian import SufficientStats
from sparsevb.gig import PriorKind, cond_inv_theta
from sparsevb.twod import DEFAULT_2D, Grid2D, mean_field_kl, posterior_grid
from sparsevb.vbl import (
    DualSystem,
    HyperParams,
    PosteriorTriple,
    PrimalSystem,
    StoppingRule,
    credible_flags,
    elbo,
    em_log_joint,
    em_theta_update,
    free_energy,
    prior_offset,
    threshold,
    vbem_theta_update,
    vbl_iterate,
    vbl_iterate_stats,
)

RUN = StoppingRule(max_iter=60, eps=1e-300, metric="delta")


class TestThetaUpdates:
    def test_em_uses_point_estimate(self):
        hp = HyperParams(1.0, 2.0, delta=0.1)
        mu = np.array([0.0, 1.0, -3.0])
        np.testing.assert_allclose(em_theta_update(mu, hp), 2.0 / np.sqrt(0.01 + mu**2))

    def test_vbem_adds_variance(self):
        hp = HyperParams(1.0, 2.0, delta=0.1)
        m, c = np.array([1.0, -2.0]), np.array([0.5, 0.25])
        np.testing.assert_allclose(vbem_theta_update(m, c, hp), cond_inv_theta(hp.gig(), m**2 + c))

    def test_zero_covariance_is_em(self):
        hp = HyperParams(1.0, 0.7, nu=0.0, kind=PriorKind.INVGAUSS_NU0)
        m = np.array([0.3, -1.2, 4.0])
        assert np.array_equal(vbem_theta_update(m, np.zeros(3), hp), em_theta_update(m, hp))

    def test_negative_variance_rejected(self):
        with pytest.raises(ValueError):
            vbem_theta_update(np.zeros(2), np.array([1.0, -1.0]), HyperParams(1.0, 1.0))


class TestCoupledIteration:
    @pytest.mark.parametrize("n,p", [(25, 8), (8, 25)])
    def test_primal_equals_dual(self, n, p):
        rng = np.random.default_rng(n + 7 * p)
        X, Y, _ = random_problem(rng, n, p)
        hp = HyperParams(0.09, 1.5)
        a = vbl_iterate(X, Y, hp, None, RUN, form="primal", track=False).triple
        b = vbl_iterate(X, Y, hp, None, RUN, form="dual", track=False).triple
        assert rel(a.m, b.m) < 1e-9
        assert rel(a.mu, b.mu) < 1e-9
        assert rel(a.C, b.C) < 1e-9

    def test_statistics_driver_equals_data_driver(self):
        rng = np.random.default_rng(1)
        X, Y, _ = random_problem(rng, 40, 6)
        hp = HyperParams(0.09, 1.5)
        a = vbl_iterate(X, Y, hp, None, RUN, form="primal").triple
        b = vbl_iterate_stats(SufficientStats.from_data(X, Y), hp, None, RUN).triple
        assert rel(a.m, b.m) < 1e-12 and rel(a.mu, b.mu) < 1e-12

    def test_zero_covariance_path_is_em_path(self):
        # dropping C from the theta update turns the VBEM recursion into EM
        rng = np.random.default_rng(2)
        X, Y, _ = random_problem(rng, 30, 7)
        hp = HyperParams(0.1, 2.0)
        sys = PrimalSystem(SufficientStats.from_data(X, Y))
        m = mu = np.full(7, 0.5)
        for _ in range(40):
            m = sys.solve(vbem_theta_update(m, np.zeros(7), hp), hp.gamma_sq, cov="none").mean
            mu = sys.solve(em_theta_update(mu, hp), hp.gamma_sq, cov="none").mean
            assert np.array_equal(m, mu)

    def test_converges_to_fixed_point(self):
        rng = np.random.default_rng(3)
        X, Y, _ = random_problem(rng, 30, 5)
        hp = HyperParams(0.09, 1.0)
        res = vbl_iterate(X, Y, hp, None, StoppingRule(2000, 1e-12, "delta"))
        assert res.converged
        again = vbl_iterate(X, Y, hp, res.triple, StoppingRule(1, 1e-300, "delta"))
        assert np.max(np.abs(again.triple.m - res.triple.m)) < 1e-10
        assert np.max(np.abs(again.triple.C - res.triple.C)) < 1e-10

    def test_em_limit_solves_map_stationarity(self):
        # at the fixed point mu is stationary for |Y - X mu|^2 / (2 g2) + lam sum sqrt(delta^2 + mu^2)
        rng = np.random.default_rng(4)
        X, Y, _ = random_problem(rng, 40, 6)
        hp = HyperParams(0.09, 3.0, delta=1e-2)
        mu = vbl_iterate(X, Y, hp, None, StoppingRule(5000, 1e-13, "delta"), track=False).triple.mu
        grad = -X.T @ (Y - X @ mu) / hp.gamma_sq + hp.lam * mu / np.sqrt(hp.delta**2 + mu**2)
        assert np.max(np.abs(grad)) < 1e-6

    def test_ridge_limit_with_gaussian_kind(self):
        rng = np.random.default_rng(5)
        X, Y, _ = random_problem(rng, 20, 4)
        hp = HyperParams(0.25, 2.0, kind=PriorKind.GAUSSIAN)
        tri = vbl_iterate(X, Y, hp, None, StoppingRule(3, 1e-300, "delta")).triple
        ridge = np.linalg.solve(X.T @ X / 0.25 + 2.0 * np.eye(4), X.T @ Y / 0.25)
        np.testing.assert_allclose(tri.m, ridge, rtol=1e-12)
        np.testing.assert_allclose(tri.mu, ridge, rtol=1e-12)

    def test_misfit_stopping(self):
        rng = np.random.default_rng(6)
        X, Y, _ = random_problem(rng, 50, 5, noise=0.1)
        res = vbl_iterate(X, Y, HyperParams(0.01, 0.1), None, StoppingRule(500, metric="misfit", rho=2.0))
        assert res.converged
        assert res.trace.rows[-1]["misfit"] <= 2.0 * 0.1 * math.sqrt(50)

    def test_diag_covariance_mode(self):
        rng = np.random.default_rng(7)
        X, Y, _ = random_problem(rng, 10, 30)
        hp = HyperParams(0.09, 1.0)
        full = vbl_iterate(X, Y, hp, None, RUN, form="dual").triple
        diag = vbl_iterate(X, Y, hp, None, RUN, form="dual", cov="diag", track=False).triple
        assert diag.C is None
        np.testing.assert_allclose(diag.C_diag, np.diag(full.C), rtol=1e-9)
        np.testing.assert_allclose(diag.m, full.m, rtol=1e-9)

    def test_callback_columns_and_best_iterate(self):
        rng = np.random.default_rng(8)
        X, Y, _ = random_problem(rng, 20, 4)
        res = vbl_iterate(X, Y, HyperParams(0.09, 1.0), None, RUN, callback=lambda t, tri: {"norm": float(tri.m @ tri.m)})
        assert len(res.trace) == res.n_iter
        assert np.all(np.isfinite(res.trace.column("norm")))
        mis = res.trace.column("misfit")
        assert res.trace.best_iter == int(np.argmin(mis)) + 1

    def test_trace_csv(self, tmp_path):
        rng = np.random.default_rng(9)
        X, Y, _ = random_problem(rng, 12, 3)
        res = vbl_iterate(X, Y, HyperParams(0.09, 1.0), None, StoppingRule(5, 1e-300, "delta"))
        res.trace.to_csv(tmp_path / "t.csv")
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert lines[0].startswith("iter,misfit,elbo")
        assert len(lines) == 6

    def test_input_validation(self):
        with pytest.raises(ValueError):
            vbl_iterate(np.ones((3, 2)), np.ones(4), HyperParams(1.0, 1.0))
        with pytest.raises(ValueError):
            vbl_iterate(np.array([[np.nan, 1.0]]), np.ones(1), HyperParams(1.0, 1.0))
        with pytest.raises(ValueError):
            StoppingRule(max_iter=0)
        with pytest.raises(ValueError):
            StoppingRule(metric="other")
        with pytest.raises(ValueError):
            HyperParams(0.0, 1.0)


class TestObjectives:
    def test_elbo_against_quadrature(self):
        # log p(Y) - KL(q || posterior) equals the full bound; the gap is the dropped constants
        X, Y, hp = DEFAULT_2D["X"], DEFAULT_2D["Y"], DEFAULT_2D["hp"]
        post = posterior_grid(X, Y, hp, Grid2D(points=600))
        for iters in (2, 7, 50):
            tri = vbl_iterate(X, Y, hp, None, StoppingRule(iters, 1e-300, "delta")).triple
            q2 = tri.C_diag + tri.m**2
            kl = mean_field_kl(X, Y, hp, tri.m, tri.C, q2, post)
            full = elbo(X, Y, hp, tri.m, tri.C, q2) + prior_offset(hp, 2)
            assert post.log_evidence - kl - full == pytest.approx(1.0 - math.log(2 * math.pi), abs=1e-6)

    def test_trace_elbo_matches_function(self):
        rng = np.random.default_rng(10)
        X, Y, _ = random_problem(rng, 15, 4)
        hp = HyperParams(0.2, 1.0)
        seen = {}

        def cb(t, tri):
            seen[t] = tri.copy()

        res = vbl_iterate(X, Y, hp, None, StoppingRule(6, 1e-300, "delta"), callback=cb)
        prev = seen[5]
        tri = seen[6]
        val = elbo(X, Y, hp, tri.m, tri.C, prev.C_diag + prev.m**2)
        assert res.trace.rows[-1]["elbo"] == pytest.approx(val, rel=1e-12)

    def test_free_energy_is_negated_full_bound(self):
        rng = np.random.default_rng(13)
        X, Y, _ = random_problem(rng, 9, 3)
        hp = HyperParams(0.5, 2.0)
        A = rng.normal(size=(3, 3))
        C = A @ A.T + np.eye(3)
        m = rng.normal(size=3)
        q2 = np.diag(C) + m**2
        r = Y - X @ m
        f = free_energy(hp, 9, float(r @ r), float(np.sum((X @ C) * X)), np.linalg.slogdet(C)[1], q2, q2)
        assert f == pytest.approx(-(elbo(X, Y, hp, m, C, q2) + prior_offset(hp, 3)), rel=1e-13)

    def test_prior_offset_branches(self):
        assert math.isnan(prior_offset(HyperParams(0.5, 0.0, delta=0.0, nu=0.0, kind=PriorKind.JEFFREYS_IMPROPER), 2))
        assert prior_offset(HyperParams(0.5, 1.0, kind=PriorKind.GAUSSIAN), 2) == 0.0
        # nu = 1: normalizer of the exponential-type mixing law, 2 K_1(delta lam) delta / lam
        hp = HyperParams(0.5, 2.0, delta=0.3)
        assert prior_offset(hp, 4) == pytest.approx(-4 * math.log(2 * kv(1, 0.6) * 0.3 / 2.0), rel=1e-12)

    def test_em_log_joint_laplace(self):
        hp = HyperParams(0.5, 2.0, delta=1e-3)
        mu = np.array([1.0, -0.5])
        expected = -0.5 * 2 * math.log(0.5) - 0.5 * 0.3 / 0.5 - 2.0 * np.sum(np.sqrt(1e-6 + mu**2))
        assert em_log_joint(0.3, 2, mu, hp) == pytest.approx(expected, rel=1e-14)

    @pytest.mark.parametrize("kind,nu", [(PriorKind.LAPLACE_NU1, 1.0), (PriorKind.INVGAUSS_NU0, 0.0), (PriorKind.GENERAL_NU, 2.2)])
    def test_monotone_bounds(self, kind, nu):
        rng = np.random.default_rng(11)
        for _ in range(10):
            n, p = rng.integers(3, 25, size=2)
            X, Y, _ = random_problem(rng, n, p)
            hp = HyperParams(float(rng.uniform(0.05, 1.0)), float(rng.uniform(0.2, 5.0)), delta=1e-2, nu=nu, kind=kind)
            res = vbl_iterate(X, Y, hp, None, StoppingRule(40, 1e-300, "delta"))
            assert np.all(np.diff(res.trace.column("elbo")) >= -1e-10)
            assert np.all(np.diff(res.trace.column("em_logjoint")[1:]) >= -1e-10)


class TestReporting:
    def test_credible_flags(self):
        tri = PosteriorTriple(np.array([0.0, 3.0, 1.0]), np.array([0.1, 1.0, 1.0]), None, np.array([0.01, 0.25, 0.0]))
        rep = credible_flags(tri)
        np.testing.assert_allclose(rep.lower, [-0.1, 0.0, 1.0])
        np.testing.assert_allclose(rep.upper, [0.3, 2.0, 1.0])
        assert list(rep.zero_inside) == [True, False, False]
        assert list(rep.flagged) == [False, True, False]
        rows = list(rep.rows(["a", "b", "c"]))
        assert rows[1][0] == "b" and rows[1][4]

    def test_threshold(self):
        np.testing.assert_array_equal(threshold(np.array([1e-9, -0.5, 2e-6]), 1e-6), [0.0, -0.5, 2e-6])
        with pytest.raises(ValueError):
            threshold(np.ones(2), 0.0)

    def test_dual_system_misfit(self):
        rng = np.random.default_rng(12)
        X, Y, _ = random_problem(rng, 5, 9)
        s = DualSystem(X, Y)
        m = rng.normal(size=9)
        assert s.sq_misfit(m) == pytest.approx(float(np.sum((X @ m - Y) ** 2)), rel=1e-13)
