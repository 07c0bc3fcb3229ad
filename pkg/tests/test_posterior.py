import math
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from zerocred import dists, models, posterior
from zerocred.dists import BetaGamma, BivariateNormal, ScalarNormal
from zerocred.errors import DiagnosticError, NumericError, UsageError
from zerocred.models import ComonoHurdle, ConjHurdle, GaussHurdle, GaussZIP, NBHurdle, ZIPComono
from zerocred.posterior import (Deductible, Identity, Limit, MCMCConfig, conjugate_update,
                                cond_transform_mean, predictive_expectation,
                                predictive_mean_conjugate)

import oracles

EX1 = ConjHurdle(BetaGamma(0.5, 1, 1, 1))
ZERO_LINK = dists.Link("zero", lambda x: 0.0 * np.asarray(x), lambda x: 0.0 * np.asarray(x))


class TestConjugate:
    @pytest.mark.parametrize("prior,history,expected", [
        ((1, 1, 1, 1), [0], (1, 2, 1, 1)),
        ((0.5, 1, 1, 1), [1], (1.5, 1, 1, 2)),
        ((1, 1, 1, 1), [], (1, 1, 1, 1)),
    ])
    def test_update_examples(self, prior, history, expected):
        s = conjugate_update(BetaGamma(*prior), history)
        assert (s.a_star, s.b_star, s.alpha_star, s.beta_star) == expected

    @settings(max_examples=50)
    @given(hist=st.lists(st.integers(0, 9), max_size=8))
    def test_update_invariants(self, hist):
        a, b, al, be = 0.7, 1.3, 2.0, 0.4
        s = conjugate_update(BetaGamma(a, b, al, be), hist)
        r = sum(1 for y in hist if y > 0)
        m = sum(y - 1 for y in hist if y > 0)
        assert (s.r_t, s.m_t, s.t) == (r, m, len(hist))
        assert s.a_star == a + r and s.b_star == b + len(hist) - r
        assert s.alpha_star == al + m and s.beta_star == be + r

    @pytest.mark.parametrize("y1,expected", [(0, 0.4), (1, 0.9), (2, 1.2)])
    def test_single_observation_means(self, y1, expected):
        s = conjugate_update(EX1.law, [y1])
        assert predictive_mean_conjugate(s) == pytest.approx(expected, abs=1e-12)

    def test_against_bayes_integration(self):
        rng = np.random.default_rng(2024)
        for _ in range(10):
            a, b, al, be = rng.uniform(0.5, 3.0, size=4)
            t = int(rng.integers(1, 5))
            hist = [int(v) for v in rng.integers(0, 6, size=t)]
            ref = oracles.conj_bayes_mean(a, b, al, be, hist)
            got = predictive_mean_conjugate(conjugate_update(BetaGamma(a, b, al, be), hist))
            assert got == pytest.approx(ref, abs=1e-4)

    @pytest.mark.parametrize("hist", [[0], [1], [0, 3], [2, 0, 1]])
    def test_quadrature_matches_conjugate(self, hist):
        spec = ConjHurdle(BetaGamma(1.5, 2.0, 2.0, 1.0))
        exact, _ = predictive_expectation(spec, hist, method="conjugate")
        quad, _ = predictive_expectation(spec, hist, method="quadrature")
        assert quad == pytest.approx(exact, rel=1e-10)

    def test_runtime(self):
        s = conjugate_update(EX1.law, [0])
        start = time.perf_counter()
        for _ in range(1000):
            predictive_mean_conjugate(s)
        assert (time.perf_counter() - start) / 1000 < 1e-3


class TestTransforms:
    def test_deductible_examples(self):
        assert predictive_expectation(EX1, [0], Deductible(1), "conjugate")[0] == pytest.approx(0.2, abs=1e-12)
        assert predictive_expectation(EX1, [1], Deductible(3), "conjugate")[0] == pytest.approx(1 / 30, abs=1e-12)

    @pytest.mark.parametrize("d", range(1, 10))
    def test_geometric_closed_form(self, d):
        # alpha* = 1 makes the posterior count geometric with P(N >= k) = (1 / (beta* + 1))^k
        for y1 in (0, 1):
            s = conjugate_update(EX1.law, [y1])
            p = s.a_star / (s.a_star + s.b_star)
            q = 1.0 / (s.beta_star + 1.0)
            ref = oracles.geometric_deductible(p, q, d)
            assert predictive_expectation(EX1, [y1], Deductible(d), "conjugate")[0] == pytest.approx(ref, abs=1e-12)

    def test_conjugate_transform_by_pmf(self):
        # closed-form path vs summing the predictive pmf
        spec = ConjHurdle(BetaGamma(0.8, 1.1, 2.5, 0.7))
        for hist in ([0, 2], [3, 1]):
            pmf, tail = posterior.predictive_pmf(spec, hist, method="conjugate")
            assert tail <= 1e-10
            ys = np.arange(len(pmf))
            for h in (Identity(), Deductible(2), Limit(3)):
                est, _ = predictive_expectation(spec, hist, h, "conjugate")
                assert est == pytest.approx(pmf @ h(ys), abs=1e-8)

    def test_identity_reduces_to_mean(self):
        spec = GaussHurdle(BivariateNormal(0, 0, 1, 1, 0))
        assert cond_transform_mean(spec, 1, (0.0, 0.0), Identity()) == pytest.approx(1.0)

    def test_limit_one_is_positive_probability(self):
        spec = GaussHurdle(BivariateNormal(0, 0, 1, 1, 0))
        assert cond_transform_mean(spec, 1, (0.0, 0.0), Limit(1)) == pytest.approx(0.5, abs=1e-12)

    @pytest.mark.parametrize("spec", [
        GaussHurdle(BivariateNormal(0, 0, 1, 1, 0.3)),
        GaussZIP(BivariateNormal(0, 0, 1, 1, 0.3)),
        ComonoHurdle(ScalarNormal(0, 1)),
        ZIPComono(ScalarNormal(0, 1)),
        NBHurdle(ScalarNormal(0, 1), r=1.7),
    ])
    def test_closed_forms_match_direct_sums(self, spec):
        theta = np.array([[-1.0, 0.5], [0.3, 1.2], [2.0, -1.0]])[:, : spec.dim]
        for h in (Identity(), Deductible(0), Deductible(2), Limit(1), Limit(4)):
            np.testing.assert_allclose(cond_transform_mean(spec, 2, theta, h),
                                       posterior.transform_mean_by_sum(spec, 2, theta, h),
                                       rtol=1e-8, atol=1e-12)

    def test_deductible_zero_is_identity(self):
        rng = np.random.default_rng(1)
        spec = GaussHurdle(BivariateNormal(0, 0, 1, 1, 0))
        theta = rng.normal(size=(30, 2))
        np.testing.assert_allclose(cond_transform_mean(spec, 1, theta, Deductible(0)),
                                   cond_transform_mean(spec, 1, theta, Identity()), rtol=1e-12)

    def test_monotone_in_d(self):
        spec = GaussHurdle(BivariateNormal(0, 0, 1, 1, 0.5))
        ded = [predictive_expectation(spec, [1], Deductible(d))[0] for d in range(8)]
        lim = [predictive_expectation(spec, [1], Limit(d))[0] for d in range(8)]
        assert np.all(np.diff(ded) <= 1e-12)
        assert np.all(np.diff(lim) >= -1e-12)
        mean = predictive_expectation(spec, [1])[0]
        np.testing.assert_allclose(np.array(ded) + np.array(lim), mean, rtol=1e-10)

    @pytest.mark.parametrize("text,expected", [("identity", Identity()), ("deductible:3", Deductible(3)),
                                               ("limit:2", Limit(2)), ("Limit:0", Limit(0))])
    def test_parse(self, text, expected):
        assert posterior.parse_transform(text) == expected

    @pytest.mark.parametrize("text", ["deductible", "limit:-1", "cap:2", "deductible:1.5"])
    def test_parse_errors(self, text):
        with pytest.raises(UsageError):
            posterior.parse_transform(text)

    @given(y=st.integers(0, 100), d=st.integers(0, 20))
    def test_transforms_nondecreasing(self, y, d):
        for h in (Identity(), Deductible(d), Limit(d)):
            assert h(y + 1) >= h(y) >= 0


class TestQuadrature:
    def test_grid_properties(self):
        for law in (ScalarNormal(0.5, 2.0), BivariateNormal(0, 1, 1, 2, -0.3), BetaGamma(0.5, 2, 3, 1)):
            g = posterior.quadrature_grid(law, 32)
            assert g.weights.sum() == pytest.approx(1.0, rel=1e-12)
        z, _ = posterior._normal_rule(64)
        np.testing.assert_allclose(np.sort(z), -np.sort(z)[::-1], atol=1e-12)

    def test_moments_of_grid(self):
        law = BivariateNormal(0.2, -0.4, 1.5, 0.7, 0.6)
        g = posterior.quadrature_grid(law, 20)
        w = g.weights
        mean = w @ g.theta
        cov = (g.theta - mean).T @ ((g.theta - mean) * w[:, None])
        np.testing.assert_allclose(mean, law.mean_vec, atol=1e-12)
        np.testing.assert_allclose(cov, law.cov, atol=1e-12)

    def test_table1_row(self):
        spec = GaussHurdle(BivariateNormal(0, 0, 0.1, 1, 0.5))
        est, mcse = predictive_expectation(spec, [0])
        assert mcse == 0.0
        assert abs(est - 1.3073) < 3 * 0.0110

    @pytest.mark.parametrize("params,y1", [((0, 0, 0.1, 1, 0.5), 0), ((0, 0, 5.0, 1, 0.5), 1),
                                           ((0, 2, 1, 1, 0.5), 0), ((0, -2, 0.25, 0.25, -0.8), 2)])
    def test_against_adaptive_integration(self, params, y1):
        spec = GaussHurdle(BivariateNormal(*params))
        ref = oracles.gauss_hurdle_predictive(*params, y1)
        assert predictive_expectation(spec, [y1])[0] == pytest.approx(ref, rel=1e-7)

    def test_zip_against_adaptive_integration(self):
        params = (0, 0, 0.01, 1, 0.5)
        spec = GaussZIP(BivariateNormal(*params))
        for y1 in (0, 1):
            ref = oracles.gauss_hurdle_predictive(*params, y1, zip_model=True)
            assert predictive_expectation(spec, [y1])[0] == pytest.approx(ref, rel=1e-7)

    def test_node_doubling(self):
        settings_ = [(0, 0, v1, 1, 0.5) for v1 in (5.0, 2.0, 1.0, 0.1)]
        settings_ += [(0, 0, 1, v2, 0.5) for v2 in (0.1, 1.0, 3.0)]
        settings_ += [(0, m2, 1, 1, 0.5) for m2 in (-2.0, 0.0, 2.0)]
        for params in settings_:
            spec = GaussHurdle(BivariateNormal(*params))
            e64, _ = posterior.predictive_expectations(spec, [[0], [1]], nodes=64)
            e128, _ = posterior.predictive_expectations(spec, [[0], [1]], nodes=128)
            assert np.max(np.abs(e64 - e128)) < 1e-6, params

    def test_tower_consistency(self):
        # mean of the mixed predictive pmf equals the posterior average of the conditional mean
        for spec, hist in [(GaussHurdle(BivariateNormal(0, 0, 1, 1, 0.5)), [0, 2]),
                           (ComonoHurdle(ScalarNormal(0, 1)), [3]),
                           (NBHurdle(ScalarNormal(0, 0.5), r=2.0), [1, 0])]:
            pmf, tail = posterior.predictive_pmf(spec, hist)
            assert tail <= 1e-10
            ys = np.arange(len(pmf))
            # the tail carries at most eps mass; bound its contribution generously
            assert pmf @ ys == pytest.approx(predictive_expectation(spec, hist)[0], rel=1e-8)

    def test_batch_matches_single(self):
        spec = GaussHurdle(BivariateNormal(0, 0, 1, 1, 0.5))
        hs = [[0, 1], [2, 0], [0, 0]]
        batch, _ = posterior.predictive_expectations(spec, hs, Deductible(1))
        single = [predictive_expectation(spec, h, Deductible(1))[0] for h in hs]
        np.testing.assert_allclose(batch, single, rtol=1e-13)

    def test_mixed_lengths_rejected(self):
        with pytest.raises(UsageError):
            posterior.predictive_expectations(ComonoHurdle(ScalarNormal(0, 1)), [[0], [0, 1]])

    def test_non_integrable_posterior(self):
        spec = ComonoHurdle(ScalarNormal(0, 1), link=ZERO_LINK)
        with pytest.raises(NumericError):
            predictive_expectation(spec, [5])

    def test_unsupported_pairing(self):
        with pytest.raises(UsageError):
            predictive_expectation(GaussHurdle(BivariateNormal(0, 0, 1, 1, 0)), [0], method="conjugate")
        with pytest.raises(UsageError):
            predictive_expectation(EX1, [0], method="laplace")


class TestMCMC:
    CFG = MCMCConfig(draws=1000, burn_in=500, runs=40, seed=3)

    def test_gauss_against_quadrature(self):
        spec = GaussHurdle(BivariateNormal(0, 0, 0.1, 1, 0.5))
        quad, _ = predictive_expectation(spec, [0])
        est, mcse = predictive_expectation(spec, [0], method="mcmc", cfg=self.CFG)
        assert mcse > 0
        assert abs(est - quad) < 4 * mcse

    def test_conj_posterior_means(self):
        spec = ConjHurdle(BetaGamma(0.5, 1, 1, 1))
        res = posterior.mcmc_runs(spec, [0, 2], self.CFG)
        s = conjugate_update(spec.law, [0, 2])
        exact = [s.a_star / (s.a_star + s.b_star), s.alpha_star / s.beta_star]
        per_run = res.draws.mean(axis=1)  # (R, dim)
        se = per_run.std(axis=0, ddof=1) / math.sqrt(per_run.shape[0])
        assert np.all(np.abs(per_run.mean(axis=0) - exact) < 4 * se)

    def test_acceptance_adapted(self):
        spec = ComonoHurdle(ScalarNormal(0, 1))
        res = posterior.mcmc_posterior(spec, [1, 0, 2], MCMCConfig(draws=2000, burn_in=1000, runs=1),
                                       dists.make_rng(0))
        assert res.draws.shape == (2000, 1)
        assert 0.2 < float(res.acceptance[0]) < 0.6

    def test_deterministic(self):
        spec = GaussHurdle(BivariateNormal(0, 0, 1, 1, 0.5))
        cfg = MCMCConfig(draws=200, burn_in=100, runs=1)
        a = posterior.mcmc_posterior(spec, [1], cfg, dists.make_rng(7)).draws
        b = posterior.mcmc_posterior(spec, [1], cfg, dists.make_rng(7)).draws
        assert a.tobytes() == b.tobytes()
        e1 = predictive_expectation(spec, [1], method="mcmc", cfg=MCMCConfig(draws=100, burn_in=50, runs=3))
        e2 = predictive_expectation(spec, [1], method="mcmc", cfg=MCMCConfig(draws=100, burn_in=50, runs=3))
        assert e1 == e2

    def test_single_run_uses_batch_means(self):
        spec = ComonoHurdle(ScalarNormal(0, 1))
        est, mcse = predictive_expectation(spec, [1], method="mcmc",
                                           cfg=MCMCConfig(draws=900, burn_in=200, runs=1))
        assert np.isfinite(est) and mcse > 0

    def test_zero_likelihood_chain(self):
        spec = ComonoHurdle(ScalarNormal(0, 1), link=ZERO_LINK)
        with pytest.raises(DiagnosticError):
            posterior.mcmc_posterior(spec, [4], MCMCConfig(draws=20, burn_in=0, runs=1), dists.make_rng(0))

    @pytest.mark.parametrize("kwargs", [dict(draws=0), dict(runs=0), dict(proposal_scale=0.0),
                                        dict(thin=0), dict(burn_in=-1)])
    def test_config_validation(self, kwargs):
        with pytest.raises(UsageError):
            MCMCConfig(**kwargs)

    def test_batch_means_iid(self):
        x = np.random.default_rng(0).normal(size=10_000)
        assert posterior.batch_means_mcse(x) == pytest.approx(0.01, rel=0.2)
