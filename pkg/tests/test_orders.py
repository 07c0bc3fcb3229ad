import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from zerocred import dists, models, orders, posterior
from zerocred.dists import BetaGamma, BivariateNormal, ScalarNormal
from zerocred.errors import UsageError
from zerocred.models import ComonoHurdle, ConjHurdle, GaussHurdle, NBHurdle, ZIPComono
from zerocred.orders import LatticeSpec, check_base_order, check_general_order, check_lr_order
from zerocred.posterior import Deductible, Identity, Limit, PosteriorState

import oracles

EX1 = ConjHurdle(BetaGamma(0.5, 1, 1, 1))


def random_comono(rng, kind):
    law = ScalarNormal(rng.uniform(-1, 1), rng.uniform(0.1, 2.0))
    c = tuple(rng.uniform(-1.5, 1.5, size=6))
    d = tuple(rng.uniform(-1.5, 1.5, size=6))
    if kind == "nb":
        return NBHurdle(law, r=float(rng.uniform(0.3, 5.0)), c_seq=c, d_seq=d)
    if kind == "zip":
        return ZIPComono(law, c_seq=c, d_seq=d)
    return ComonoHurdle(law, c_seq=c, d_seq=d)


class TestBaseOrder:
    def test_table1_reversal(self):
        spec = GaussHurdle(BivariateNormal(0, 0, 0.1, 1, 0.5))
        rep = check_base_order(spec, [((0,), (1,))])
        c = rep.comparisons[0]
        assert c.violated and c.status == "violation"
        assert abs(c.value_low - 1.3073) < 3 * 0.0110
        assert abs(c.value_high - 0.8396) < 3 * 0.0034
        assert rep.violation_rate == 1.0

    def test_conj_a_lt_beta_lattice(self):
        rep = check_base_order(EX1, LatticeSpec(3, 4), method="conjugate")
        assert len(rep.comparisons) > 1000
        assert rep.n_violations == 0

    def test_reflexive_pair(self):
        spec = GaussHurdle(BivariateNormal(0, 0, 0.1, 1, 0.5))
        rep = check_base_order(spec, [((0, 2), (0, 2)), ((1,), (1,))])
        assert rep.n_violations == 0
        assert all(c.gap == 0 for c in rep.comparisons)

    def test_incomparable_pair(self):
        with pytest.raises(UsageError):
            check_base_order(EX1, [((0, 2), (1, 1))], method="conjugate")
        with pytest.raises(UsageError):
            check_base_order(EX1, [((0,), (0, 1))], method="conjugate")

    def test_mcmc_threshold_and_inconclusive(self):
        spec = GaussHurdle(BivariateNormal(0, 0, 1, 1, 0.5))
        cfg = posterior.MCMCConfig(draws=200, burn_in=100, runs=10, seed=1)
        rep = check_base_order(spec, [((0,), (1,)), ((1,), (1,))], method="mcmc", cfg=cfg)
        for c in rep.comparisons:
            assert c.tolerance > 0
            assert c.violated == (c.gap > c.tolerance)
            if not c.violated and c.gap > 0:
                assert c.status == "inconclusive"
        assert rep.metadata["mcmc"]["runs"] == 10

    def test_positive_correlation_preserves_order(self):
        # with rho >= 0, positive observations never reverse the predictive mean
        rng = np.random.default_rng(5)
        for _ in range(15):
            law = BivariateNormal(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0.05, 3),
                                  rng.uniform(0.05, 3), rng.uniform(0, 0.95))
            est, _ = posterior.predictive_expectations(GaussHurdle(law), [[y] for y in range(1, 7)])
            assert np.all(np.diff(est) >= -1e-10), law

    def test_negative_correlation_counterexample(self):
        # the published values correspond to variances 0.5; the reversal also holds at sd 0.5
        spec = GaussHurdle(BivariateNormal(0, -2, 0.5, 0.5, -0.8))
        c = check_base_order(spec, [((1,), (2,))]).comparisons[0]
        assert c.violated
        assert abs(c.value_low - 0.6277) < 3 * 0.0013
        assert abs(c.value_high - 0.5711) < 3 * 0.0011
        alt = GaussHurdle(BivariateNormal(0, -2, 0.25, 0.25, -0.8))
        assert check_base_order(alt, [((1,), (2,))]).n_violations == 1

    def test_report_serialisation(self):
        rep = check_base_order(EX1, LatticeSpec(2, 2), method="conjugate")
        d = json.loads(rep.to_json())
        assert d["n_comparisons"] == len(rep.comparisons)
        assert d["violation_rate"] == rep.violation_rate
        csv_text = rep.to_csv()
        lines = csv_text.split("\r\n")
        assert lines[0].startswith("history_low,history_high")
        assert len([ln for ln in lines if ln]) == len(rep.comparisons) + 1
        assert "comparisons" in rep.summary()


class TestGeneralOrder:
    def test_example1_deductible(self):
        rep = check_general_order(EX1, Deductible(3), [((0,), (1,))], method="conjugate")
        c = rep.comparisons[0]
        assert c.violated
        assert round(c.value_low, 3) == 0.050 and round(c.value_high, 3) == 0.033

    def test_deductible_zero_equals_base(self):
        spec = GaussHurdle(BivariateNormal(0, 0, 0.5, 1, 0.5))
        lat = LatticeSpec(2, 3)
        a = check_base_order(spec, lat)
        b = check_general_order(spec, Deductible(0), lat)
        assert [(c.value_low, c.value_high, c.violated) for c in a.comparisons] == \
               [(c.value_low, c.value_high, c.violated) for c in b.comparisons]

    def test_comono_no_violations(self):
        rng = np.random.default_rng(8)
        lat = LatticeSpec(3, 3)
        for _ in range(4):
            spec = random_comono(rng, "hurdle")
            for h in [Identity()] + [Deductible(d) for d in range(6)] + [Limit(d) for d in range(1, 6)]:
                rep = check_general_order(spec, h, lat)
                assert rep.n_violations == 0, (spec, h)

    def test_lr_implies_general(self):
        rng = np.random.default_rng(9)
        transforms = [Identity(), Deductible(1), Deductible(3), Limit(1), Limit(2)]
        for kind in ("hurdle", "nb", "zip"):
            spec = random_comono(rng, kind)
            for _ in range(4):
                t = int(rng.integers(1, 4))
                lo = rng.integers(0, 4, size=t)
                hi = lo + rng.integers(0, 3, size=t)
                lr = orders.predictive_lr_check(spec, lo, hi)
                if not lr.holds:
                    continue
                for h in transforms:
                    rep = check_general_order(spec, h, [(tuple(lo), tuple(hi))])
                    assert rep.n_violations == 0


class TestLROrder:
    def test_poisson_pair(self):
        ys = np.arange(60)
        f, g = stats.poisson.pmf(ys, 1.0), stats.poisson.pmf(ys, 2.0)
        assert check_lr_order(f, g).holds
        rev = check_lr_order(g, f)
        assert not rev.holds and rev.first_violation is not None

    def test_comono_predictive(self):
        spec = ComonoHurdle(ScalarNormal(0, 1))
        rep = orders.predictive_lr_check(spec, [0], [3])
        assert rep.holds and not rep.inconclusive

    def test_truncated_mass_is_inconclusive(self):
        ys = np.arange(4)
        rep = check_lr_order(stats.poisson.pmf(ys, 1.0), stats.poisson.pmf(ys, 2.0))
        assert rep.inconclusive and not rep.holds

    def test_negative_input(self):
        with pytest.raises(UsageError):
            check_lr_order([0.5, -0.1], [0.5, 0.5])

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0.0, 1.0), min_size=2, max_size=7),
           st.lists(st.floats(0.0, 1.0), min_size=2, max_size=7))
    def test_against_brute_force(self, f, g):
        n = min(len(f), len(g))
        f, g = np.array(f[:n]), np.array(g[:n])
        if f.sum() == 0 or g.sum() == 0:
            return
        f, g = f / f.sum(), g / g.sum()
        rep = check_lr_order(f, g, tol=0.0)
        # compare only when the brute-force margin is not within rounding
        for x in range(n):
            for y in range(x, n):
                a, b = f[x] * g[y], f[y] * g[x]
                if a != b and abs(a - b) <= 1e-9 * max(a, b):
                    return
        assert (rep.first_violation is None) == oracles.brute_lr_holds(f, g, tol=0.0)


class TestTotalPositivity:
    def test_softplus_kernel_tp2(self):
        spec = ComonoHurdle(ScalarNormal(0, 1), c_seq=(0.0,), d_seq=(0.0,))
        rep = orders.check_tp2_kernel(spec, 1, np.arange(-3, 3.001, 0.25), 10)
        assert rep.holds and rep.n_checked > 0

    def test_exp_kernel_not_tp2(self):
        spec = ComonoHurdle(ScalarNormal(0, 1), link=dists.EXP, c_seq=(0.0,), d_seq=(0.0,))
        rep = orders.check_tp2_kernel(spec, 1, np.arange(0.25, 2.001, 0.25), 10)
        assert not rep.holds

    def test_single_theta_vacuous(self):
        spec = ComonoHurdle(ScalarNormal(0, 1), link=dists.EXP)
        rep = orders.check_tp2_kernel(spec, 1, [1.0], 5)
        assert rep.holds and rep.n_checked == 0

    def test_unsorted_grid(self):
        with pytest.raises(UsageError):
            orders.check_tp2_kernel(ComonoHurdle(ScalarNormal(0, 1)), 1, [1.0, 0.0], 3)

    def test_mtp2_comono_joint(self):
        spec = ComonoHurdle(ScalarNormal(0, 1))
        joint = posterior.joint_logpmf_lattice(spec, 3, 4)
        assert orders.check_mtp2_lattice(joint, log=True).holds

    def test_mtp2_independent_poissons(self):
        ys = np.arange(5)
        joint = np.einsum("i,j,k->ijk", *(stats.poisson.pmf(ys, lam) for lam in (0.5, 1.0, 2.0)))
        rep = orders.check_mtp2_lattice(joint)
        assert rep.holds
        assert abs(rep.worst_gap) < 1e-12

    def test_mtp2_negative_association(self):
        joint = np.array([[0.2, 0.3], [0.3, 0.2]])
        assert not orders.check_mtp2_lattice(joint).holds

    def test_mtp2_guard(self):
        with pytest.raises(UsageError):
            orders.check_mtp2_lattice(np.ones((2, 2, 2, 2)) / 16)
        with pytest.raises(UsageError):
            orders.check_mtp2_lattice(np.ones((8, 8)) / 64)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 3).flatmap(
        lambda t: st.lists(st.floats(0.01, 1.0), min_size=3 ** t, max_size=3 ** t).map(
            lambda v: np.array(v).reshape((3,) * t))))
    def test_mtp2_against_brute_force(self, arr):
        arr = arr / arr.sum()
        assert orders.check_mtp2_lattice(arr, tol=0.0).holds == oracles.brute_mtp2_holds(arr, tol=0.0)

    def test_mtp2_conditionals_lr_ordered(self):
        # MTP2 joint => each coordinate's conditional law is LR-increasing in the others
        spec = ComonoHurdle(ScalarNormal(0.2, 1.5), c_seq=(0.1, -0.3, 0.4), d_seq=(0.0, 0.5, -0.5))
        joint = np.exp(posterior.joint_logpmf_lattice(spec, 3, 4))
        assert orders.check_mtp2_lattice(joint).holds
        rest = list(itertools.product(range(5), repeat=2))
        for axis in range(3):
            for lo, hi in itertools.product(rest, rest):
                if not all(a <= b for a, b in zip(lo, hi)):
                    continue
                f = joint[_index(axis, lo)]
                g = joint[_index(axis, hi)]
                rep = check_lr_order(f / f.sum(), g / g.sum())
                assert rep.holds, (axis, lo, hi)


def _index(axis, others):
    idx = list(others)
    idx.insert(axis, slice(None))
    return tuple(idx)


class TestConditions:
    def test_flip_condition_examples(self):
        assert orders.condition_eq53(PosteriorState(1.5, 1, 1, 2))
        assert not orders.condition_eq53(PosteriorState(10, 1, 5, 0.1))
        assert orders.condition_eq53(PosteriorState(10, 1, 1e-12, 0.1))

    def test_a_lt_beta_examples(self):
        assert orders.condition_a_lt_beta(BetaGamma(0.5, 1, 1, 1))
        assert not orders.condition_a_lt_beta(BetaGamma(1, 1, 1, 1))

    def test_flip_condition_characterises_single_flip(self):
        # pre-flip state (a*, b*, alpha*, beta*) with a zero to flip; the flip gives
        # (a* + 1, b* - 1, alpha*, beta* + 1) and must not lower the mean iff the condition holds
        rng = np.random.default_rng(3)
        for _ in range(500):
            a, b, al, be = np.exp(rng.uniform(-2, 2.5, 4))
            pre = PosteriorState(a, b + 1, al, be)
            post = PosteriorState(a + 1, b, al, be + 1)
            lhs = posterior.predictive_mean_conjugate(pre)
            rhs = posterior.predictive_mean_conjugate(post)
            if abs(lhs - rhs) < 1e-12 * max(1.0, lhs):
                continue
            assert orders.condition_eq53(pre) == (rhs >= lhs)

    @settings(max_examples=100, deadline=None)
    @given(a=st.floats(0.01, 5), beta=st.floats(0.01, 5), b=st.floats(0.05, 5), alpha=st.floats(0.01, 20),
           hist=st.lists(st.integers(0, 8), min_size=1, max_size=6))
    def test_a_lt_beta_sufficient(self, a, beta, b, alpha, hist):
        prior = BetaGamma(a, b, alpha, beta)
        if not orders.condition_a_lt_beta(prior):
            return
        assert orders.condition_eq53(posterior.conjugate_update(prior, hist))

    def test_reachable_states(self):
        prior = BetaGamma(1, 1, 1, 1)
        states = orders.reachable_states(prior, 2, 3)
        assert {(s.r_t, s.m_t, s.t) for s in states} == {(0, 0, 1), (0, 0, 2), (1, 0, 2), (1, 1, 2), (1, 2, 2)}
        with_prior = orders.reachable_states(prior, 2, 3, include_prior=True)
        assert with_prior[0].t == 0 and len(with_prior) == len(states) + 1

    def test_flip_condition_equivalence_small(self):
        rng = np.random.default_rng(21)
        for _ in range(30):
            prior = BetaGamma(*np.exp(rng.uniform(-2, 2.5, 4)))
            cond = all(orders.condition_eq53(s) for s in orders.reachable_states(prior, 2, 4))
            rep = check_base_order(ConjHurdle(prior), LatticeSpec(2, 4), method="conjugate")
            assert cond == (rep.n_violations == 0)

    def test_softplus_condition(self):
        assert orders.softplus_condition(dists.SOFTPLUS, (-10, 10), (-10, 10), 0.5)
        assert not orders.softplus_condition(dists.EXP, (0, 0), (0, 1), 0.05)
        half = dists.Link("half", lambda x: np.maximum(np.asarray(x) / 2, 0.0),
                          lambda x: np.where(np.asarray(x) > 0, 0.5, 0.0))
        assert orders.softplus_condition(half, (0, 0), (0.1, 5), 0.1)

    def test_exp_link_consistent_with_tp2(self):
        # the analytic derivative condition and the TP2 kernel check agree on both links
        grid = np.arange(0.25, 2.001, 0.25)
        for link, expected in ((dists.SOFTPLUS, True), (dists.EXP, False)):
            spec = ComonoHurdle(ScalarNormal(0, 1), link=link)
            assert orders.check_tp2_kernel(spec, 1, grid, 8).holds == expected
            assert orders.softplus_condition(link, (0, 0), (0.25, 2.0), 0.25) == expected


class TestLatticeSpec:
    def test_points_and_pairs(self):
        lat = LatticeSpec(2, 1)
        assert lat.points() == [(0, 0), (0, 1), (1, 0), (1, 1)]
        pairs = lat.comparable_pairs()
        assert len(pairs) == 5
        assert ((0, 1), (1, 0)) not in pairs

    def test_invalid(self):
        with pytest.raises(UsageError):
            LatticeSpec(0, 3)
        with pytest.raises(UsageError):
            LatticeSpec(2, 0)
