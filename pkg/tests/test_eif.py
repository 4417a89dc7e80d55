from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stochsurv.eif import (ContractError, eif_variance, evaluate_eif, point_eif_example1,
                           point_eif_example2, point_eif_example3, t_from_q)
from stochsurv.interventions import (PointTerm, StructuredSpec, make_grace_period,
                                     make_multiplicative_shift, make_odds_shift, make_static)
from stochsurv.oracle import MarkovQ, simulate, true_nuisances
from stochsurv.simlab import Study1Dgp

from conftest import make_frame, single_interval_panel


@pytest.fixture(scope="module")
def rows():
    rng = np.random.default_rng(12)
    n = 10_000
    lstar = rng.integers(0, 2, n).astype(float)
    a = rng.integers(0, 2, n).astype(float)
    y = rng.integers(0, 2, n).astype(float)
    m0, m1 = rng.uniform(0.05, 0.95, n), rng.uniform(0.05, 0.95, n)
    f1 = rng.uniform(0.05, 0.95, n)
    return lstar, a, y, m0, m1, f1


def _single_interval_eif(spec, rows, psi):
    lstar, a, y, m0, m1, f1 = rows
    panel = single_interval_panel(lstar, a, y)
    q_levels = np.stack([m0, m1], axis=1)[:, None, :]
    return evaluate_eif(spec, panel, f1[:, None], None, q_levels, psi=psi)


class TestTFromQ:

    def test_multiplicative_shift(self):
        fr = make_frame([[1], [0], [1]], a=[1, 0, 0])
        q = np.array([[0.2, 0.6], [0.3, 0.7], [0.4, 0.9]])
        d = 0.3
        s, qa = np.array([1, 0, 1]), np.array([0.6, 0.3, 0.4])
        expect = (1 - d) * q[:, 1] * s + qa * (s * d + 1 - s)
        np.testing.assert_allclose(t_from_q(make_multiplicative_shift(d), fr, q), expect, atol=1e-15)

    def test_static(self):
        fr = make_frame([[1], [0]], a=[0, 0])
        q = np.array([[0.2, 0.6], [0.3, 0.7]])
        np.testing.assert_array_equal(t_from_q(make_static(1), fr, q), [0.6, 0.7])

    def test_no_intervention(self):
        fr = make_frame([[1], [0]], a=[0, 1])
        q = np.array([[0.2, 0.6], [0.3, 0.7]])
        np.testing.assert_allclose(t_from_q(make_multiplicative_shift(1.0), fr, q), [0.2, 0.7])

    def test_zero_after_death(self):
        fr = make_frame([[1], [1]], a=[1, 1])
        t = t_from_q(make_static(1), fr, np.full((2, 2), 0.5), alive=[1, 0])
        assert t.tolist() == [0.5, 0.0]

    def test_missing_level(self):
        fr = make_frame([[1]], a=[1])
        with pytest.raises(ContractError):
            t_from_q(make_static(1), fr, {0: np.array([0.3])})

    def test_rejects_general(self):
        with pytest.raises(ContractError):
            t_from_q(make_odds_shift(2.0), make_frame([[1]], a=[1]), np.ones((1, 2)))


class TestClosedForms:

    @pytest.mark.parametrize("delta", [0.0, 0.25, 0.5, 0.9, 1.0])
    def test_recursion_matches_single_interval_shift(self, rows, delta):
        lstar, a, y, m0, m1, f1 = rows
        got = _single_interval_eif(make_multiplicative_shift(delta), rows, 0.4).values
        m_a = np.where(a == 1, m1, m0)
        want = point_eif_example3(y, a, lstar, m_a, m1, f1, delta, 0.4)
        np.testing.assert_allclose(got, want, atol=1e-12, rtol=0)

    def test_treat_indicated_is_shift_at_zero(self, rows):
        lstar, a, y, m0, m1, f1 = rows
        m_a = np.where(a == 1, m1, m0)
        np.testing.assert_allclose(point_eif_example1(y, a, lstar, m_a, m1, f1, 0.3),
                                   point_eif_example3(y, a, lstar, m_a, m1, f1, 0.0, 0.3),
                                   atol=1e-12, rtol=0)

    def test_no_intervention_collapse(self, rows):
        lstar, a, y, m0, m1, f1 = rows
        m_a = np.where(a == 1, m1, m0)
        np.testing.assert_allclose(point_eif_example3(y, a, lstar, m_a, m1, f1, 1.0, 0.2), y - 0.2,
                                   atol=1e-12)

    def test_static_and_representative_binary(self, rows):
        # with binary treatment and threshold 1 the representative rule is "always treat"
        lstar, a, y, m0, m1, f1 = rows
        got = _single_interval_eif(make_static(1), rows, 0.5).values
        m_a = np.where(a == 1, m1, m0)
        np.testing.assert_allclose(got, point_eif_example2(y, a, m_a, m1, f1, 0.5), atol=1e-12)

    def test_representative_mean_zero_at_truth(self):
        # exact expectation over a discrete one-interval law
        p_l = np.array([0.6, 0.4])
        p_r = np.array([0.3, 0.7])           # P(R=1 | l)
        m = np.array([[0.5, 0.8], [0.2, 0.6]])  # E(Y | r, l) indexed [l, r]
        psi = float(np.sum(p_l * m[:, 1]))
        total = 0.0
        for l in (0, 1):
            for r in (0, 1):
                pr = p_r[l] if r else 1 - p_r[l]
                for y in (0, 1):
                    py = m[l, r] if y else 1 - m[l, r]
                    u = point_eif_example2(y, r, m[l, r], m[l, 1], p_r[l], psi)
                    total += p_l[l] * pr * py * float(u)
        assert total == pytest.approx(0.0, abs=1e-15)


@pytest.fixture(scope="module")
def study1_panel():
    return simulate(Study1Dgp(), 3000, np.random.default_rng(31))


class TestEvaluateEif:

    def test_components_resum(self, study1_panel):
        spec = make_multiplicative_shift(0.5)
        pi1, pc, ql = true_nuisances(Study1Dgp(), spec, study1_panel)
        ev = evaluate_eif(spec, study1_panel, pi1, pc, ql)
        np.testing.assert_allclose(ev.values, ev.resum(), atol=1e-12, rtol=0)
        assert abs(ev.values.mean()) < 1e-12
        assert ev.psi == pytest.approx(np.mean(ev.terminal + ev.interval.sum(1) + ev.t0), abs=1e-15)

    def test_no_intervention_weights_are_one(self, study1_panel):
        spec = make_multiplicative_shift(1.0)
        pi1, _, ql = true_nuisances(Study1Dgp(), spec, study1_panel)
        ev = evaluate_eif(spec, study1_panel, pi1, None, ql)
        np.testing.assert_allclose(ev.log_weights, 0.0, atol=1e-15)
        assert ev.psi == pytest.approx(np.mean(ev.terminal + ev.interval.sum(1) + ev.t0))

    def test_point_term_splitting(self, study1_panel):
        base = make_grace_period(1)
        split = []
        for t in base.point_terms:
            split += [PointTerm(t.c / 2, t.h, t.a_star), PointTerm(t.c / 2, t.h, t.a_star)]
        spec2 = StructuredSpec(tuple(split), base.observed_term, base.reference_term,
                               base.support, "custom", {})
        rng = np.random.default_rng(0)
        n, J = study1_panel.n, study1_panel.horizon
        pi1 = rng.uniform(0.1, 0.9, (n, J))
        pc = rng.uniform(0.0, 0.2, (n, J))
        ql = rng.uniform(0.05, 0.95, (n, J, 2))
        # the grace rule needs an absorbing indicator
        cov = study1_panel.covariates.copy()
        cov[:, :, 0] = np.fmax.accumulate(np.nan_to_num(cov[:, :, 0]), axis=1) * np.where(
            np.isnan(cov[:, :, 0]), np.nan, 1)
        panel = replace(study1_panel, covariates=cov)
        a = evaluate_eif(base, panel, pi1, pc, ql)
        b = evaluate_eif(spec2, panel, pi1, pc, ql)
        np.testing.assert_allclose(a.values, b.values, atol=1e-12, rtol=0)

    def test_mean_zero_at_true_nuisances(self):
        law, spec = Study1Dgp(), make_multiplicative_shift(0.5)
        panel = simulate(law, 50_000, np.random.default_rng(77))
        pi1, pc, ql = true_nuisances(law, spec, panel)
        ev = evaluate_eif(spec, panel, pi1, pc, ql, psi=MarkovQ(law, spec).psi())
        u = ev.values
        assert abs(u.mean()) < 3 * u.std(ddof=1) / np.sqrt(u.size)

    def test_rejects_general(self, study1_panel):
        with pytest.raises(ContractError):
            evaluate_eif(make_odds_shift(2.0), study1_panel, None, None, None)


class TestVariance:

    def test_constant(self):
        assert eif_variance(np.full(10, 0.5))[0] == 0.0

    def test_two_point(self):
        n = 1000
        v = np.tile([-1.0, 1.0], n // 2)
        var, half = eif_variance(v)
        assert var == pytest.approx(np.var(v, ddof=1) / n)
        assert var == pytest.approx(1.001001 / n, rel=1e-6)
        assert half == pytest.approx(1.959964 * np.sqrt(var))

    @settings(max_examples=30)
    @given(st.lists(st.floats(-5, 5), min_size=2, max_size=50))
    def test_nonnegative(self, vals):
        assert eif_variance(vals)[0] >= 0
