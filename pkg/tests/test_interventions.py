import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stochsurv.interventions import (PositivityError, StructuredSpec, TreatIfIndicator, binary_f,
                                     check_positivity, evaluate_q, make_dynamic, make_grace_period,
                                     make_grace_period_uniform, make_multiplicative_shift,
                                     make_odds_shift, make_representative, make_static,
                                     spec_from_config)

from conftest import make_frame, make_panel

prob = st.floats(0.0, 1.0, allow_nan=False)
open_prob = st.floats(1e-6, 1 - 1e-6, allow_nan=False)


def q1(spec, frame, p1):
    return evaluate_q(spec, frame, binary_f(np.atleast_1d(p1)))[:, 1]


class TestMultiplicativeShift:

    def test_delta_one_is_identity(self):
        fr = make_frame([[1], [0]])
        f = binary_f(np.array([0.3, 0.8]))
        np.testing.assert_allclose(evaluate_q(make_multiplicative_shift(1.0), fr, f), f)

    def test_delta_zero_always_treats_indicated(self):
        assert q1(make_multiplicative_shift(0.0), make_frame([[1]]), 0.2)[0] == 1.0

    def test_half_shift(self):
        q = evaluate_q(make_multiplicative_shift(0.5), make_frame([[1]]), binary_f(np.array([0.3])))
        np.testing.assert_allclose(q[0], [0.35, 0.65], atol=1e-15)

    def test_quarter_shift(self):
        assert q1(make_multiplicative_shift(0.25), make_frame([[1]]), 0.1)[0] == pytest.approx(0.775)

    @given(delta=prob, p=st.floats(0.0, 0.999, allow_nan=False))
    def test_ratio_of_not_initiating(self, delta, p):
        q = evaluate_q(make_multiplicative_shift(delta), make_frame([[1]]), binary_f(np.array([p])))
        assert q[0, 0] / (1 - p) == pytest.approx(delta, abs=1e-12)

    @given(delta=prob, p=prob)
    def test_unindicated_untouched(self, delta, p):
        f = binary_f(np.array([p]))
        np.testing.assert_allclose(evaluate_q(make_multiplicative_shift(delta), make_frame([[0]]), f), f)

    def test_delta_out_of_range(self):
        with pytest.raises(ValueError):
            make_multiplicative_shift(1.2)


class TestOddsShift:

    def test_identity(self):
        assert q1(make_odds_shift(1.0), make_frame([[0]]), 0.3)[0] == pytest.approx(0.3)

    def test_double_odds(self):
        assert q1(make_odds_shift(2.0), make_frame([[0]]), 0.3)[0] == pytest.approx(0.6 / 1.3)

    def test_triple_odds(self):
        assert q1(make_odds_shift(3.0), make_frame([[0]]), 0.5)[0] == pytest.approx(0.75)

    @given(delta=st.floats(1e-3, 1e3))
    def test_zero_propensity_kept(self, delta):
        assert q1(make_odds_shift(delta), make_frame([[1]]), 0.0)[0] == 0.0

    @given(p=st.floats(1e-3, 1 - 1e-3), d1=st.floats(1e-2, 50), d2=st.floats(1e-2, 50))
    def test_increasing_in_delta(self, p, d1, d2):
        if abs(d1 - d2) < 1e-6:
            return
        lo, hi = sorted((d1, d2))
        fr = make_frame([[0]])
        assert q1(make_odds_shift(lo), fr, p)[0] < q1(make_odds_shift(hi), fr, p)[0]


class TestGracePeriod:

    def test_indicated_m_ago_forces_treatment(self):
        fr = make_frame([[1, 1, 1]], a_hist=[[0, 0]])
        assert q1(make_grace_period(2), fr, 0.1)[0] == 1.0

    def test_no_indication_forbids_treatment(self):
        assert q1(make_grace_period(2), make_frame([[0, 0, 0]]), 0.9)[0] == 0.0

    def test_within_grace_follows_observed(self):
        fr = make_frame([[0, 0, 1]])
        assert q1(make_grace_period(2), fr, 0.4)[0] == pytest.approx(0.4)

    def test_m_zero(self):
        assert q1(make_grace_period(0), make_frame([[1]]), 0.1)[0] == 1.0

    def test_uniform_variant_hazard(self):
        # two of three opportunities remain: initiate with probability 1/2
        fr = make_frame([[0, 1, 1]], a_hist=[[0, 0]])
        assert q1(make_grace_period_uniform(2), fr, 0.9)[0] == pytest.approx(0.5)

    @given(m=st.integers(0, 3), p=prob, hist=st.lists(st.integers(0, 1), min_size=1, max_size=5))
    def test_degenerate_where_required(self, m, p, hist):
        hist = sorted(hist)  # absorbing indicator
        fr = make_frame([hist])
        j = len(hist) - 1
        lag = hist[j - m] if j - m >= 0 else 0
        q = q1(make_grace_period(m), fr, p)[0]
        if lag == 1:
            assert q == 1.0
        elif hist[-1] == 0:
            assert q == 0.0


class TestRepresentative:

    def test_binary_threshold_one(self):
        q = evaluate_q(make_representative(1), make_frame([[0]]), binary_f(np.array([0.3])))
        assert q[0, 1] == 1.0

    def test_three_levels(self):
        spec = make_representative(1, (0, 1, 2))
        q = evaluate_q(spec, make_frame([[0]]), np.array([[0.2, 0.3, 0.5]]))
        np.testing.assert_allclose(q[0], [0, 0.375, 0.625])

    def test_empty_conditioning_event(self):
        spec = make_representative(1, (0, 1, 2))
        with pytest.raises(PositivityError):
            evaluate_q(spec, make_frame([[0]]), np.array([[1.0, 0.0, 0.0]]))


class TestStaticDynamic:

    def test_static(self):
        assert q1(make_static(1), make_frame([[0]]), 0.2)[0] == 1.0

    def test_dynamic_rule(self):
        spec = make_dynamic(TreatIfIndicator("lstar"))
        assert q1(spec, make_frame([[0]]), 0.7)[0] == 0.0

    @given(p1=prob, p2=prob)
    def test_static_ignores_f(self, p1, p2):
        fr = make_frame([[1]])
        assert q1(make_static(1), fr, p1)[0] == q1(make_static(1), fr, p2)[0]


def _all_specs():
    return [make_multiplicative_shift(0.3), make_multiplicative_shift(0.0), make_odds_shift(2.5),
            make_grace_period(1), make_grace_period_uniform(2), make_representative(1),
            make_static(0), make_static(1), make_dynamic(TreatIfIndicator("lstar"))]


class TestDistributionProperty:

    def test_masses_sum_to_one_vectorised(self):
        rng = np.random.default_rng(0)
        n = 100_000
        hist = np.sort(rng.integers(0, 2, size=(n, 3)), axis=1)
        fr = make_frame(hist, a_hist=np.zeros((n, 2)))
        f = binary_f(rng.uniform(1e-4, 1 - 1e-4, n))
        for spec in _all_specs():
            q = evaluate_q(spec, fr, f)
            assert np.all((q >= 0) & (q <= 1)), spec.kind
            assert np.max(np.abs(q.sum(axis=1) - 1)) <= 1e-12, spec.kind

    @settings(max_examples=50)
    @given(p=open_prob, s=st.integers(0, 1), delta=prob)
    def test_random_evaluations(self, p, s, delta):
        fr = make_frame([[s]])
        for spec in [make_multiplicative_shift(delta), make_odds_shift(delta + 0.01)]:
            q = evaluate_q(spec, fr, binary_f(np.array([p])))
            assert abs(q.sum() - 1) <= 1e-12

    def test_structured_point_terms_do_not_read_f(self):
        # with no observed term, q is the same whatever f is
        spec = make_grace_period(1)
        spec_no_obs = StructuredSpec(spec.point_terms, None, None, spec.support, "custom", {})
        fr = make_frame([[1, 1]], a_hist=[[0]])
        a = evaluate_q(spec_no_obs, fr, binary_f(np.array([0.1])))
        b = evaluate_q(spec_no_obs, fr, binary_f(np.array([0.9])))
        np.testing.assert_array_equal(a, b)

    def test_invalid_structured_sum(self):
        spec = make_static(1)
        bad = StructuredSpec(spec.point_terms * 2, None, None, spec.support, "custom", {})
        with pytest.raises(ValueError):
            evaluate_q(bad, make_frame([[0]]), binary_f(np.array([0.5])))

    @pytest.mark.parametrize("spec", _all_specs(), ids=lambda s: s.kind)
    def test_config_roundtrip(self, spec):
        back = spec_from_config(spec.to_config())
        fr = make_frame([[0, 1], [1, 1]], a_hist=[[0], [0]])
        f = binary_f(np.array([0.3, 0.6]))
        np.testing.assert_array_equal(evaluate_q(spec, fr, f), evaluate_q(back, fr, f))


class TestPositivity:

    def test_static_zero_propensity(self):
        panel = make_panel({1: [((0,), 0, 0, 1)]}, covariate_names=("lstar",), horizon=1)
        rep = check_positivity(make_static(1), panel, np.array([[0.0]]))
        assert len(rep.exact) == 1
        assert rep.exact[0].subject == 1

    def test_shift_unindicated_never_flagged(self, p1):
        panel = make_panel({1: [((0, 0), 0, 0, 1), ((0, 1), 1, 0, 1), ((0, 0), 0, 0, 1)]})
        for f in (0.0, 1e-4, 1.0):
            rep = check_positivity(make_multiplicative_shift(0.5), panel, np.full((1, 3), f))
            assert rep.violations == []

    def test_odds_shift_never_exact(self, p1):
        rng = np.random.default_rng(1)
        f = rng.choice([0.0, 0.005, 0.5, 1.0], size=(3, 3))
        rep = check_positivity(make_odds_shift(3.0), p1, f)
        assert rep.exact == []

    def test_near_violation(self):
        panel = make_panel({1: [((1,), 1, 0, 1)]}, covariate_names=("lstar",), horizon=1)
        rep = check_positivity(make_multiplicative_shift(0.5), panel, np.array([[0.005]]))
        assert len(rep.near) == 1 and rep.exact == []
