"""Acceptance criteria, each run at its stated tolerance.

Every test records one PASS/FAIL line, printed in the terminal summary.
``STOCHSURV_ACCEPT_REPS`` lowers the replicate count of the study-2
targeted-estimator check (default 300; 100 is the reduced smoke run).
"""
import os
import time

import numpy as np
import pytest

from stochsurv.eif import evaluate_eif, point_eif_example1, point_eif_example3
from stochsurv.estimators import (ModelBundle, _solve_gamma, estimate_ice, estimate_ipw,
                                  estimate_tmle_crossfit, estimate_wice)
from stochsurv.interventions import (TreatIfIndicator, binary_f, evaluate_q, make_dynamic,
                                     make_grace_period, make_grace_period_uniform,
                                     make_multiplicative_shift, make_odds_shift,
                                     make_representative, make_static)
from stochsurv.nuisance import logit
from stochsurv.oracle import (EmptyCellError, MarkovQ, ToyLawT1, empirical_plugin,
                              enumerate_gformula, mc_truth, simulate, true_nuisances)
from stochsurv.simlab import ScenarioConfig, Study1Dgp, Study2Dgp, default_bundle, run_scenario

from conftest import ACCEPTANCE, make_frame, single_interval_panel

STUDY2_REPS = int(os.environ.get("STOCHSURV_ACCEPT_REPS", "300"))


def record(number, name, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number} ({name}): {detail}"
    ACCEPTANCE.append(line)
    print(line)
    assert ok, line


def test_c1_truth_reproduction():
    t = time.perf_counter()
    mc = mc_truth(Study2Dgp(), make_multiplicative_shift(0.5), 10**6, seed=20240101)
    secs = time.perf_counter() - t
    ok = abs(mc.psi - 0.629) <= 0.003 and secs < 120
    record(1, "study-2 truth", ok,
           f"psi={mc.psi:.4f} (mc_se {mc.mc_se:.4f}) vs 0.629 +/- 0.003, {secs:.0f}s")


def test_c2_oracle_equivalence():
    law, spec = ToyLawT1(), make_multiplicative_shift(0.5)
    exact = enumerate_gformula(law, spec)
    mc = mc_truth(law, spec, 10**6, seed=99)
    gap = abs(exact - mc.psi) / mc.mc_se
    bundle = ModelBundle.build(2, "saturated(lstar, lstar_lag1, a_lag1)",
                               "saturated(a, lstar, a_lag1, lstar_lag1)", "saturated(a, lstar)")
    worst, compared = 0.0, 0
    for s in range(50):
        panel = simulate(law, 200, np.random.default_rng(1000 + s))
        try:
            ref = empirical_plugin(panel, spec)
        except EmptyCellError:
            continue
        worst = max(worst, abs(estimate_ice(panel, spec, bundle).psi_hat - ref))
        compared += 1
    ok = gap < 3 and worst <= 1e-10 and compared == 50
    record(2, "oracle equivalence", ok,
           f"enumeration vs MC {gap:.2f} SE; ICE vs plug-in max {worst:.1e} on {compared} panels")


def test_c3_eif_mean_zero():
    law = Study1Dgp()
    parts, ok = [], True
    for d in (0.25, 0.5, 0.75):
        spec = make_multiplicative_shift(d)
        panel = simulate(law, 10**5, np.random.default_rng(int(d * 100)))
        pi1, pc, ql = true_nuisances(law, spec, panel)
        u = evaluate_eif(spec, panel, pi1, pc, ql, psi=MarkovQ(law, spec).psi()).values
        z = abs(u.mean()) / (u.std(ddof=1) / np.sqrt(u.size))
        ok &= z < 3
        parts.append(f"delta={d}: |mean|/(SD/sqrt n)={z:.2f}")
    record(3, "EIF mean zero", ok, "; ".join(parts))


def test_c4_closed_forms():
    rng = np.random.default_rng(4)
    n = 10**4
    lstar, a, y = (rng.integers(0, 2, n).astype(float) for _ in range(3))
    m0, m1, f1 = (rng.uniform(0.02, 0.98, n) for _ in range(3))
    m_a = np.where(a == 1, m1, m0)
    panel = single_interval_panel(lstar, a, y)
    ql = np.stack([m0, m1], axis=1)[:, None, :]
    worst = 0.0
    for d in (0.0, 0.3, 0.5, 1.0):
        got = evaluate_eif(make_multiplicative_shift(d), panel, f1[:, None], None, ql, psi=0.5).values
        worst = max(worst, np.max(np.abs(got - point_eif_example3(y, a, lstar, m_a, m1, f1, d, 0.5))))
    special = np.max(np.abs(point_eif_example1(y, a, lstar, m_a, m1, f1, 0.5)
                            - point_eif_example3(y, a, lstar, m_a, m1, f1, 0.0, 0.5)))
    record(4, "closed forms", worst <= 1e-12 and special <= 1e-12,
           f"recursion vs shift closed form {worst:.1e}; treat-indicated vs shift at 0 {special:.1e}")


@pytest.fixture(scope="module")
def grid5():
    out = {}
    for est, sc in [("wice", "all_correct"), ("wice", "outcome_only"),
                    ("wice", "treatment_censoring_only"), ("ipw", "outcome_only"),
                    ("ice", "treatment_censoring_only")]:
        out[(est, sc)] = run_scenario(ScenarioConfig("study1", 2500, 0.5, est, sc,
                                                     replicates=200, seed=11))[0]
    for k in range(6):
        out[("wice", f"ksplit:{k}")] = run_scenario(ScenarioConfig(
            "study1", 2500, 0.5, "wice", f"ksplit:{k}", replicates=200, seed=11))[0]
    return out


def test_c5_robustness_grid(grid5):
    ok, parts = True, []
    for (est, sc), row in grid5.items():
        z = row.bias / row.mc_band
        if est == "wice":
            good = abs(z) <= 2
        else:
            good = abs(z) > 3
        ok &= good and row.failures == 0
        parts.append(f"{est}/{sc} bias={row.bias:+.4f} ({z:+.1f} bands){'' if good else ' !'}")
    record(5, "robustness grid", ok, "; ".join(parts))


def test_c6_efficiency_and_delta():
    se = {}
    for d in (0.25, 0.5, 0.75):
        for est in ("ice", "wice", "ipw"):
            se[est, d] = run_scenario(ScenarioConfig("study1", 2500, d, est, replicates=500,
                                                     seed=7))[0].se
    order = all(se["ice", d] <= 1.05 * se["wice", d] and se["wice", d] <= 1.05 * se["ipw", d]
                for d in (0.25, 0.5, 0.75))
    mono = all(se[e, 0.25] * 1.05 >= se[e, 0.5] and se[e, 0.5] * 1.05 >= se[e, 0.75]
               for e in ("ice", "wice", "ipw"))
    detail = ", ".join(f"{e}@{d}={se[e, d]:.4f}" for d in (0.25, 0.5, 0.75)
                       for e in ("ice", "wice", "ipw"))
    record(6, "efficiency and delta", order and mono, f"ordering={order} monotone={mono}; {detail}")


def test_c7_targeted_study2():
    rows = {est: run_scenario(ScenarioConfig("study2", 1000, 0.5, est, replicates=STUDY2_REPS,
                                             seed=71, M=2))[0]
            for est in ("tmle", "ice", "ipw")}
    t = rows["tmle"]
    ok_t = abs(t.bias) <= 0.01 and 0.92 <= t.coverage <= 0.98
    sig = {e: rows[e].bias < 0 and abs(rows[e].bias / rows[e].mc_band) > 1.96
           for e in ("ice", "ipw")}
    ok = ok_t and all(sig.values()) and STUDY2_REPS >= 300
    detail = (f"reps={STUDY2_REPS} truth={t.truth:.4f}; tmle bias={t.bias:+.4f} "
              f"coverage={t.coverage:.3f}; "
              + "; ".join(f"{e} bias={rows[e].bias:+.4f} ({rows[e].bias / rows[e].mc_band:+.1f} bands)"
                          for e in ("ice", "ipw")))
    record(7, "targeted estimator study 2", ok, detail)


def test_c8_exact_identities():
    checks = {}
    rng = np.random.default_rng(8)
    n = 10**5
    fr = make_frame(np.sort(rng.integers(0, 2, (n, 3)), axis=1), a_hist=np.zeros((n, 2)))
    f = binary_f(rng.uniform(0, 1, n))
    checks["q=f at delta 1"] = np.max(np.abs(evaluate_q(make_multiplicative_shift(1.0), fr, f) - f)) == 0
    worst = 0.0
    for spec in (make_multiplicative_shift(0.4), make_odds_shift(1.7), make_grace_period(1),
                 make_grace_period_uniform(2), make_representative(1), make_static(1),
                 make_dynamic(TreatIfIndicator("lstar"))):
        worst = max(worst, float(np.max(np.abs(evaluate_q(spec, fr, f).sum(axis=1) - 1))))
    checks["q sums to 1"] = worst <= 1e-12

    law = Study1Dgp()
    bundle = default_bundle("study1")
    nocens = simulate(law, 2000, np.random.default_rng(81), censoring=False)
    b0 = ModelBundle.build(5, bundle.treatment, bundle.outcome, None)
    ipw = estimate_ipw(nocens, make_multiplicative_shift(1.0), b0).psi_hat
    hazard = np.prod([nocens.alive[nocens.uncensored_next(j), j].mean() for j in range(5)])
    checks["IPW = hazard product"] = abs(ipw - hazard) <= 1e-12

    panel = simulate(law, 2000, np.random.default_rng(82))
    spec = make_multiplicative_shift(0.5)
    checks["WICE(1) = ICE"] = (estimate_wice(panel, spec, bundle, seed=2, unit_weights=True).psi_hat
                               == estimate_ice(panel, spec, bundle, seed=2).psi_hat)
    w = rng.uniform(0.2, 3, 500)
    tt = rng.random(500)
    g, ok = _solve_gamma(w, tt, np.full(500, logit(np.sum(w * tt) / np.sum(w))))
    checks["gamma fixed point"] = ok and abs(g) <= 1e-10
    res = estimate_tmle_crossfit(panel, spec, bundle, M=2, seed=3)
    checks["targeting residual"] = res.diagnostics["max_target_residual"] <= 1e-8
    record(8, "exact identities", all(checks.values()),
           ", ".join(f"{k}={'ok' if v else 'NO'}" for k, v in checks.items()))
