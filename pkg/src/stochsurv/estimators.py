"""IPW, ICE, weighted ICE and cross-fit TMLE for survival under an intervention."""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from .data import Panel
from .eif import eif_variance, evaluate_eif, observed_ratio_logs, t_from_q
from .interventions import GeneralSpec, StructuredSpec, binary_f, check_positivity, evaluate_q
from .nuisance import (EPS, FormulaSpec, LogisticLearner, clamp, default_library, fit_ensemble,
                       kfold, logit)


class EstimationError(RuntimeError):
    """An estimator cannot be computed on the given data."""


# model bundles ---------------------------------------------------------------------

def _formulas(obj, J):
    """One formula repeated over ``J`` intervals, or a per-interval sequence.

    A string, a FormulaSpec or a list of term strings is a single formula.
    """
    if obj is None:
        return None
    if isinstance(obj, (str, FormulaSpec)) or all(isinstance(t, str) for t in obj):
        one = obj if isinstance(obj, FormulaSpec) else FormulaSpec.parse(obj)
        return (one,) * J
    out = tuple(f if isinstance(f, FormulaSpec) else FormulaSpec.parse(f) for f in obj)
    if len(out) != J:
        raise ValueError(f"expected {J} per-interval formulas, got {len(out)}")
    return out


@dataclass(frozen=True)
class ModelBundle:
    """Per-interval model specifications for treatment, censoring and ``Q_j``.

    ``learner_mode`` is ``"parametric"`` (weighted logistic regression on the
    formula) or ``"ensemble"`` (cross-validated convex ensemble built from
    the formula's variables).  With ``absorbing_treatment`` the propensity is
    fit among the untreated only and ``P(A_j = 1) = 1`` after initiation.
    """

    treatment: tuple
    outcome: tuple
    censoring: tuple | None = None
    learner_mode: str = "parametric"
    absorbing_treatment: bool = False
    tag: str = "custom"

    @classmethod
    def build(cls, J, treatment, outcome, censoring=None, **kwargs) -> "ModelBundle":
        return cls(_formulas(treatment, J), _formulas(outcome, J), _formulas(censoring, J), **kwargs)

    @property
    def horizon(self) -> int:
        return len(self.outcome)

    def check(self, panel: Panel) -> None:
        J = panel.horizon
        if len(self.treatment) != J or len(self.outcome) != J:
            raise ValueError(f"bundle covers {len(self.outcome)} intervals, panel has {J}")
        if self.censoring is not None and len(self.censoring) != J:
            raise ValueError("censoring formulas must cover every interval")
        if self.learner_mode not in ("parametric", "ensemble"):
            raise ValueError(f"unknown learner mode {self.learner_mode!r}")


@dataclass
class _Constant:
    p: float

    def predict(self, frame) -> np.ndarray:
        return np.full(frame.n_rows, self.p)


@dataclass
class _FitLog:
    nonconverged: int = 0
    models: int = 0


def _fit_binary(formula, frame, y, w, mode, cv_labels, log: _FitLog):
    y = np.asarray(y, dtype=float)
    log.models += 1
    if y.size == 0:
        raise EstimationError("no rows to fit a model on")
    if np.all(y == y[0]) and y[0] in (0.0, 1.0):
        return _Constant(float(y[0]))
    if mode == "ensemble":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return fit_ensemble(default_library(formula), frame, y, cv_labels, w)
    fit = LogisticLearner(formula).fit(frame, y, w)
    if not fit.converged:
        log.nonconverged += 1
    return fit


def _cv_labels(panel, rows, M, seed):
    """Subject-level internal CV labels for the rows of an ensemble fit."""
    ids = panel.ids[rows]
    if len(np.unique(ids)) < M:
        return np.zeros(len(rows), dtype=int)
    return kfold(ids, M, seed).of(ids)


# weights ----------------------------------------------------------------------------

@dataclass
class NuisanceFit:
    pi1: np.ndarray
    pc: np.ndarray | None
    treatment_models: list
    censoring_models: list
    log: _FitLog


@dataclass
class WeightTable:
    """Cumulative ``W_j = prod_{k<=j} q_k/pi_k / (1 - P(C_{k+1}=1))``.

    NaN where the subject has no record at ``j``.
    """

    log_ratio: np.ndarray
    cumulative: np.ndarray
    at_risk: np.ndarray
    clamped: int = 0
    truncated_at: float | None = None
    n_truncated: int = 0

    @property
    def max_weight(self) -> float:
        w = self.cumulative[self.at_risk]
        return float(np.max(w)) if w.size else float("nan")

    def ess(self, panel: Panel) -> list:
        out = []
        for j in range(self.cumulative.shape[1]):
            w = self.cumulative[panel.uncensored_next(j), j]
            out.append(float(w.sum() ** 2 / np.sum(w**2)) if w.size and np.sum(w**2) > 0 else 0.0)
        return out


def fit_nuisances(panel: Panel, bundle: ModelBundle, train=None, seed=0,
                  cv_folds: int = 2, fit_censoring: bool = True) -> NuisanceFit:
    """Fit per-interval treatment and censoring models on ``train`` rows and
    predict them on every record of the panel."""
    bundle.check(panel)
    n, J = panel.n, panel.horizon
    train = np.ones(n, dtype=bool) if train is None else np.asarray(train, dtype=bool)
    log = _FitLog()
    pi1 = np.full((n, J), np.nan)
    use_c = fit_censoring and bundle.censoring is not None and panel.has_censoring
    pc = np.full((n, J), np.nan) if use_c else None
    tmods, cmods = [], []
    for j in range(J):
        risk = panel.at_risk(j)
        rows = np.flatnonzero(risk)
        if rows.size == 0:
            tmods.append(None)
            cmods.append(None)
            continue
        fr_all = panel.frame(j, rows, with_treatment=False)
        eligible = np.ones(rows.size, dtype=bool)
        if bundle.absorbing_treatment and j > 0:
            eligible = panel.treatment[rows, j - 1] == 0
        fit_rows = rows[eligible & train[rows]]
        if fit_rows.size == 0:
            raise EstimationError(f"no training rows for the treatment model at interval {j}")
        fr = panel.frame(j, fit_rows, with_treatment=False)
        model = _fit_binary(bundle.treatment[j], fr, panel.treatment[fit_rows, j], None,
                            bundle.learner_mode, _cv_labels(panel, fit_rows, cv_folds, seed + j),
                            log)
        p = np.ones(rows.size)
        p[eligible] = model.predict(fr_all.take(np.flatnonzero(eligible)))
        pi1[rows, j] = p
        tmods.append(model)
        if use_c:
            fit_rows = rows[train[rows]]
            frc = panel.frame(j, fit_rows)
            cm = _fit_binary(bundle.censoring[j], frc, panel.censored[fit_rows, j], None,
                             bundle.learner_mode,
                             _cv_labels(panel, fit_rows, cv_folds, seed + 1000 + j), log)
            pc[rows, j] = cm.predict(panel.frame(j, rows))
            cmods.append(cm)
    return NuisanceFit(pi1, pc, tmods, cmods, log)


def weight_table(spec, panel: Panel, pi1, pc=None, truncate: float | None = None) -> WeightTable:
    """Cumulative weights from fitted propensities (and censoring probabilities).

    ``truncate`` is an optional percentile (e.g. 99.5) at which cumulative
    weights are capped; it changes the estimand and is reported.
    """
    lr, clamped = observed_ratio_logs(spec, panel, pi1, pc)
    at_risk = ~np.isnan(lr)
    with np.errstate(over="ignore"):
        cum = np.exp(np.cumsum(np.where(at_risk, lr, 0.0), axis=1))
    cum = np.where(at_risk, cum, np.nan)
    cap, n_cut = None, 0
    if truncate is not None:
        if not 0 < truncate <= 100:
            raise ValueError("truncation percentile must lie in (0, 100]")
        cap = float(np.percentile(cum[at_risk], truncate))
        n_cut = int(np.sum(cum[at_risk] > cap))
        cum = np.where(at_risk, np.minimum(cum, cap), np.nan)
    if np.any(~np.isfinite(cum[at_risk])):
        raise EstimationError("non-finite weights after clamping")
    return WeightTable(lr, cum, at_risk, clamped, cap, n_cut)


def fit_nuisance_weights(panel: Panel, bundle: ModelBundle, spec, truncate=None, seed=0,
                         train=None, cv_folds: int = 2):
    """Fit treatment and censoring models and return ``(WeightTable, NuisanceFit)``."""
    fit = fit_nuisances(panel, bundle, train=train, seed=seed, cv_folds=cv_folds)
    if fit.log.nonconverged:
        warnings.warn(f"{fit.log.nonconverged} nuisance fits did not converge; damped estimates used")
    return weight_table(spec, panel, fit.pi1, fit.pc, truncate), fit


# results ------------------------------------------------------------------------------

def _json_num(x):
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else None


@dataclass
class EstimateResult:
    method: str
    psi_hat: float
    ci_low: float | None
    ci_high: float | None
    n: int
    J: int
    delta: float | None = None
    se: float | None = None
    diagnostics: dict = field(default_factory=dict)
    artifacts: object = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {"method": self.method, "delta": _json_num(self.delta),
                "psi_hat": _json_num(self.psi_hat), "ci_low": _json_num(self.ci_low),
                "ci_high": _json_num(self.ci_high), "se": _json_num(self.se),
                "n": self.n, "J": self.J, "diagnostics": self.diagnostics}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _delta(spec):
    return spec.params.get("delta") if hasattr(spec, "params") else None


def _weight_diagnostics(wt: WeightTable, panel, spec, pi1) -> dict:
    report = check_positivity(spec, panel, pi1)
    return {"max_weight": wt.max_weight, "clamped": wt.clamped,
            "positivity_flags": report.summary(), "ess": wt.ess(panel),
            "truncated_at": wt.truncated_at, "n_truncated": wt.n_truncated}


# IPW ------------------------------------------------------------------------------------

def estimate_ipw(panel: Panel, spec, bundle: ModelBundle, truncate=None, seed=0) -> EstimateResult:
    """Product of weighted discrete survival probabilities.

    Each factor solves the weighted mean equation for ``Y_{j+1}`` among
    subjects at risk at ``j`` and uncensored at ``j + 1``.
    """
    wt, fit = fit_nuisance_weights(panel, bundle, spec, truncate=truncate, seed=seed)
    psi, factors = ipw_from_weights(panel, wt)
    diag = _weight_diagnostics(wt, panel, spec, fit.pi1)
    diag["hazard_factors"] = factors
    diag["nonconverged_fits"] = fit.log.nonconverged
    return EstimateResult("ipw", psi, None, None, panel.n, panel.horizon, _delta(spec),
                          diagnostics=diag)


def ipw_from_weights(panel: Panel, wt: WeightTable):
    factors = []
    for j in range(panel.horizon):
        rows = panel.uncensored_next(j)
        w = wt.cumulative[rows, j]
        tot = w.sum()
        if not tot > 0:
            raise EstimationError(f"zero total weight among subjects at risk at interval {j}")
        factors.append(float(np.sum(w * panel.alive[rows, j]) / tot))
    return float(np.prod(factors)), factors


# ICE family ----------------------------------------------------------------------------

@dataclass
class _Backward:
    models: list
    q_levels: np.ndarray  # (n, J, K), NaN where no record
    t0: np.ndarray


def _t_values(spec, frame, q_lv, pi1_rows):
    if isinstance(spec, StructuredSpec):
        return t_from_q(spec, frame, q_lv)
    q = evaluate_q(spec, frame, binary_f(pi1_rows))
    return np.sum(q * q_lv, axis=1)


def _backward(panel, spec, bundle, weights=None, rows_mask=None, pi1=None, seed=0,
              cv_folds=2, log=None):
    """Backward regressions of ``T_{j+1}`` on the history through ``A_j``.

    Models are fit on ``rows_mask`` subjects; ``Q_j`` is predicted at every
    support level for all records so other subjects can reuse the fits.
    """
    n, J = panel.n, panel.horizon
    levels = np.asarray(spec.support, dtype=float)
    K = len(levels)
    mask = np.ones(n, dtype=bool) if rows_mask is None else rows_mask
    log = log or _FitLog()
    q_levels = np.full((n, J, K), np.nan)
    t_next = np.where(np.isnan(panel.alive[:, J - 1]), np.nan, panel.alive[:, J - 1])
    models = [None] * J
    for j in range(J - 1, -1, -1):
        fit_rows = np.flatnonzero(panel.uncensored_next(j) & mask)
        if fit_rows.size == 0:
            raise EstimationError(f"no uncensored subjects to fit the outcome model at interval {j}")
        fr = panel.frame(j, fit_rows)
        w = None if weights is None else weights[fit_rows, j]
        y = t_next[fit_rows]
        model = _fit_binary(bundle.outcome[j], fr, y, w, bundle.learner_mode,
                            _cv_labels(panel, fit_rows, cv_folds, seed + 2000 + j), log)
        models[j] = model
        rows = np.flatnonzero(panel.at_risk(j))
        frj = panel.frame(j, rows)
        for k, lev in enumerate(levels):
            q_levels[rows, j, k] = model.predict(frj.with_treatment(lev))
        t_j = np.full(n, np.nan)
        t_j[rows] = _t_values(spec, frj, q_levels[rows, j], None if pi1 is None else pi1[rows, j])
        if j > 0:
            prev = np.flatnonzero(panel.uncensored_next(j - 1))
            alive = panel.alive[prev, j - 1] == 1
            t_next = np.full(n, np.nan)
            t_next[prev] = np.where(alive, np.nan_to_num(t_j[prev]), 0.0)
        else:
            t_next = t_j
    return _Backward(models, q_levels, t_next)


def _needs_pi(spec):
    return isinstance(spec, GeneralSpec)


def estimate_ice(panel: Panel, spec, bundle: ModelBundle, seed=0) -> EstimateResult:
    """Iterated conditional expectations with unweighted regressions."""
    return _ice(panel, spec, bundle, None, "ice", seed)


def estimate_wice(panel: Panel, spec, bundle: ModelBundle, truncate=None, seed=0,
                  unit_weights: bool = False) -> EstimateResult:
    """Weighted ICE: each regression is weighted by the cumulative ratio ``W_j``.

    With ``unit_weights`` the weights are replaced by ones, which reproduces
    :func:`estimate_ice`.
    """
    if not isinstance(spec, StructuredSpec):
        raise EstimationError("weighted ICE needs a structured intervention")
    if unit_weights:
        return _ice(panel, spec, bundle, None, "wice", seed)
    wt, fit = fit_nuisance_weights(panel, bundle, spec, truncate=truncate, seed=seed)
    res = _ice(panel, spec, bundle, wt.cumulative, "wice", seed)
    res.diagnostics.update(_weight_diagnostics(wt, panel, spec, fit.pi1))
    res.diagnostics["nonconverged_fits"] += fit.log.nonconverged
    return res


def _ice(panel, spec, bundle, weights, method, seed):
    bundle.check(panel)
    pi1 = None
    log = _FitLog()
    if _needs_pi(spec):
        pi1 = fit_nuisances(panel, bundle, seed=seed, fit_censoring=False).pi1
    bw = _backward(panel, spec, bundle, weights=weights, pi1=pi1, seed=seed, log=log)
    psi = float(np.mean(bw.t0))
    res = EstimateResult(method, psi, None, None, panel.n, panel.horizon, _delta(spec),
                         diagnostics={"nonconverged_fits": log.nonconverged})
    res.artifacts = bw
    return res


# TMLE ----------------------------------------------------------------------------------

def _solve_gamma(w, t, off, tol=1e-12):
    """Root of ``sum w (t - expit(off + g))``; returns ``(gamma, ok)``."""
    if w.size == 0 or not np.sum(w) > 0:
        return 0.0, False

    def score(g):
        return float(np.sum(w * (t - expit(off + g))))

    s0 = score(0.0)
    if s0 == 0.0:
        return 0.0, True
    step = 1.0 if s0 > 0 else -1.0
    lo, hi = 0.0, step
    for _ in range(60):
        if np.sign(score(hi)) != np.sign(s0):
            break
        lo, hi = hi, hi * 2
    else:
        return 0.0, False
    a, b = sorted((lo, hi))
    try:
        g = brentq(score, a, b, xtol=tol, rtol=4 * np.finfo(float).eps, maxiter=500)
    except (ValueError, RuntimeError):
        return 0.0, False
    return float(g), True


def estimate_tmle_crossfit(panel: Panel, spec: StructuredSpec, bundle: ModelBundle, M: int = 2,
                           seed=0, truncate=None) -> EstimateResult:
    """Cross-fit targeted estimator with an EIF-based 95% interval.

    For each split ``m`` the nuisance models and the untargeted ``Q_j`` fits
    are trained on the other splits; on split ``m`` each ``Q_j`` is moved by
    an intercept on the logit scale that solves the weighted score, working
    backwards from ``J - 1``.
    """
    if not isinstance(spec, StructuredSpec):
        raise EstimationError("the targeted estimator needs a structured intervention")
    bundle.check(panel)
    n, J = panel.n, panel.horizon
    folds = kfold(panel.ids, M, seed)
    fold_of = folds.of(panel.ids)
    levels = np.asarray(spec.support, dtype=float)
    psis, eif_vals, components = [], np.empty(n), []
    gammas = np.zeros((M, J))
    failed, residuals = 0, []
    log = _FitLog()
    lam_seed = int(np.random.SeedSequence([int(seed), 7]).generate_state(1)[0] % (2**31))
    max_w, clamped, pos_exact, pos_near = 0.0, 0, 0, 0
    for m in range(1, M + 1):
        test = fold_of == m
        train = ~test
        nf = fit_nuisances(panel, bundle, train=train, seed=lam_seed + 17 * m, cv_folds=M)
        log.nonconverged += nf.log.nonconverged
        wt = weight_table(spec, panel, nf.pi1, nf.pc, truncate)
        bw = _backward(panel, spec, bundle, rows_mask=train, seed=lam_seed + 17 * m,
                       cv_folds=M, log=log)
        q_star = bw.q_levels.copy()
        t_next = np.where(np.isnan(panel.alive[:, J - 1]), np.nan, panel.alive[:, J - 1])
        for j in range(J - 1, -1, -1):
            rows = np.flatnonzero(panel.uncensored_next(j) & test)
            a_idx = panel.treatment[rows, j].astype(int)
            q_obs = clamp(bw.q_levels[rows, j, a_idx])
            w = wt.cumulative[rows, j]
            g, ok = _solve_gamma(w, t_next[rows], logit(q_obs))
            if not ok:
                failed += 1
                g = 0.0
            gammas[m - 1, j] = g
            if rows.size:
                resid = np.sum(w * (t_next[rows] - expit(logit(q_obs) + g))) / max(w.sum(), EPS)
                residuals.append(abs(float(resid)))
            risk = np.flatnonzero(panel.at_risk(j) & test)
            q_star[risk, j] = expit(logit(clamp(bw.q_levels[risk, j])) + g)
            frj = panel.frame(j, risk)
            t_j = np.full(n, np.nan)
            t_j[risk] = t_from_q(spec, frj, q_star[risk, j])
            if j > 0:
                prev = np.flatnonzero(panel.uncensored_next(j - 1) & test)
                alive = panel.alive[prev, j - 1] == 1
                t_next = np.full(n, np.nan)
                t_next[prev] = np.where(alive, np.nan_to_num(t_j[prev]), 0.0)
            else:
                t0 = t_j
        idx = np.flatnonzero(test)
        psi_m = float(np.mean(t0[idx]))
        psis.append(psi_m)
        sub = panel.take(idx)
        pc_sub = None if nf.pc is None else nf.pc[idx]
        ev = evaluate_eif(spec, sub, nf.pi1[idx], pc_sub, q_star[idx], psi=psi_m)
        eif_vals[idx] = ev.values
        components.extend(ev.component_rows(sub.ids))
        max_w = max(max_w, float(np.nanmax(wt.cumulative[idx])) if idx.size else 0.0)
        clamped += ev.clamped
        rep = check_positivity(spec, sub, nf.pi1[idx])
        pos_exact += len(rep.exact)
        pos_near += len(rep.near)
    psi = float(np.mean(psis))
    var, half = eif_variance(eif_vals)
    diag = {"gammas": gammas.tolist(), "gamma_failures": failed,
            "max_target_residual": max(residuals) if residuals else 0.0,
            "max_weight": max_w, "clamped": clamped,
            "positivity_flags": {"exact": pos_exact, "near": pos_near, "threshold": 0.01},
            "fold_psi": psis, "nonconverged_fits": log.nonconverged}
    res = EstimateResult("tmle", psi, psi - half, psi + half, n, J, _delta(spec),
                         se=math.sqrt(var), diagnostics=diag)
    components.sort(key=lambda r: (r[0], r[1]))
    res.artifacts = {"eif": eif_vals, "components": components}
    return res


# bootstrap -------------------------------------------------------------------------------

def bootstrap_ci(estimator, panel: Panel, B: int, seed=0, level: float = 0.95,
                 max_failure: float = 0.10):
    """Percentile interval from subject-level resampling.

    ``estimator`` maps a Panel to a float.  Resamples on which it raises are
    redrawn; more than ``max_failure * B`` failures is an error.
    Returns ``(low, high, failures)``.
    """
    if B < 2:
        raise ValueError("need at least two bootstrap resamples")
    rng = np.random.default_rng(seed)
    n = panel.n
    stats, failures = [], 0
    new_ids = np.arange(n)
    while len(stats) < B:
        idx = rng.integers(0, n, size=n)
        try:
            stats.append(float(estimator(panel.take(idx, new_ids=new_ids))))
        except Exception:  # noqa: BLE001 - failures are counted and redrawn
            failures += 1
            if failures > max_failure * B:
                raise EstimationError(f"{failures} of {len(stats) + failures} bootstrap "
                                      "resamples failed") from None
    alpha = (1 - level) / 2
    lo, hi = np.quantile(stats, [alpha, 1 - alpha])
    return float(lo), float(hi), failures
