"""Simulation laboratory: the two study DGPs, model bundles with
misspecification switches, replicate orchestration and metrics."""
from __future__ import annotations

import itertools
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.special import expit

from .estimators import (ModelBundle, bootstrap_ci, estimate_ice, estimate_ipw,
                         estimate_tmle_crossfit, estimate_wice)
from .interventions import make_multiplicative_shift, spec_from_config
from .nuisance import FormulaSpec
from .oracle import LongitudinalLaw, enumerate_gformula, mc_truth, simulate

log = logging.getLogger(__name__)

_BINARY3 = np.array([[s, l1, l2] for s in (0, 1) for l1 in (0, 1) for l2 in (0, 1)], dtype=float)


class Study1Dgp(LongitudinalLaw):
    """Five intervals with binary ``lstar``, ``l1``, ``l2`` and binary treatment.

    Censoring ``C_{j+1}`` and survival ``Y_{j+1}`` depend on interval-``j``
    covariates and treatment.  ``lstar_lag_source`` names the covariate used
    for the untagged lag in the indicator model.
    """

    covariate_names = ("lstar", "l1", "l2")
    indicator = "lstar"
    horizon = 5
    covariate_support = _BINARY3
    markov = True

    def __init__(self, lstar_lag_source: str = "lstar", horizon: int = 5):
        if lstar_lag_source not in self.covariate_names:
            raise ValueError(f"unknown covariate {lstar_lag_source!r}")
        self.lstar_lag_source = lstar_lag_source
        self.horizon = int(horizon)

    def covariate_pmf(self, j, prev):
        a = prev.col("a")
        p_s = expit(-1 - a + prev.col(self.lstar_lag_source) - prev.col("l1") + prev.col("l2"))
        p_1 = expit(-1 + a + prev.col("l1") - prev.col("l2"))
        out = np.empty((prev.n_rows, 8))
        for k, (s, l1, l2) in enumerate(_BINARY3):
            p_2 = expit(1 + a + s + prev.col("l2"))
            out[:, k] = ((p_s if s else 1 - p_s) * (p_1 if l1 else 1 - p_1)
                         * (p_2 if l2 else 1 - p_2))
        return out

    def propensity(self, j, fr):
        return expit(-1 - 2 * fr.col("lstar") - fr.col("l1") + fr.col("l2") + 2 * fr.col("a_lag1"))

    def censor_prob(self, j, fr):
        return expit(-2 + fr.col("l1") - fr.col("l2"))

    def survival_prob(self, j, fr):
        return expit(1 + 3 * fr.col("a") - 2 * fr.col("lstar") + fr.col("l1") - fr.col("l2"))


class Study2Dgp(LongitudinalLaw):
    """Five intervals with continuous ``l1``, binary ``lstar``, baseline
    ``base_l1`` (binary) and ``base_l2`` (normal); treatment is absorbing.

    ``bare_l`` names the covariate read for the untagged ``L`` in the
    baseline indicator model and in the treatment interaction term.
    """

    covariate_names = ("lstar", "l1")
    baseline_names = ("base_l1", "base_l2")
    indicator = "lstar"
    horizon = 5

    def __init__(self, bare_l: str = "l1"):
        if bare_l not in self.covariate_names:
            raise ValueError(f"unknown covariate {bare_l!r}")
        self.bare_l = bare_l

    def draw_baseline(self, n, rng):
        return np.column_stack([rng.random(n) < 0.5, rng.standard_normal(n)]).astype(float)

    def draw_covariates(self, j, prev, rng):
        b1, b2 = prev.col("base_l1"), prev.col("base_l2")
        a, s_prev = prev.col("a"), prev.col("lstar")
        l1 = rng.normal(2 + a - s_prev + 0.5 * prev.col("l1") + b1, 1.0)
        if j == 0 and self.bare_l == "lstar":
            # the indicator cannot read itself; the untagged term then drops out
            lin = 1.5 + b1 + 0.25 * b2
        else:
            lin = 1.5 - a - 0.5 * l1 + s_prev + b1 + 0.25 * b2
        s = (rng.random(prev.n_rows) < expit(lin)).astype(float)
        return np.column_stack([s, l1])

    def propensity(self, j, fr):
        s, b1, b2 = fr.col("lstar"), fr.col("base_l1"), fr.col("base_l2")
        p = expit(-3 + s - 0.5 * fr.col("l1") + 0.25 * s * fr.col(self.bare_l)
                  + 0.5 * b1 + 0.25 * b2 + 0.5 * np.abs(b2))
        return np.where(fr.col("a_lag1") == 1, 1.0, p)

    def censor_prob(self, j, fr):
        l1, b2 = fr.col("l1"), fr.col("base_l2")
        return expit(-4 - fr.col("a") - fr.col("lstar") - 0.5 * np.sqrt(np.abs(l1 * b2))
                     + 1.5 * np.abs(l1) / (1 + np.exp(b2)))

    def survival_prob(self, j, fr):
        s, l1 = fr.col("lstar"), fr.col("l1")
        return expit(-1 + 2 * fr.col("a") - 2 * s + 0.25 * s * l1 + 0.5 * fr.col("base_l1")
                     + 0.75 * np.abs(l1 + fr.col("base_l2")) ** 1.5)


DGPS = {"study1": Study1Dgp, "study2": Study2Dgp}


def make_dgp(name: str, **kwargs) -> LongitudinalLaw:
    try:
        return DGPS[name](**kwargs)
    except KeyError:
        raise ValueError(f"unknown dgp {name!r}; choose from {sorted(DGPS)}") from None


def gen_study1(n: int, seed, **kwargs):
    return simulate(Study1Dgp(**kwargs), n, np.random.default_rng(seed))


def gen_study2(n: int, seed, **kwargs):
    return simulate(Study2Dgp(**kwargs), n, np.random.default_rng(seed))


# model bundles --------------------------------------------------------------------

STUDY1_TREATMENT = "lstar + l1 + l2 + a_lag1"
STUDY1_CENSORING = "l1 + l2"
STUDY1_OUTCOME = "saturated(a, lstar, l1, l2)"
STUDY2_TREATMENT = "lstar + l1 + base_l1 + base_l2"
STUDY2_OTHER = "a + lstar + l1 + base_l1 + base_l2"

SCENARIOS = ("all_correct", "outcome_only", "treatment_censoring_only")


def default_bundle(dgp: str, J: int = 5) -> ModelBundle:
    """Correctly specified parametric models (study 1) or the ensemble
    configuration (study 2)."""
    if dgp == "study1":
        return ModelBundle.build(J, STUDY1_TREATMENT, STUDY1_OUTCOME, STUDY1_CENSORING,
                                 tag="all_correct")
    if dgp == "study2":
        return ModelBundle.build(J, STUDY2_TREATMENT, STUDY2_OTHER, STUDY2_OTHER,
                                 learner_mode="ensemble", absorbing_treatment=True,
                                 tag="all_correct")
    raise ValueError(f"unknown dgp {dgp!r}")


def _wrong_treatment(f: FormulaSpec) -> FormulaSpec:
    return f.without(lambda col: "a_lag1" in col)


def _wrong_outcome(f: FormulaSpec) -> FormulaSpec:
    return f.without(lambda col: "a" in col and len(col) > 1)


def misspecify(bundle: ModelBundle, tag: str) -> ModelBundle:
    """Apply a misspecification scenario.

    * ``all_correct``: unchanged.
    * ``outcome_only``: treatment models lose ``a_lag1`` and censoring
      models are dropped.
    * ``treatment_censoring_only``: outcome models lose every product of the
      treatment with other variables.
    * ``ksplit:k``: treatment and censoring correct before ``k``, outcome
      models correct from ``k`` on, the rest misspecified as above.
    """
    J = bundle.horizon
    if tag == "all_correct":
        return bundle
    if tag == "outcome_only":
        return replace(bundle, treatment=tuple(_wrong_treatment(f) for f in bundle.treatment),
                       censoring=None, tag=tag)
    if tag == "treatment_censoring_only":
        return replace(bundle, outcome=tuple(_wrong_outcome(f) for f in bundle.outcome), tag=tag)
    if tag.startswith("ksplit:"):
        k = int(tag.split(":", 1)[1])
        if not 0 <= k <= J:
            raise ValueError(f"split point must lie in 0..{J}")
        trt = tuple(f if j < k else _wrong_treatment(f) for j, f in enumerate(bundle.treatment))
        out = tuple(f if j >= k else _wrong_outcome(f) for j, f in enumerate(bundle.outcome))
        cen = bundle.censoring
        if cen is not None:
            # a constant hazard ignores the censoring process after k
            cen = tuple(f if j < k else FormulaSpec(()) for j, f in enumerate(cen))
        return replace(bundle, treatment=trt, outcome=out, censoring=cen, tag=tag)
    raise ValueError(f"unknown scenario {tag!r}")


# truth ----------------------------------------------------------------------------

_TRUTH_CACHE: dict = {}


def compute_truth(dgp: str, spec, draws: int = 10**6, seed: int = 20240101,
                  dgp_options: dict | None = None) -> tuple[float, float]:
    """Target value and its Monte Carlo standard error (0 when exact)."""
    opts = dgp_options or {}
    key = (dgp, json.dumps(opts, sort_keys=True), json.dumps(spec.to_config(), sort_keys=True),
           draws, seed)
    if key not in _TRUTH_CACHE:
        law = make_dgp(dgp, **opts)
        if law.covariate_support is not None and not law.baseline_names:
            _TRUTH_CACHE[key] = (enumerate_gformula(law, spec), 0.0)
        else:
            r = mc_truth(law, spec, draws, seed)
            _TRUTH_CACHE[key] = (r.psi, r.mc_se)
    return _TRUTH_CACHE[key]


# scenarios ------------------------------------------------------------------------

ESTIMATORS = ("ipw", "ice", "wice", "tmle")


@dataclass(frozen=True)
class ScenarioConfig:
    dgp: str
    n: int
    delta: float = 0.5
    estimator: str = "wice"
    scenario: str = "all_correct"
    replicates: int = 200
    seed: int = 1
    M: int = 2
    B: int = 0
    truth: float | None = None
    truth_draws: int = 10**6
    scenario_id: str = ""
    dgp_options: dict = field(default_factory=dict)
    intervention: dict | None = None
    truncate: float | None = None

    def __post_init__(self):
        if self.dgp not in DGPS:
            raise ValueError(f"unknown dgp {self.dgp!r}")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"unknown estimator {self.estimator!r}")
        if self.replicates < 1:
            raise ValueError("replicates must be at least 1")
        if self.n < 1:
            raise ValueError("n must be positive")
        if self.scenario not in SCENARIOS and not self.scenario.startswith("ksplit:"):
            raise ValueError(f"unknown scenario {self.scenario!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown scenario keys {sorted(extra)}")
        return cls(**d)

    def spec(self):
        if self.intervention is not None:
            return spec_from_config(self.intervention)
        return make_multiplicative_shift(self.delta)

    @property
    def label(self) -> str:
        return self.scenario_id or (f"{self.dgp}-{self.estimator}-{self.scenario}"
                                    f"-n{self.n}-d{self.delta:g}")


@dataclass
class MetricsRow:
    scenario_id: str
    dgp: str
    estimator: str
    scenario: str
    n: int
    delta: float
    truth: float
    bias: float
    se: float
    rmse: float
    coverage: float
    width: float
    reps: int
    failures: int = 0
    failed: bool = False

    COLUMNS = ("scenario_id", "dgp", "estimator", "scenario", "n", "delta", "truth", "bias",
               "se", "rmse", "coverage", "width", "reps", "failures")

    def as_row(self) -> dict:
        d = asdict(self)
        return {c: d[c] for c in self.COLUMNS}

    @property
    def mc_band(self) -> float:
        """Standard error of the replicate mean."""
        return self.se / math.sqrt(self.reps) if self.reps else float("nan")


def summarize(estimates, truth, ci_low=None, ci_high=None) -> dict:
    """Bias, population SD, RMSE, coverage and mean width."""
    est = np.asarray(estimates, dtype=float)
    bias = float(np.mean(est) - truth)
    se = float(np.std(est))
    rmse = float(np.sqrt(np.mean((est - truth) ** 2)))
    cov = width = float("nan")
    if ci_low is not None and ci_high is not None:
        lo, hi = np.asarray(ci_low, dtype=float), np.asarray(ci_high, dtype=float)
        ok = np.isfinite(lo) & np.isfinite(hi)
        if ok.any():
            cov = float(np.mean((lo[ok] <= truth) & (truth <= hi[ok])))
            width = float(np.mean(hi[ok] - lo[ok]))
    return {"bias": bias, "se": se, "rmse": rmse, "coverage": cov, "width": width}


def replicate_seeds(seed: int, idx: int) -> tuple[int, int]:
    """Independent data and estimator seeds for one replicate."""
    s = np.random.SeedSequence([int(seed), int(idx)]).generate_state(2)
    return int(s[0]), int(s[1])


def run_replicate(config: ScenarioConfig, idx: int) -> dict:
    data_seed, est_seed = replicate_seeds(config.seed, idx)
    law = make_dgp(config.dgp, **config.dgp_options)
    spec = config.spec()
    rec = {"replicate": idx, "psi_hat": float("nan"), "ci_low": float("nan"),
           "ci_high": float("nan"), "error": ""}
    try:
        panel = simulate(law, config.n, np.random.default_rng(data_seed))
        bundle = misspecify(default_bundle(config.dgp, law.horizon), config.scenario)
        res = _run_estimator(config, panel, spec, bundle, est_seed)
        rec["psi_hat"] = res.psi_hat
        if res.ci_low is not None:
            rec["ci_low"], rec["ci_high"] = res.ci_low, res.ci_high
        if config.B and config.estimator != "tmle":
            lo, hi, _ = bootstrap_ci(
                lambda p: _run_estimator(config, p, spec, bundle, est_seed).psi_hat,
                panel, config.B, est_seed)
            rec["ci_low"], rec["ci_high"] = lo, hi
    except Exception as exc:  # noqa: BLE001 - recorded as a replicate failure
        rec["error"] = f"{type(exc).__name__}: {exc}"
    return rec


def _run_estimator(config, panel, spec, bundle, seed):
    if config.estimator == "ipw":
        return estimate_ipw(panel, spec, bundle, truncate=config.truncate, seed=seed)
    if config.estimator == "ice":
        return estimate_ice(panel, spec, bundle, seed=seed)
    if config.estimator == "wice":
        return estimate_wice(panel, spec, bundle, truncate=config.truncate, seed=seed)
    return estimate_tmle_crossfit(panel, spec, bundle, M=config.M, seed=seed,
                                  truncate=config.truncate)


def _replicate_task(args):
    config, idx = args
    return run_replicate(config, idx)


def default_workers() -> int:
    return max(1, int(os.environ.get("STOCHSURV_WORKERS", "1")))


def run_scenario(config: ScenarioConfig, workers: int | None = None):
    """Run every replicate of ``config`` and summarise against the truth.

    Returns ``(MetricsRow, records)``; records are ordered by replicate index
    whatever the completion order.
    """
    workers = default_workers() if workers is None else workers
    spec = config.spec()
    truth = config.truth
    if truth is None:
        truth, _ = compute_truth(config.dgp, spec, config.truth_draws,
                                 dgp_options=config.dgp_options)
    tasks = [(config, i) for i in range(config.replicates)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_replicate_task, tasks, chunksize=max(1, len(tasks) // (4 * workers))))
    else:
        records = [_replicate_task(t) for t in tasks]
    good = [r for r in records if not r["error"]]
    failures = len(records) - len(good)
    for r in records:
        if r["error"]:
            log.warning("replicate %d of %s failed: %s", r["replicate"], config.label, r["error"])
    if good:
        m = summarize([r["psi_hat"] for r in good], truth,
                      [r["ci_low"] for r in good], [r["ci_high"] for r in good])
    else:
        m = dict.fromkeys(("bias", "se", "rmse", "coverage", "width"), float("nan"))
    row = MetricsRow(config.label, config.dgp, config.estimator, config.scenario, config.n,
                     float(config.delta), float(truth), reps=len(good), failures=failures,
                     failed=failures > 0.05 * config.replicates, **m)
    return row, records


def load_grid(path) -> list[ScenarioConfig]:
    """Read a JSON grid: ``{"defaults": {...}, "scenarios": [{...}, ...]}``.

    Any scenario field given as a list in ``"expand"`` entries is crossed.
    """
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    defaults = doc.get("defaults", {})
    out = []
    for entry in doc.get("scenarios", []):
        merged = {**defaults, **entry}
        keys = [k for k, v in merged.items() if isinstance(v, list) and k != "dgp_options"]
        if keys:
            for combo in itertools.product(*(merged[k] for k in keys)):
                out.append(ScenarioConfig.from_dict({**merged, **dict(zip(keys, combo))}))
        else:
            out.append(ScenarioConfig.from_dict(merged))
    return out
