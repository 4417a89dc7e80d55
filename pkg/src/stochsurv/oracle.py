"""Ground truth for the g-formula under an intervention.

Three independent routes are provided:

* :func:`enumerate_gformula` sums the generalized g-formula exactly over
  every history of a law with finite covariate support;
* :func:`mc_truth` simulates the law forward with treatment drawn from the
  intervention distribution and censoring switched off;
* :func:`empirical_plugin` plugs empirical conditional frequencies of a
  discrete panel into the same enumeration.

Laws are described by :class:`LongitudinalLaw` subclasses whose conditional
probabilities are vectorised over :class:`~stochsurv.data.HistoryFrame`
rows.  At interval ``j`` covariates are drawn given the frame of interval
``j - 1`` (with its treatment set); at ``j = 0`` that frame is empty and
every lagged value reads 0.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import HistoryFrame, Panel
from .interventions import binary_f, evaluate_q

MAX_TERMS = 10**7


class EmptyCellError(ValueError):
    """An empirical conditional needed by the plug-in has no observations."""


class LongitudinalLaw:
    """Base class for data-generating laws.

    Subclasses set ``covariate_names``, ``horizon`` and implement
    :meth:`propensity` and :meth:`survival_prob`, plus either
    :meth:`draw_covariates` or (for finite supports) ``covariate_support``
    together with :meth:`covariate_pmf`.
    """

    covariate_names: tuple = ()
    baseline_names: tuple = ()
    indicator: str | None = "lstar"
    horizon: int = 1
    support: tuple = (0, 1)
    covariate_support: np.ndarray | None = None
    markov: bool = False

    def draw_baseline(self, n, rng) -> np.ndarray:
        return np.zeros((n, len(self.baseline_names)))

    def covariate_pmf(self, j, prev: HistoryFrame) -> np.ndarray:
        raise NotImplementedError

    def draw_covariates(self, j, prev: HistoryFrame, rng) -> np.ndarray:
        pmf = self.covariate_pmf(j, prev)
        u = rng.random(pmf.shape[0])
        idx = (np.cumsum(pmf, axis=1) < u[:, None]).sum(axis=1)
        idx = np.minimum(idx, pmf.shape[1] - 1)
        return self.covariate_support[idx]

    def propensity(self, j, frame: HistoryFrame) -> np.ndarray:
        raise NotImplementedError

    def treatment_pmf(self, j, frame: HistoryFrame) -> np.ndarray:
        return binary_f(self.propensity(j, frame))

    def censor_prob(self, j, frame: HistoryFrame) -> np.ndarray:
        return np.zeros(frame.n_rows)

    def survival_prob(self, j, frame: HistoryFrame) -> np.ndarray:
        raise NotImplementedError

    # helpers for subclasses
    def empty_frame(self, baseline) -> HistoryFrame:
        n = baseline.shape[0]
        p = len(self.covariate_names)
        return HistoryFrame(-1, self.covariate_names, self.baseline_names, baseline,
                            np.zeros((n, 0, p)), np.zeros((n, 0)), np.zeros(n))


def _sample_levels(q, support, rng):
    u = rng.random(q.shape[0])
    idx = (np.cumsum(q, axis=1) < u[:, None]).sum(axis=1)
    idx = np.minimum(idx, q.shape[1] - 1)
    return np.asarray(support, dtype=float)[idx]


def simulate(law: LongitudinalLaw, n: int, rng, spec=None, censoring: bool = True,
             ids=None) -> Panel:
    """Draw ``n`` trajectories; with ``spec`` treatment follows the intervention."""
    J, p = law.horizon, len(law.covariate_names)
    base = np.asarray(law.draw_baseline(n, rng), dtype=float).reshape(n, -1)
    cov = np.full((n, J, p), np.nan)
    trt, cen, alv = (np.full((n, J), np.nan) for _ in range(3))
    nrec = np.zeros(n, dtype=int)
    rows = np.arange(n)
    for j in range(J):
        if rows.size == 0:
            break
        if j == 0:
            prev = law.empty_frame(base)
        else:
            prev = HistoryFrame(j - 1, law.covariate_names, law.baseline_names, base[rows],
                                cov[rows, :j], trt[rows, : j - 1], trt[rows, j - 1])
        cov[rows, j] = law.draw_covariates(j, prev, rng)
        fr = HistoryFrame(j, law.covariate_names, law.baseline_names, base[rows],
                          cov[rows, : j + 1], trt[rows, :j])
        f = law.treatment_pmf(j, fr)
        dist = f if spec is None else evaluate_q(spec, fr, f)
        a = _sample_levels(dist, law.support, rng)
        trt[rows, j] = a
        fr = fr.with_treatment(a)
        pc = law.censor_prob(j, fr) if censoring else np.zeros(rows.size)
        c = (rng.random(rows.size) < pc).astype(float)
        y = (rng.random(rows.size) < law.survival_prob(j, fr)).astype(float)
        cen[rows, j] = c
        alv[rows, j] = np.where(c == 1, np.nan, y)
        nrec[rows] += 1
        rows = rows[(c == 0) & (y == 1)]
    ids = np.arange(n) if ids is None else np.asarray(ids)
    return Panel(ids, cov, trt, cen, alv, nrec, law.covariate_names, law.indicator,
                 base, law.baseline_names)


@dataclass(frozen=True)
class MCResult:
    psi: float
    mc_se: float
    draws: int
    seed: int | None

    def to_dict(self) -> dict:
        return {"psi": self.psi, "mc_se": self.mc_se, "draws": self.draws, "seed": self.seed}


def mc_truth(law: LongitudinalLaw, spec, draws: int, seed=None, chunk: int = 250_000) -> MCResult:
    """Monte Carlo survival at the horizon under ``spec`` without censoring."""
    rng = np.random.default_rng(seed)
    alive = 0
    done = 0
    while done < draws:
        m = min(chunk, draws - done)
        panel = simulate(law, m, rng, spec=spec, censoring=False)
        alive += int(np.nansum(panel.outcome()))
        done += m
    psi = alive / draws
    return MCResult(psi, math.sqrt(max(psi * (1 - psi), 0.0) / draws), draws, seed)


# exact enumeration ---------------------------------------------------------------

def _frame(law, j, mass_rows, base, cov_hist, trt_hist, a=None):
    return HistoryFrame(j, law.covariate_names, law.baseline_names, base, cov_hist, trt_hist, a)


def enumerate_gformula(law: LongitudinalLaw, spec, horizon: int | None = None,
                       max_terms: int = MAX_TERMS) -> float:
    """Exact generalized g-formula by summing over all reachable histories.

    Histories carrying zero mass are pruned as the tree is expanded; the final
    sum uses compensated summation.
    """
    if law.covariate_support is None:
        raise ValueError("enumeration needs a law with finite covariate support")
    if law.baseline_names:
        raise ValueError("enumeration does not support baseline covariates")
    J = law.horizon if horizon is None else int(horizon)
    S = np.asarray(law.covariate_support, dtype=float)
    m, K, p = S.shape[0], len(spec.support), S.shape[1]
    bound = float(m * K) ** J
    if bound > max_terms:
        raise ValueError(f"history space has up to {bound:.3g} terms "
                         f"({m} covariate values x {K} treatment levels, J={J}); "
                         f"limit is {max_terms:.3g}")
    levels = np.asarray(spec.support, dtype=float)
    mass = np.ones(1)
    cov = np.zeros((1, 0, p))
    trt = np.zeros((1, 0))
    for j in range(J):
        r = mass.size
        base = np.zeros((r, 0))
        if j == 0:
            prev = law.empty_frame(base)
        else:
            prev = _frame(law, j - 1, mass, base, cov, trt[:, :-1], trt[:, -1])
        pmf = law.covariate_pmf(j, prev)
        mass = (mass[:, None] * pmf).ravel()
        cov = np.concatenate([np.repeat(cov, m, axis=0),
                              np.tile(S, (r, 1))[:, None, :]], axis=1)
        trt = np.repeat(trt, m, axis=0)
        keep = mass > 0
        mass, cov, trt = mass[keep], cov[keep], trt[keep]
        r = mass.size
        fr = _frame(law, j, mass, np.zeros((r, 0)), cov, trt)
        q = evaluate_q(spec, fr, law.treatment_pmf(j, fr))
        mass = (mass[:, None] * q).ravel()
        cov = np.repeat(cov, K, axis=0)
        trt = np.concatenate([np.repeat(trt, K, axis=0), np.tile(levels, r)[:, None]], axis=1)
        keep = mass > 0
        mass, cov, trt = mass[keep], cov[keep], trt[keep]
        r = mass.size
        fr = _frame(law, j, mass, np.zeros((r, 0)), cov, trt[:, :-1], trt[:, -1])
        mass = mass * law.survival_prob(j, fr)
        keep = mass > 0
        mass, cov, trt = mass[keep], cov[keep], trt[keep]
    return math.fsum(mass.tolist())


class MarkovQ:
    """True ``Q_j`` for a law whose future depends on the past only through
    ``(L_j, A_j)``, under an intervention whose history functions and the
    propensity look back at most one interval.

    Computed by backward dynamic programming over the finite state space.
    """

    def __init__(self, law: LongitudinalLaw, spec):
        if not law.markov or law.covariate_support is None:
            raise ValueError("MarkovQ needs a first-order Markov law with finite support")
        self.law, self.spec = law, spec
        S = np.asarray(law.covariate_support, dtype=float)
        self.S = S
        m, K, p = S.shape[0], len(spec.support), S.shape[1]
        J = law.horizon
        levels = np.asarray(spec.support, dtype=float)
        # rows enumerate (s, a) pairs
        s_idx = np.repeat(np.arange(m), K)
        a_val = np.tile(levels, m)
        self.tables = [None] * J
        for j in range(J - 1, -1, -1):
            cur = self._state_frame(j, S[s_idx], a_val)
            surv = law.survival_prob(j, cur)
            if j == J - 1:
                Q = surv
            else:
                pmf = law.covariate_pmf(j + 1, cur)  # (mK, m)
                nxt_s = np.tile(np.arange(m), m * K)
                prev_rows = np.repeat(np.arange(m * K), m)
                nf = self._next_frame(j + 1, S[s_idx[prev_rows]], a_val[prev_rows], S[nxt_s])
                q = evaluate_q(spec, nf, law.treatment_pmf(j + 1, nf))  # (mK*m, K)
                cont = (q * self.tables[j + 1][nxt_s]).sum(axis=1)
                Q = surv * (pmf.ravel() * cont).reshape(m * K, m).sum(axis=1)
            self.tables[j] = Q.reshape(m, K)

    def _state_frame(self, j, l, a):
        r, p = l.shape
        cov = np.zeros((r, j + 1, p))
        cov[:, j] = l
        trt = np.zeros((r, j))
        return HistoryFrame(j, self.law.covariate_names, self.law.baseline_names,
                            np.zeros((r, 0)), cov, trt, a)

    def _next_frame(self, j, l_prev, a_prev, l):
        r, p = l.shape
        cov = np.zeros((r, j + 1, p))
        cov[:, j - 1] = l_prev
        cov[:, j] = l
        trt = np.zeros((r, j))
        trt[:, j - 1] = a_prev
        return HistoryFrame(j, self.law.covariate_names, self.law.baseline_names,
                            np.zeros((r, 0)), cov, trt)

    def state_index(self, cov_rows) -> np.ndarray:
        match = np.all(cov_rows[:, None, :] == self.S[None, :, :], axis=2)
        if not np.all(match.any(axis=1)):
            raise ValueError("covariate value outside the law's support")
        return match.argmax(axis=1)

    def levels(self, j, frame) -> np.ndarray:
        """``Q_j`` at every treatment level for the rows of ``frame``."""
        return self.tables[j][self.state_index(frame.cov_hist[:, j])]

    def psi(self) -> float:
        law = self.law
        S = self.S
        m = S.shape[0]
        base = np.zeros((1, 0))
        pmf = law.covariate_pmf(0, law.empty_frame(base))[0]
        fr = self._state_frame(0, S, None)
        fr = HistoryFrame(0, law.covariate_names, law.baseline_names, np.zeros((m, 0)),
                          fr.cov_hist, fr.trt_hist)
        q = evaluate_q(self.spec, fr, law.treatment_pmf(0, fr))
        return float(np.sum(pmf * (q * self.tables[0]).sum(axis=1)))


# built-in toy law ------------------------------------------------------------------

class ToyLawT1(LongitudinalLaw):
    """Two intervals, one binary indication ``lstar``, binary treatment.

    Every conditional depends on the full history and is tabulated as an
    affine function of the past so it stays inside (0.05, 0.95).
    """

    covariate_names = ("lstar",)
    indicator = "lstar"
    horizon = 2
    covariate_support = np.array([[0.0], [1.0]])

    def covariate_pmf(self, j, prev):
        if j == 0:
            p1 = np.full(prev.n_rows, 0.5)
        else:
            p1 = 0.40 + 0.20 * prev.col("lstar") - 0.10 * prev.col("a")
        return np.column_stack([1 - p1, p1])

    def propensity(self, j, fr):
        if j == 0:
            return 0.45 + 0.10 * fr.col("lstar")
        return (0.35 + 0.20 * fr.col("a_lag1") + 0.10 * fr.col("lstar")
                - 0.05 * fr.col("lstar_lag1"))

    def censor_prob(self, j, fr):
        return 0.05 + 0.05 * fr.col("lstar")

    def survival_prob(self, j, fr):
        if j == 0:
            return 0.80 + 0.10 * fr.col("a") - 0.10 * fr.col("lstar")
        return (0.75 + 0.10 * fr.col("a") - 0.15 * fr.col("lstar")
                + 0.05 * fr.col("a_lag1") - 0.05 * fr.col("lstar_lag1"))


# empirical plug-in ---------------------------------------------------------------

class EmpiricalLaw(LongitudinalLaw):
    """Empirical conditional frequencies of a discrete panel, given full history.

    Survival frequencies at ``j`` are computed among subjects still
    uncensored at ``j + 1``.
    """

    def __init__(self, panel: Panel):
        if panel.baseline_names:
            raise ValueError("empirical plug-in does not support baseline covariates")
        self.covariate_names = panel.covariate_names
        self.indicator = panel.indicator
        self.horizon = panel.horizon
        obs = panel.covariates[~np.isnan(panel.covariates[:, :, 0])] if panel.covariate_names \
            else np.zeros((0, 0))
        self.covariate_support = np.unique(obs, axis=0)
        self._support_key = {tuple(r): k for k, r in enumerate(self.covariate_support)}
        self.cov_counts, self.trt_counts, self.surv_counts = {}, {}, {}
        for i in range(panel.n):
            for j in range(int(panel.n_records[i])):
                past = self._key(panel.covariates[i, :j], panel.treatment[i, :j])
                l = tuple(panel.covariates[i, j])
                self._bump(self.cov_counts, (j, past), self._support_key[l])
                hist = past + (l,)
                self._bump(self.trt_counts, (j, hist), float(panel.treatment[i, j]))
                if panel.censored[i, j] == 0:
                    self._bump(self.surv_counts, (j, hist, float(panel.treatment[i, j])),
                               float(panel.alive[i, j]))

    @staticmethod
    def _bump(table, key, value):
        cell = table.setdefault(key, {})
        cell[value] = cell.get(value, 0) + 1

    @staticmethod
    def _key(cov_hist, trt_hist):
        return tuple(tuple(c) for c in cov_hist) + tuple(("a", float(a)) for a in trt_hist)

    def _past_key(self, frame, r, upto):
        cov = frame.cov_hist[r, :upto]
        trt = frame.trt_hist[r, :upto] if upto <= frame.trt_hist.shape[1] else \
            np.append(frame.trt_hist[r], frame.a[r])
        return self._key(cov, trt)

    def covariate_pmf(self, j, prev):
        m = self.covariate_support.shape[0]
        out = np.zeros((prev.n_rows, m))
        for r in range(prev.n_rows):
            past = () if j == 0 else self._key(prev.cov_hist[r, :j],
                                              np.append(prev.trt_hist[r], prev.a[r]))
            cell = self.cov_counts.get((j, past))
            if not cell:
                raise EmptyCellError(f"no subjects at risk at interval {j} with history {past}")
            tot = sum(cell.values())
            for k, c in cell.items():
                out[r, k] = c / tot
        return out

    def propensity(self, j, fr):
        out = np.zeros(fr.n_rows)
        for r in range(fr.n_rows):
            hist = self._key(fr.cov_hist[r, :j], fr.trt_hist[r, :j]) + (tuple(fr.cov_hist[r, j]),)
            cell = self.trt_counts.get((j, hist))
            if not cell:
                raise EmptyCellError(f"no treatment data at interval {j} for history {hist}")
            out[r] = cell.get(1.0, 0) / sum(cell.values())
        return out

    def survival_prob(self, j, fr):
        out = np.zeros(fr.n_rows)
        for r in range(fr.n_rows):
            hist = self._key(fr.cov_hist[r, :j], fr.trt_hist[r, :j]) + (tuple(fr.cov_hist[r, j]),)
            a = float(fr.a[r])
            cell = self.surv_counts.get((j, hist, a))
            if not cell:
                raise EmptyCellError(f"no uncensored subjects at interval {j} with history "
                                     f"{hist} and treatment {a:g}")
            out[r] = cell.get(1.0, 0) / sum(cell.values())
        return out


def empirical_plugin(panel: Panel, spec) -> float:
    """Generalized g-formula evaluated at the empirical conditionals of ``panel``."""
    return enumerate_gformula(EmpiricalLaw(panel), spec)


def true_nuisances(law: LongitudinalLaw, spec, panel: Panel):
    """True propensities, censoring probabilities and ``Q_j`` level tables on
    the records of ``panel`` for a Markov law; NaN where no record exists."""
    mq = MarkovQ(law, spec)
    n, J, K = panel.n, panel.horizon, len(spec.support)
    pi1 = np.full((n, J), np.nan)
    pc = np.full((n, J), np.nan)
    q_levels = np.full((n, J, K), np.nan)
    for j in range(J):
        rows = np.flatnonzero(panel.at_risk(j))
        if rows.size == 0:
            continue
        fr = panel.frame(j, rows)
        pi1[rows, j] = law.propensity(j, fr)
        pc[rows, j] = law.censor_prob(j, fr)
        q_levels[rows, j] = mq.levels(j, fr)
    return pi1, pc, q_levels
