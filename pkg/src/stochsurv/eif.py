"""Efficient influence function for structured interventions.

The influence function is built from the backward T/Q recursion: with
``T_J = Y_J`` and ``Q_j = E(T_{j+1} | past through A_j)``,

    T_j = sum_k c_k h_k Q_j(a*_k) + c_f h_f Q_j(A_j) + c_p h_p sum_a p*(a) Q_j(a)

and ``T_j = 0`` once ``Y_j = 0``.  The per-subject value is

    U = sum_{j=1..J} R_j W_{j-1} (T_j - Q_{j-1}) + T_0 - psi

where ``R_j`` flags subjects still uncensored at ``j`` and ``W_{j-1}`` is the
cumulative product of ``q/f`` ratios times inverse probability of remaining
uncensored.
"""
from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np

from .data import Panel
from .interventions import StructuredSpec, binary_f, evaluate_q
from .nuisance import EPS

Z95 = 1.959964


class ContractError(ValueError):
    """Inputs do not carry what the computation needs."""


def _level_values(q_levels, spec, level, n):
    if isinstance(q_levels, Mapping):
        if level not in q_levels:
            raise ContractError(f"no Q evaluation at treatment level {level}")
        return np.asarray(q_levels[level], dtype=float)
    q_levels = np.asarray(q_levels, dtype=float)
    return q_levels[:, spec.level_index(level)]


def t_from_q(spec: StructuredSpec, frame, q_levels, alive=None) -> np.ndarray:
    """``T_j`` for the rows of ``frame``.

    Parameters
    ----------
    spec : StructuredSpec
    frame : HistoryFrame at interval ``j``; its treatment is read by the
        observed term.
    q_levels : (rows, K) array of ``Q_j`` at each support level, or a mapping
        level -> (rows,) array holding only the levels that are needed.
    alive : optional (rows,) ``Y_j`` flags; ``T_j`` is zero where it is 0.
    """
    if not isinstance(spec, StructuredSpec):
        raise ContractError("the T/Q recursion needs a structured intervention")
    n = frame.n_rows
    t = np.zeros(n)
    for term in spec.point_terms:
        t += term.c * term.h(frame) * _level_values(q_levels, spec, term.a_star, n)
    if spec.observed_term is not None:
        if frame.a is None:
            raise ContractError("observed term needs the observed treatment on the frame")
        q_obs = np.zeros(n)
        for level in spec.support:
            hit = frame.a == level
            if hit.any():
                q_obs[hit] = _level_values(q_levels, spec, level, n)[hit]
        t += spec.observed_term.c * spec.observed_term.h(frame) * q_obs
    if spec.reference_term is not None:
        rt = spec.reference_term
        p = np.asarray(rt.p_star(frame), dtype=float)
        ref = np.zeros(n)
        for k, level in enumerate(spec.support):
            if np.any(p[:, k] > 0):
                ref += p[:, k] * _level_values(q_levels, spec, level, n)
        t += rt.c * rt.h(frame) * ref
    if alive is not None:
        t = np.where(np.asarray(alive) == 1, t, 0.0)
    return t


@dataclass
class EifValue:
    """Per-subject influence values and their components.

    ``values == terminal + interval.sum(1) + t0 - psi`` by construction;
    ``interval[:, j-1]`` holds the correction for ``j = 1..J-1`` and
    ``terminal`` the ``j = J`` term.
    """

    values: np.ndarray
    psi: float
    terminal: np.ndarray
    interval: np.ndarray
    t0: np.ndarray
    log_weights: np.ndarray
    clamped: int

    def resum(self) -> np.ndarray:
        return self.terminal + self.interval.sum(axis=1) + self.t0 - self.psi

    def component_rows(self, ids):
        """Long-form ``(id, term, value)`` rows; term 0 is ``T_0``, term J the terminal."""
        J = self.interval.shape[1] + 1
        rows = []
        for i, sid in enumerate(ids):
            rows.append((sid, 0, self.t0[i]))
            for j in range(1, J):
                rows.append((sid, j, self.interval[i, j - 1]))
            rows.append((sid, J, self.terminal[i]))
        return rows


def observed_ratio_logs(spec, panel: Panel, pi1, pc=None):
    """Per-interval ``log(q/f) - log(1 - P(C=1))`` at the observed treatment.

    Returns the ``(n, J)`` array (NaN where no record) and the number of
    denominators raised to the clamp floor.
    """
    n, J = panel.n, panel.horizon
    out = np.full((n, J), np.nan)
    clamped = 0
    for j in range(J):
        rows = np.flatnonzero(panel.at_risk(j))
        if rows.size == 0:
            continue
        fr = panel.frame(j, rows)
        f = binary_f(pi1[rows, j])
        q = evaluate_q(spec, fr, f)
        a = panel.treatment[rows, j]
        q_a = np.where(a == 1, q[:, 1], q[:, 0])
        f_a = np.where(a == 1, f[:, 1], f[:, 0])
        clamped += int(np.sum(f_a < EPS))
        with np.errstate(divide="ignore"):
            lr = np.log(q_a) - np.log(np.maximum(f_a, EPS))
        if pc is not None:
            stay = 1.0 - pc[rows, j]
            clamped += int(np.sum(stay < EPS))
            lr = lr - np.log(np.maximum(stay, EPS))
        out[rows, j] = lr
    return out, clamped


def evaluate_eif(spec: StructuredSpec, panel: Panel, pi1, pc, q_levels, psi=None) -> EifValue:
    """Influence values at the supplied nuisances.

    Parameters
    ----------
    spec : StructuredSpec
    panel : Panel
    pi1 : (n, J) fitted ``P(A_j = 1 | past)``
    pc : (n, J) fitted ``P(C_{j+1} = 1 | past, A_j)`` or None without censoring
    q_levels : (n, J, K) fitted ``Q_j`` at every support level
    psi : centring value; defaults to the solution of ``mean(U) = 0``
    """
    if not isinstance(spec, StructuredSpec):
        raise ContractError("the influence function is available for structured interventions only")
    n, J = panel.n, panel.horizon
    q_levels = np.asarray(q_levels, dtype=float)
    lr, clamped = observed_ratio_logs(spec, panel, pi1, pc)
    logw = np.zeros(n)
    corr = np.zeros((n, J))
    a_idx = np.nan_to_num(panel.treatment, nan=0).astype(int)
    for j in range(J):
        risk = panel.at_risk(j)
        logw = np.where(risk, logw + np.where(risk, lr[:, j], 0.0), logw)
        u = panel.uncensored_next(j)
        rows = np.flatnonzero(u)
        if rows.size == 0:
            continue
        q_prev = q_levels[rows, j, a_idx[rows, j]]
        y = panel.alive[rows, j]
        t = y.astype(float).copy()
        if j + 1 < J:
            nxt = rows[y == 1]
            if nxt.size:
                fr = panel.frame(j + 1, nxt)
                t[y == 1] = t_from_q(spec, fr, q_levels[nxt, j + 1])
        corr[rows, j] = np.exp(logw[rows]) * (t - q_prev)
    fr0 = panel.frame(0, np.arange(n))
    t0 = t_from_q(spec, fr0, q_levels[:, 0])
    terminal = corr[:, J - 1].copy()
    interval = corr[:, : J - 1].copy()
    total = terminal + interval.sum(axis=1) + t0
    if psi is None:
        psi = float(np.mean(total))
    return EifValue(total - psi, float(psi), terminal, interval, t0, logw, clamped)


def eif_variance(values) -> tuple[float, float]:
    """Variance of the mean implied by influence values and the 95% half-width."""
    values = np.asarray(values, dtype=float)
    if values.size < 2:
        raise ValueError("need at least two influence values")
    var = float(np.var(values, ddof=1) / values.size)
    return var, Z95 * float(np.sqrt(var))


# single time point closed forms ----------------------------------------------------

def _f_at(a, f1):
    return np.where(np.asarray(a) == 1, f1, 1.0 - np.asarray(f1))


def point_eif_example3(y, a, lstar, m_a, m_1, f1, delta, psi):
    """Multiplicative shift with one treatment time.

    ``m_a`` and ``m_1`` are the outcome regression at the observed and at the
    treated level, ``f1`` the propensity.
    """
    a, lstar = np.asarray(a, dtype=float), np.asarray(lstar, dtype=float)
    f_a = _f_at(a, f1)
    q_a = (1 - delta) * a * lstar + f_a * (lstar * delta + 1 - lstar)
    return (q_a / np.maximum(f_a, EPS) * (y - m_a) + m_a * (lstar * delta + 1 - lstar)
            + m_1 * lstar * (1 - delta) - psi)


def point_eif_example1(y, a, lstar, m_a, m_1, f1, psi):
    """Treat everyone with the indication, leave the rest untouched."""
    a, lstar = np.asarray(a, dtype=float), np.asarray(lstar, dtype=float)
    f_a = _f_at(a, f1)
    return y * (1 - lstar) + a * lstar / np.maximum(f_a, EPS) * (y - m_a) + m_1 * lstar - psi


def point_eif_example2(y, r, m_r, m_1, fr1, psi):
    """Representative intervention with one treatment time.

    ``r`` is the coarsened treatment ``I(A >= threshold)``, ``fr1`` is
    ``P(R = 1 | L)`` and ``m_1`` is ``E(Y | R = 1, L)``.
    """
    r = np.asarray(r, dtype=float)
    return r / np.maximum(fr1, EPS) * (y - m_r) + m_1 - psi
