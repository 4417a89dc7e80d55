"""Intervention treatment distributions and generalized positivity checks.

Two kinds of specification are supported:

* :class:`StructuredSpec` -- distributions of the form::

      q(a | past) = sum_k c_k h_k(past) 1{a = a*_k}
                    + c_f h_f(past) f(a | past)
                    + c_p h_p(past) p*(a | past)

  where the ``h`` are known functions of the measured past (never of ``f``)
  and ``p*`` is a known distribution.  This is the class for which the
  generic influence-function machinery in :mod:`stochsurv.eif` applies.
* :class:`GeneralSpec` -- an arbitrary map ``(past, f) -> q``, used for the
  odds shift and representative interventions.

History functions are small picklable callables taking a
:class:`~stochsurv.data.HistoryFrame` and returning one value per row.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import HistoryFrame, HistoryView, Panel

MASS_TOL = 1e-12


class PositivityError(ValueError):
    """Raised when an intervention cannot be evaluated for lack of support."""


# history functions ------------------------------------------------------------

@dataclass(frozen=True)
class Const:
    value: float = 1.0

    def __call__(self, frame):
        return np.full(frame.n_rows, float(self.value))


@dataclass(frozen=True)
class Col:
    name: str

    def __call__(self, frame):
        return frame.col(self.name)


@dataclass(frozen=True)
class OneMinus:
    inner: Callable

    def __call__(self, frame):
        return 1.0 - self.inner(frame)


@dataclass(frozen=True)
class Product:
    factors: tuple

    def __call__(self, frame):
        out = np.ones(frame.n_rows)
        for fn in self.factors:
            out = out * fn(frame)
        return out


@dataclass(frozen=True)
class ShiftedComplement:
    """``l* delta + 1 - l*``: the observed-term weight of the multiplicative shift."""

    indicator: str
    delta: float

    def __call__(self, frame):
        ls = frame.col(self.indicator)
        return ls * self.delta + 1.0 - ls


@dataclass(frozen=True)
class RuleIs:
    rule: Callable
    level: float

    def __call__(self, frame):
        return (np.asarray(self.rule(frame), dtype=float) == self.level).astype(float)


@dataclass(frozen=True)
class TreatIfIndicator:
    indicator: str

    def __call__(self, frame):
        return frame.col(self.indicator)


def _lag_name(indicator, m):
    return indicator if m == 0 else f"{indicator}_lag{m}"


# specifications ------------------------------------------------------------------

@dataclass(frozen=True)
class PointTerm:
    c: float
    h: Callable
    a_star: float


@dataclass(frozen=True)
class ObservedTerm:
    c: float
    h: Callable


@dataclass(frozen=True)
class ReferenceTerm:
    c: float
    h: Callable
    p_star: Callable  # frame -> (rows, K) masses over the support


@dataclass(frozen=True, eq=False)
class StructuredSpec:
    point_terms: tuple = ()
    observed_term: ObservedTerm | None = None
    reference_term: ReferenceTerm | None = None
    support: tuple = (0, 1)
    kind: str = "custom"
    params: dict = field(default_factory=dict)

    def level_index(self, a) -> int:
        return self.support.index(a)

    def to_config(self) -> dict:
        return {"kind": self.kind, **self.params}


@dataclass(frozen=True, eq=False)
class GeneralSpec:
    q_function: Callable  # (frame, f (rows, K)) -> (rows, K)
    support: tuple = (0, 1)
    kind: str = "custom"
    params: dict = field(default_factory=dict)

    def level_index(self, a) -> int:
        return self.support.index(a)

    def to_config(self) -> dict:
        return {"kind": self.kind, **self.params}


# constructors --------------------------------------------------------------------

def make_multiplicative_shift(delta: float, indicator: str = "lstar") -> StructuredSpec:
    """Scale the probability of not being treated by ``delta`` when ``l* = 1``.

    ``q(a) = (1 - delta) l* a + (l* delta + 1 - l*) f(a)``; ``delta = 1`` is no
    intervention and ``delta = 0`` treats everyone with the indication.
    """
    if not 0.0 <= delta <= 1.0:
        raise ValueError(f"multiplicative shift needs delta in [0, 1], got {delta}")
    return StructuredSpec(
        point_terms=(PointTerm(1.0 - delta, Col(indicator), 1),),
        observed_term=ObservedTerm(1.0, ShiftedComplement(indicator, delta)),
        kind="mult_shift",
        params={"delta": float(delta), "indicator": indicator},
    )


@dataclass(frozen=True)
class OddsShift:
    delta: float

    def __call__(self, frame, f):
        f1 = f[..., 1]
        num = self.delta * f1
        den = num + f[..., 0]
        q1 = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
        return np.stack([1.0 - q1, q1], axis=-1)


def make_odds_shift(delta: float) -> GeneralSpec:
    """Multiply the treatment odds by ``delta`` (incremental propensity score shift)."""
    if not delta > 0:
        raise ValueError(f"odds shift needs delta > 0, got {delta}")
    return GeneralSpec(OddsShift(float(delta)), kind="odds_shift", params={"delta": float(delta)})


def make_grace_period(m: int, indicator: str = "lstar") -> StructuredSpec:
    """Treat once the indication is ``m`` intervals old, never without indication,
    and leave treatment to the observed process inside the grace window."""
    if m < 0 or int(m) != m:
        raise ValueError(f"grace period must be a nonnegative integer, got {m}")
    m = int(m)
    lagged = Col(_lag_name(indicator, m))
    current = Col(indicator)
    return StructuredSpec(
        point_terms=(PointTerm(1.0, lagged, 1), PointTerm(1.0, OneMinus(current), 0)),
        observed_term=ObservedTerm(1.0, Product((OneMinus(lagged), current))),
        kind="grace",
        params={"m": m, "indicator": indicator},
    )


@dataclass(frozen=True)
class UniformInitiation:
    """Known probability of initiating inside an ``m``-interval grace window,
    uniform over the intervals remaining before the deadline."""

    indicator: str
    m: int

    def __call__(self, frame):
        elapsed = np.zeros(frame.n_rows)
        for k in range(1, self.m + 1):
            elapsed += frame.col(_lag_name(self.indicator, k))
        remaining = np.maximum(self.m - elapsed + 1.0, 1.0)
        p1 = 1.0 / remaining
        return np.stack([1.0 - p1, p1], axis=-1)


def make_grace_period_uniform(m: int, indicator: str = "lstar") -> StructuredSpec:
    """Grace period whose within-window initiation follows a known uniform
    schedule instead of the observed treatment process."""
    if m < 1 or int(m) != m:
        raise ValueError(f"uniform grace period needs an integer m >= 1, got {m}")
    m = int(m)
    lagged = Col(_lag_name(indicator, m))
    current = Col(indicator)
    return StructuredSpec(
        point_terms=(PointTerm(1.0, lagged, 1), PointTerm(1.0, OneMinus(current), 0)),
        reference_term=ReferenceTerm(1.0, Product((OneMinus(lagged), current)),
                                     UniformInitiation(indicator, m)),
        kind="grace_uniform",
        params={"m": m, "indicator": indicator},
    )


@dataclass(frozen=True)
class Representative:
    threshold: float
    support: tuple

    def __call__(self, frame, f):
        keep = (np.asarray(self.support, dtype=float) >= self.threshold).astype(float)
        masked = f * keep
        total = masked.sum(axis=-1, keepdims=True)
        if np.any(total <= 0):
            raise PositivityError(
                f"no observed treatment mass at or above threshold {self.threshold}")
        return masked / total


def make_representative(threshold: float, support=(0, 1)) -> GeneralSpec:
    """Draw treatment from the observed distribution restricted to ``a >= threshold``."""
    support = tuple(support)
    if not any(a >= threshold for a in support):
        raise ValueError("threshold lies above every treatment level")
    return GeneralSpec(Representative(float(threshold), support), support=support,
                       kind="representative", params={"threshold": float(threshold),
                                                       "support": list(support)})


def make_static(a_star=1, support=(0, 1)) -> StructuredSpec:
    support = tuple(support)
    if a_star not in support:
        raise ValueError(f"{a_star} is not in the treatment support {support}")
    return StructuredSpec(point_terms=(PointTerm(1.0, Const(1.0), a_star),), support=support,
                          kind="static", params={"a_star": a_star})


def make_dynamic(rule: Callable, support=(0, 1), name: str = "custom") -> StructuredSpec:
    """Deterministic rule ``history -> level``, one point term per level."""
    support = tuple(support)
    terms = tuple(PointTerm(1.0, RuleIs(rule, float(a)), a) for a in support)
    params = {"rule": name}
    if isinstance(rule, TreatIfIndicator):
        params = {"rule": "indicator", "indicator": rule.indicator}
    return StructuredSpec(point_terms=terms, support=support, kind="dynamic", params=params)


def spec_from_config(cfg: dict):
    """Build a specification from its serialised form (``kind`` plus parameters)."""
    cfg = dict(cfg)
    kind = cfg.pop("kind")
    ind = cfg.get("indicator", "lstar")
    if kind == "mult_shift":
        return make_multiplicative_shift(float(cfg["delta"]), ind)
    if kind == "odds_shift":
        return make_odds_shift(float(cfg["delta"]))
    if kind == "grace":
        return make_grace_period(int(cfg["m"]), ind)
    if kind == "grace_uniform":
        return make_grace_period_uniform(int(cfg["m"]), ind)
    if kind == "representative":
        return make_representative(float(cfg["threshold"]), tuple(cfg.get("support", (0, 1))))
    if kind == "static":
        return make_static(cfg.get("a_star", 1))
    if kind == "dynamic":
        if cfg.get("rule", "indicator") != "indicator":
            raise ValueError("only the 'indicator' dynamic rule can be built from a config")
        return make_dynamic(TreatIfIndicator(ind))
    raise ValueError(f"unknown intervention kind {kind!r}")


# evaluation ----------------------------------------------------------------------

def _as_frame(history):
    if isinstance(history, HistoryView):
        return history.to_frame()
    if isinstance(history, HistoryFrame):
        return history
    raise TypeError(f"expected HistoryView or HistoryFrame, got {type(history).__name__}")


def binary_f(p1) -> np.ndarray:
    """Stack ``P(A=1)`` into ``(..., 2)`` masses over ``(0, 1)``."""
    p1 = np.asarray(p1, dtype=float)
    return np.stack([1.0 - p1, p1], axis=-1)


def evaluate_q(spec, history, f) -> np.ndarray:
    """Evaluate the intervention distribution at ``history`` given the observed
    treatment distribution ``f`` (shape ``(K,)`` or ``(rows, K)``)."""
    frame = _as_frame(history)
    f = np.asarray(f, dtype=float)
    single = f.ndim == 1
    f2 = np.broadcast_to(f, (frame.n_rows, f.shape[-1])) if single else f
    K = len(spec.support)
    if f2.shape[-1] != K:
        raise ValueError(f"f has {f2.shape[-1]} levels, spec support has {K}")
    if isinstance(spec, GeneralSpec):
        q = np.asarray(spec.q_function(frame, f2), dtype=float)
    else:
        q = _structured_q(spec, frame, f2)
        total = q.sum(axis=-1)
        if np.any(np.abs(total - 1.0) > 1e-9) or np.any(q < -1e-12):
            bad = int(np.argmax(np.abs(total - 1.0)))
            raise ValueError(f"{spec.kind} does not define a distribution at row {bad} "
                             f"(masses {q[bad]}); check the indicator history")
    return q[0] if single else q


def _structured_q(spec: StructuredSpec, frame, f):
    q = np.zeros_like(f)
    for term in spec.point_terms:
        q[:, spec.level_index(term.a_star)] += term.c * term.h(frame)
    if spec.observed_term is not None:
        q += (spec.observed_term.c * spec.observed_term.h(frame))[:, None] * f
    if spec.reference_term is not None:
        rt = spec.reference_term
        q += (rt.c * rt.h(frame))[:, None] * np.asarray(rt.p_star(frame), dtype=float)
    return q


# positivity ----------------------------------------------------------------------

@dataclass(frozen=True)
class PositivityFlag:
    subject: int
    j: int
    level: float
    q_mass: float
    f_mass: float

    @property
    def exact(self) -> bool:
        return self.f_mass == 0.0


@dataclass(frozen=True)
class PositivityReport:
    violations: list
    near_violation_threshold: float

    @property
    def exact(self) -> list:
        return [v for v in self.violations if v.exact]

    @property
    def near(self) -> list:
        return [v for v in self.violations if not v.exact]

    def summary(self) -> dict:
        return {"exact": len(self.exact), "near": len(self.near),
                "threshold": self.near_violation_threshold}


def check_positivity(spec, panel: Panel, fitted_f, threshold: float = 0.01) -> PositivityReport:
    """List subject-intervals where ``q`` puts mass on a level whose estimated
    observed probability is below ``threshold`` (exactly zero is an exact
    violation of generalized positivity).

    Levels where ``q`` does not exceed ``f`` are never flagged: the weight
    ``q / f`` there is at most one, whatever the size of ``f``.

    ``fitted_f`` is ``(n, J)`` holding ``P(A_j = 1)`` for binary treatment or
    ``(n, J, K)`` masses; entries for subjects not at risk are ignored.
    """
    fitted_f = np.asarray(fitted_f, dtype=float)
    flags = []
    for j in range(panel.horizon):
        rows = np.flatnonzero(panel.at_risk(j))
        if rows.size == 0:
            continue
        fj = fitted_f[rows, j]
        fmat = binary_f(fj) if fitted_f.ndim == 2 else fj
        q = evaluate_q(spec, panel.frame(j, rows), fmat)
        hit = (q > 0) & (fmat < threshold) & (q > fmat)
        for r, k in zip(*np.nonzero(hit)):
            flags.append(PositivityFlag(int(panel.ids[rows[r]]), j, spec.support[k],
                                        float(q[r, k]), float(fmat[r, k])))
    return PositivityReport(flags, threshold)
