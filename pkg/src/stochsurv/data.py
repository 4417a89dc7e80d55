"""Longitudinal observed-data structures.

A subject contributes one record per interval ``j`` holding the covariates
``L_j``, the treatment ``A_j``, the censoring indicator ``C_{j+1}`` and the
survival indicator ``Y_{j+1}``.  Records stop at the first death or
censoring, or at the horizon ``J``.

Internally a :class:`Panel` stores everything in padded wide arrays of shape
``(n, J, ...)`` so that estimators can work interval-by-interval with numpy.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

BASELINE_PREFIX = "base_"
_LAG_RE = re.compile(r"^(?P<name>.+)_lag(?P<k>\d+)$")


@dataclass(frozen=True)
class IntervalRecord:
    covariates: tuple
    treatment: int
    censored_next: int
    alive_next: int | None  # None when censored_next == 1


@dataclass(frozen=True)
class Trajectory:
    baseline_covariates: tuple
    records: tuple
    horizon: int
    id: int = 0


@dataclass(frozen=True)
class HistoryView:
    """History of one subject through interval ``j``.

    ``past_covariates`` holds ``L_0..L_j`` and ``past_treatments`` holds
    ``A_0..A_{j-1}`` (empty at ``j = 0``).
    """

    j: int
    past_covariates: np.ndarray
    past_treatments: np.ndarray
    alive: bool
    baseline: np.ndarray
    covariate_names: tuple
    baseline_names: tuple = ()

    def to_frame(self, treatment=None) -> "HistoryFrame":
        a = None if treatment is None else np.array([treatment], dtype=float)
        return HistoryFrame(
            j=self.j,
            covariate_names=self.covariate_names,
            baseline_names=self.baseline_names,
            baseline=np.asarray(self.baseline, dtype=float).reshape(1, -1),
            cov_hist=np.asarray(self.past_covariates, dtype=float)[None, :, :],
            trt_hist=np.asarray(self.past_treatments, dtype=float).reshape(1, -1),
            a=a,
        )


class HistoryFrame:
    """Vectorised histories of several subjects at a common interval ``j``.

    Columns are resolved by name: baseline names, current covariate names,
    ``<name>_lag<k>`` for lagged covariates, ``a`` for the current treatment,
    ``a_lag<k>`` for lagged treatments and ``j`` for the interval index.
    Lags that reach before time 0 read as 0.
    """

    def __init__(self, j, covariate_names, baseline_names, baseline, cov_hist, trt_hist, a=None):
        self.j = int(j)
        self.covariate_names = tuple(covariate_names)
        self.baseline_names = tuple(baseline_names)
        self.baseline = baseline
        self.cov_hist = cov_hist
        self.trt_hist = trt_hist
        self.a = a
        self._index = {name: i for i, name in enumerate(self.covariate_names)}
        self._bindex = {name: i for i, name in enumerate(self.baseline_names)}

    @property
    def n_rows(self) -> int:
        return self.cov_hist.shape[0]

    def has(self, name: str) -> bool:
        try:
            self._resolve(name)
        except KeyError:
            return False
        return True

    def _resolve(self, name):
        if name in self._bindex:
            return ("base", self._bindex[name], 0)
        if name in self._index:
            return ("cov", self._index[name], 0)
        if name == "a":
            return ("trt", None, 0)
        if name == "j":
            return ("j", None, 0)
        m = _LAG_RE.match(name)
        if m:
            base, k = m.group("name"), int(m.group("k"))
            if base == "a" and k >= 1:
                return ("trt", None, k)
            if base in self._index:
                return ("cov", self._index[base], k)
        raise KeyError(name)

    def col(self, name: str) -> np.ndarray:
        try:
            kind, idx, lag = self._resolve(name)
        except KeyError:
            raise KeyError(f"unknown column {name!r}; available covariates "
                           f"{self.covariate_names}, baseline {self.baseline_names}") from None
        n = self.n_rows
        if kind == "base":
            return self.baseline[:, idx]
        if kind == "j":
            return np.full(n, float(self.j))
        if kind == "cov":
            t = self.j - lag
            return self.cov_hist[:, t, idx] if t >= 0 else np.zeros(n)
        if lag == 0:
            if self.a is None:
                raise KeyError("current treatment 'a' is not set on this frame")
            return self.a
        t = self.j - lag
        return self.trt_hist[:, t] if t >= 0 else np.zeros(n)

    __getitem__ = col

    def with_treatment(self, a) -> "HistoryFrame":
        a = np.broadcast_to(np.asarray(a, dtype=float), (self.n_rows,)).copy()
        return HistoryFrame(self.j, self.covariate_names, self.baseline_names,
                            self.baseline, self.cov_hist, self.trt_hist, a)

    def take(self, idx) -> "HistoryFrame":
        return HistoryFrame(self.j, self.covariate_names, self.baseline_names,
                            self.baseline[idx], self.cov_hist[idx], self.trt_hist[idx],
                            None if self.a is None else self.a[idx])


@dataclass(frozen=True, eq=False)
class Panel:
    """A whole longitudinal dataset in padded wide form.

    Parameters
    ----------
    ids : (n,) int array
    covariates : (n, J, p) float array, NaN after the last record
    treatment, censored, alive : (n, J) float arrays holding ``A_j``,
        ``C_{j+1}`` and ``Y_{j+1}``; NaN after the last record, and ``alive``
        is NaN on a record whose ``censored`` is 1.
    n_records : (n,) int array
    covariate_names : names of the time-varying covariates
    indicator : name of the binary indication covariate ``L*_j``
    baseline, baseline_names : time-fixed covariates, shape (n, p0)
    """

    ids: np.ndarray
    covariates: np.ndarray
    treatment: np.ndarray
    censored: np.ndarray
    alive: np.ndarray
    n_records: np.ndarray
    covariate_names: tuple
    indicator: str | None = None
    baseline: np.ndarray | None = None
    baseline_names: tuple = ()
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        n = len(self.ids)
        if self.baseline is None:
            object.__setattr__(self, "baseline", np.zeros((n, 0)))
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))
        object.__setattr__(self, "baseline_names", tuple(self.baseline_names))
        if self.covariates.ndim != 3 or self.covariates.shape[0] != n:
            raise ValueError("covariates must have shape (n, J, p)")
        if self.covariates.shape[2] != len(self.covariate_names):
            raise ValueError("covariate_names does not match covariate array width")
        if self.baseline.shape != (n, len(self.baseline_names)):
            raise ValueError("baseline does not match baseline_names")
        for arr in (self.treatment, self.censored, self.alive):
            if arr.shape != self.covariates.shape[:2]:
                raise ValueError("treatment/censored/alive must have shape (n, J)")
        if self.indicator is not None and self.indicator not in self.covariate_names:
            raise ValueError(f"indicator {self.indicator!r} is not a covariate")
        for arr in (self.ids, self.covariates, self.treatment, self.censored,
                    self.alive, self.n_records, self.baseline):
            arr.setflags(write=False)

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def horizon(self) -> int:
        return self.covariates.shape[1]

    @property
    def indicator_index(self) -> int | None:
        if self.indicator is None:
            return None
        return self.covariate_names.index(self.indicator)

    @property
    def has_censoring(self) -> bool:
        return bool(np.nansum(self.censored) > 0)

    def at_risk(self, j: int) -> np.ndarray:
        """Boolean mask of subjects with a record at interval ``j``."""
        return self.n_records > j

    def uncensored_next(self, j: int) -> np.ndarray:
        """Subjects with a record at ``j`` who are not censored by ``j+1``."""
        return self.at_risk(j) & (np.nan_to_num(self.censored[:, j], nan=1.0) == 0)

    def frame(self, j: int, rows=None, with_treatment: bool = True) -> HistoryFrame:
        if rows is None:
            rows = np.flatnonzero(self.at_risk(j))
        a = self.treatment[rows, j].astype(float) if with_treatment else None
        return HistoryFrame(j, self.covariate_names, self.baseline_names,
                            self.baseline[rows], self.covariates[rows, : j + 1, :],
                            self.treatment[rows, :j], a)

    def take(self, idx, new_ids=None) -> "Panel":
        idx = np.asarray(idx)
        ids = self.ids[idx] if new_ids is None else np.asarray(new_ids)
        return Panel(ids.copy(), self.covariates[idx].copy(), self.treatment[idx].copy(),
                     self.censored[idx].copy(), self.alive[idx].copy(),
                     self.n_records[idx].copy(), self.covariate_names, self.indicator,
                     self.baseline[idx].copy(), self.baseline_names)

    def outcome(self) -> np.ndarray:
        """``Y_J`` per subject, NaN if censored before the horizon."""
        J = self.horizon
        out = np.full(self.n, np.nan)
        last = self.n_records - 1
        full = self.n_records == J
        rows = np.flatnonzero(full)
        out[rows] = self.alive[rows, J - 1]
        died = (~full) & (last >= 0)
        rows = np.flatnonzero(died)
        out[rows[self.alive[rows, last[rows]] == 0]] = 0.0
        return out

    # per-subject views -----------------------------------------------------

    def trajectory(self, i: int) -> Trajectory:
        recs = []
        for j in range(int(self.n_records[i])):
            c = int(self.censored[i, j])
            y = self.alive[i, j]
            recs.append(IntervalRecord(tuple(float(v) for v in self.covariates[i, j]),
                                       int(self.treatment[i, j]), c,
                                       None if np.isnan(y) else int(y)))
        return Trajectory(tuple(float(v) for v in self.baseline[i]), tuple(recs),
                          self.horizon, int(self.ids[i]))

    @property
    def subjects(self) -> list:
        return [self.trajectory(i) for i in range(self.n)]

    @classmethod
    def from_trajectories(cls, trajectories: Sequence[Trajectory], covariate_names,
                          indicator=None, baseline_names=()) -> "Panel":
        trajectories = list(trajectories)
        n = len(trajectories)
        J = trajectories[0].horizon if n else 1
        p = len(covariate_names)
        cov = np.full((n, J, p), np.nan)
        trt, cen, alv = (np.full((n, J), np.nan) for _ in range(3))
        nrec = np.zeros(n, dtype=int)
        base = np.zeros((n, len(baseline_names)))
        ids = np.zeros(n, dtype=int)
        for i, t in enumerate(trajectories):
            if t.horizon != J:
                raise ValueError("all trajectories must share the horizon")
            if len(t.records) > J:
                raise ValueError(f"subject {t.id} has more than {J} records")
            ids[i] = t.id
            base[i] = t.baseline_covariates
            nrec[i] = len(t.records)
            for j, r in enumerate(t.records):
                cov[i, j] = r.covariates
                trt[i, j] = r.treatment
                cen[i, j] = r.censored_next
                alv[i, j] = np.nan if r.alive_next is None else r.alive_next
        return cls(ids, cov, trt, cen, alv, nrec, tuple(covariate_names), indicator,
                   base, tuple(baseline_names))


def history_at(trajectory: Trajectory, j: int, covariate_names=(), baseline_names=()) -> HistoryView:
    """Prefix view of ``trajectory`` through interval ``j``.

    Raises
    ------
    IndexError
        If the subject has no record at ``j`` (dead or censored earlier, or
        beyond the horizon).
    """
    if j < 0 or j >= len(trajectory.records):
        raise IndexError(f"subject {trajectory.id} has no record at interval {j} "
                         f"({len(trajectory.records)} records)")
    recs = trajectory.records[: j + 1]
    p = len(recs[0].covariates)
    names = tuple(covariate_names) or tuple(f"l{k}" for k in range(p))
    return HistoryView(
        j=j,
        past_covariates=np.array([r.covariates for r in recs], dtype=float).reshape(j + 1, p),
        past_treatments=np.array([r.treatment for r in recs[:-1]], dtype=float),
        alive=True,
        baseline=np.array(trajectory.baseline_covariates, dtype=float),
        covariate_names=names,
        baseline_names=tuple(baseline_names),
    )


@dataclass(frozen=True)
class Violation:
    subject: int
    j: int
    rule: str

    def __str__(self):
        return f"{self.rule}, subject {self.subject}, j={self.j}"


def validate_panel(panel: Panel) -> list[Violation]:
    """Check every trajectory invariant; returns an empty list when valid."""
    out = []
    J = panel.horizon
    ind = panel.indicator_index
    for i in range(panel.n):
        sid = int(panel.ids[i])
        k = int(panel.n_records[i])
        if k < 1 or k > J:
            out.append(Violation(sid, 0, "record count outside 1..J"))
            continue
        for j in range(k):
            cov = panel.covariates[i, j]
            a, c, y = panel.treatment[i, j], panel.censored[i, j], panel.alive[i, j]
            if not np.all(np.isfinite(cov)):
                out.append(Violation(sid, j, "non-finite covariate"))
            if a not in (0.0, 1.0):
                out.append(Violation(sid, j, "treatment not binary"))
            if c not in (0.0, 1.0):
                out.append(Violation(sid, j + 1, "censoring not binary"))
            if c == 1.0 and not np.isnan(y):
                out.append(Violation(sid, j + 1, "survival present after censoring"))
            if c == 0.0 and y not in (0.0, 1.0):
                out.append(Violation(sid, j + 1, "survival not binary"))
            if ind is not None and cov[ind] not in (0.0, 1.0):
                out.append(Violation(sid, j, "indicator not binary"))
            if j > 0:
                if panel.censored[i, j - 1] == 1.0:
                    out.append(Violation(sid, j, "absorbing censoring"))
                elif panel.alive[i, j - 1] == 0.0:
                    out.append(Violation(sid, j + 1, "monotone survival"))
        last_c, last_y = panel.censored[i, k - 1], panel.alive[i, k - 1]
        if k < J and last_c != 1.0 and last_y != 0.0:
            out.append(Violation(sid, k, "records end before an event or the horizon"))
    return out


# CSV interchange ----------------------------------------------------------------

def write_panel_csv(panel: Panel, path) -> None:
    """One row per subject-interval: id, j, baseline, covariates, a, c_next, y_next."""
    rows = []
    for i in range(panel.n):
        for j in range(int(panel.n_records[i])):
            row = {"id": int(panel.ids[i]), "j": j}
            row.update(zip(panel.baseline_names, panel.baseline[i]))
            row.update(zip(panel.covariate_names, panel.covariates[i, j]))
            row["a"] = panel.treatment[i, j]
            row["c_next"] = panel.censored[i, j]
            row["y_next"] = panel.alive[i, j]
            rows.append(row)
    cols = ["id", "j", *panel.baseline_names, *panel.covariate_names, "a", "c_next", "y_next"]
    df = pd.DataFrame(rows, columns=cols)
    for c in ("a", "c_next"):
        df[c] = df[c].astype(int)
    df["y_next"] = df["y_next"].astype("Int64")
    df.to_csv(Path(path), index=False, encoding="utf-8", float_format="%.17g")


def read_panel_csv(path, indicator: str | None = "lstar", horizon: int | None = None) -> Panel:
    """Read the CSV interchange format.

    Columns whose names start with ``base_`` are treated as baseline covariates
    (they must be constant within subject).  ``horizon`` defaults to the
    largest ``j`` plus one.
    """
    df = pd.read_csv(Path(path), encoding="utf-8", float_precision="round_trip")
    required = {"id", "j", "a", "c_next", "y_next"}
    missing = required - set(df.columns)
    if missing:
        raise ValueError(f"panel file is missing columns {sorted(missing)}")
    base_names = tuple(c for c in df.columns if c.startswith(BASELINE_PREFIX))
    cov_names = tuple(c for c in df.columns if c not in required and c not in base_names)
    if indicator is not None and indicator not in cov_names:
        indicator = None
    df = df.sort_values(["id", "j"], kind="stable")
    J = int(df["j"].max()) + 1 if horizon is None else int(horizon)
    ids = np.unique(df["id"].to_numpy())
    pos = np.searchsorted(ids, df["id"].to_numpy())
    jj = df["j"].to_numpy().astype(int)
    if np.any(jj >= J) or np.any(jj < 0):
        raise ValueError("interval index outside 0..horizon-1")
    n, p = len(ids), len(cov_names)
    cov = np.full((n, J, p), np.nan)
    trt, cen, alv = (np.full((n, J), np.nan) for _ in range(3))
    cov[pos, jj] = df[list(cov_names)].to_numpy(dtype=float) if p else np.zeros((len(df), 0))
    trt[pos, jj] = df["a"].to_numpy(dtype=float)
    cen[pos, jj] = df["c_next"].to_numpy(dtype=float)
    alv[pos, jj] = pd.to_numeric(df["y_next"], errors="coerce").to_numpy(dtype=float)
    nrec = np.bincount(pos, minlength=n)
    base = np.zeros((n, len(base_names)))
    if base_names:
        first = df.groupby("id", sort=True)[list(base_names)].first()
        base = first.to_numpy(dtype=float)
    return Panel(ids, cov, trt, cen, alv, nrec, cov_names, indicator, base, base_names)
