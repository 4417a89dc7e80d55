"""Per-interval nuisance regressions.

Logistic working models are fit by iteratively reweighted least squares on
the weighted quasi-likelihood score ``sum w x (y - expit(x'theta)) = 0``, so
fractional pseudo-outcomes are handled exactly like binary responses.  The
machine-learning pathway uses a small cross-validated convex ensemble of
logistic models and gradient-boosted stumps.
"""
from __future__ import annotations

import itertools
import re
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import expit

EPS = 1e-6
_SAT_RE = re.compile(r"^\s*saturated\s*\((?P<args>[^)]*)\)\s*$")


class SchemaError(KeyError):
    """A formula references a column the data does not provide."""


def clamp(p, eps=EPS):
    return np.clip(p, eps, 1.0 - eps)


def logit(p):
    return np.log(p) - np.log1p(-p)


# formulas ----------------------------------------------------------------------

@dataclass(frozen=True)
class FormulaSpec:
    """Right-hand side of a logistic working model.

    ``terms`` holds column names and ``x:y`` products; ``saturated`` lists the
    binary variables whose full interaction expansion is appended.  An
    intercept is always included.
    """

    terms: tuple = ()
    saturated: tuple = ()
    tag: str = ""

    @classmethod
    def parse(cls, obj, tag: str = "") -> "FormulaSpec":
        """Accepts ``["a", "lstar", "a:lstar"]`` or ``"saturated(a, lstar)"``
        (the latter may also appear as one element of a list)."""
        if isinstance(obj, FormulaSpec):
            return obj
        items = [obj] if isinstance(obj, str) else list(obj)
        terms, sat = [], []
        for item in items:
            m = _SAT_RE.match(item)
            if m:
                sat.extend(x.strip() for x in m.group("args").split(",") if x.strip())
            else:
                terms.extend(x.strip() for x in item.split("+") if x.strip())
        return cls(tuple(terms), tuple(sat), tag)

    def expanded(self) -> list:
        """Design columns (excluding the intercept) as tuples of factor names."""
        cols = []
        for t in self.terms:
            cols.append(tuple(x.strip() for x in t.split(":")))
        for r in range(1, len(self.saturated) + 1):
            cols.extend(itertools.combinations(self.saturated, r))
        seen, out = set(), []
        for c in cols:
            key = tuple(sorted(c))
            if key not in seen:
                seen.add(key)
                out.append(c)
        return out

    def variables(self) -> list:
        return sorted({v for col in self.expanded() for v in col})

    def pairwise(self) -> "FormulaSpec":
        """Main terms plus every pairwise product of the main-term variables."""
        mains = self.variables()
        inter = [f"{x}:{y}" for x, y in itertools.combinations(mains, 2)]
        return FormulaSpec(tuple(mains + inter), (), self.tag + "+pairwise")

    def without(self, pred) -> "FormulaSpec":
        """Fully expanded copy dropping every column for which ``pred(col)`` holds."""
        keep = [":".join(c) for c in self.expanded() if not pred(c)]
        return FormulaSpec(tuple(keep), (), self.tag)

    def __str__(self):
        parts = list(self.terms)
        if self.saturated:
            parts.append(f"saturated({', '.join(self.saturated)})")
        return " + ".join(parts) if parts else "1"


def build_design(formula: FormulaSpec, frame) -> tuple:
    """Design matrix for ``formula`` on the rows of ``frame``.

    Returns ``(X, names)`` with the intercept in column 0.  Interaction
    columns are elementwise products of their factors.
    """
    cols = formula.expanded()
    X = np.ones((frame.n_rows, len(cols) + 1))
    names = ["(intercept)"]
    for k, factors in enumerate(cols, start=1):
        v = np.ones(frame.n_rows)
        for name in factors:
            try:
                v = v * frame.col(name)
            except KeyError as exc:
                raise SchemaError(f"formula column {name!r} not in data: {exc}") from None
        X[:, k] = v
        names.append(":".join(factors))
    return X, names


# IRLS --------------------------------------------------------------------------

@dataclass
class FittedLogistic:
    coefficients: np.ndarray
    converged: bool
    iterations: int
    weighted: bool
    names: list = field(default_factory=list)
    formula: FormulaSpec | None = None
    max_scaled_gradient: float = np.nan

    def predict(self, X) -> np.ndarray:
        """Probabilities from a design matrix or, given a frame, from its design."""
        if hasattr(X, "col"):
            return self.predict_frame(X)
        return expit(np.asarray(X) @ self.coefficients)

    def predict_frame(self, frame) -> np.ndarray:
        X, _ = build_design(self.formula, frame)
        return self.predict(X)


def _quasi_loglik(eta, y, w):
    return float(np.sum(w * (y * eta - np.logaddexp(0.0, eta))))


def _newton_step(X, grad, hw, ridge):
    # minimum-norm solve copes with empty design cells and with the vanishing
    # curvature of cells whose responses are all 0 or all 1
    H = X.T @ (X * hw[:, None])
    step = np.linalg.lstsq(H, grad, rcond=None)[0]
    if np.all(np.isfinite(step)):
        return step
    scale = max(float(np.trace(H)) / H.shape[0], 1e-300)
    return np.linalg.lstsq(H + ridge * scale * np.eye(H.shape[0]), grad, rcond=None)[0]


def fit_logistic_irls(X, y, w=None, max_iter: int = 100, tol: float = 1e-12,
                      ridge: float = 1e-8, offset=None) -> FittedLogistic:
    """Solve the weighted logistic quasi-score equation by Newton/IRLS.

    Convergence requires ``max_c |sum_i w_i x_ic (y_i - p_i)| / sum_i w_i <= tol``.
    Newton steps use a minimum-norm solve, with ridge damping only if that
    fails; complete separation (every
    positively weighted binary response fitted exactly) triggers a
    ridge-penalised refit and ``converged=False``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.ones(len(y)) if w is None else np.asarray(w, dtype=float)
    weighted = not np.all(w == 1.0)
    keep = w > 0
    if not np.any(keep):
        raise ValueError("no rows with positive weight")
    X, y, w = X[keep], y[keep], w[keep]
    off = np.zeros(len(y)) if offset is None else np.asarray(offset, dtype=float)[keep]
    sw = float(w.sum())
    theta = np.zeros(X.shape[1])
    ybar = float(np.sum(w * y) / sw)
    if 0 < ybar < 1 and np.allclose(X[:, 0], 1.0):
        theta[0] = np.log(ybar) - np.log1p(-ybar)
    eta = X @ theta + off
    ll = _quasi_loglik(eta, y, w)
    converged, it, gmax = False, 0, np.inf
    for it in range(1, max_iter + 1):
        p = expit(eta)
        grad = X.T @ (w * (y - p))
        gmax = float(np.max(np.abs(grad))) / sw
        if gmax <= tol:
            converged = True
            break
        step = _newton_step(X, grad, w * p * (1.0 - p), ridge)
        t = 1.0
        for _ in range(40):
            cand = theta + t * step
            eta_c = X @ cand + off
            ll_c = _quasi_loglik(eta_c, y, w)
            if ll_c >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        theta, eta, ll = cand, eta_c, ll_c
    else:
        p = expit(eta)
        gmax = float(np.max(np.abs(X.T @ (w * (y - p))))) / sw
        it = max_iter
    binary = np.all((y == 0) | (y == 1))
    if binary and X.shape[1] > 1 and np.all(np.abs(y - expit(eta)) < 1e-8):
        theta = _ridge_refit(X, y, w, off)
        return FittedLogistic(theta, False, it, weighted, max_scaled_gradient=gmax)
    return FittedLogistic(theta, converged, it, weighted, max_scaled_gradient=gmax)


def _ridge_refit(X, y, w, off, lam=1e-3, iters=50):
    sw = w.sum()
    theta = np.zeros(X.shape[1])
    pen = lam * sw * np.eye(X.shape[1])
    pen[0, 0] = 0.0
    for _ in range(iters):
        p = expit(X @ theta + off)
        grad = X.T @ (w * (y - p)) - pen @ theta
        H = X.T @ (X * (w * p * (1 - p))[:, None]) + pen
        step = np.linalg.lstsq(H, grad, rcond=None)[0]
        theta = theta + step
        if np.max(np.abs(step)) < 1e-10:
            break
    return theta


# learners ----------------------------------------------------------------------

@dataclass(frozen=True)
class LogisticLearner:
    formula: FormulaSpec
    name: str = "logistic"

    def fit(self, frame, y, w=None) -> FittedLogistic:
        X, names = build_design(self.formula, frame)
        fit = fit_logistic_irls(X, y, w)
        fit.names, fit.formula = names, self.formula
        return fit


@dataclass
class StumpBoostModel:
    features: tuple
    base: float
    splits: list  # (feature index, cut, left value, right value)

    def decision(self, frame) -> np.ndarray:
        Z = np.column_stack([frame.col(f) for f in self.features])
        F = np.full(Z.shape[0], self.base)
        for k, cut, lv, rv in self.splits:
            F += np.where(Z[:, k] < cut, lv, rv)
        return F

    def predict(self, frame) -> np.ndarray:
        return expit(self.decision(frame))


@dataclass(frozen=True)
class StumpBoostLearner:
    """Gradient boosting of depth-1 trees on the logistic loss.

    Each round takes a Newton step on the best single split over quantile
    bins; leaf values are shrunk by ``learning_rate``.
    """

    features: tuple
    rounds: int = 200
    learning_rate: float = 0.1
    bins: int = 32
    l2: float = 1.0
    name: str = "stumps"

    def fit(self, frame, y, w=None) -> StumpBoostModel:
        y = np.asarray(y, dtype=float)
        w = np.ones(len(y)) if w is None else np.asarray(w, dtype=float)
        Z = np.column_stack([frame.col(f) for f in self.features])
        n, p = Z.shape
        cuts, binned = [], np.empty((n, p), dtype=np.int64)
        for k in range(p):
            qs = np.quantile(Z[:, k], np.linspace(0, 1, self.bins + 1)[1:-1])
            c = np.unique(qs)
            c = c[c > Z[:, k].min()]
            cuts.append(c)
            binned[:, k] = np.searchsorted(c, Z[:, k], side="right")
        widths = np.array([len(c) + 1 for c in cuts])
        offsets = np.concatenate([[0], np.cumsum(widths)[:-1]])
        flat = (binned + offsets[None, :]).ravel()
        total_bins = int(widths.sum())
        ybar = float(np.clip(np.sum(w * y) / np.sum(w), 1e-6, 1 - 1e-6))
        base = float(np.log(ybar) - np.log1p(-ybar))
        F = np.full(n, base)
        splits = []
        for _ in range(self.rounds):
            prob = expit(F)
            g = w * (y - prob)
            h = w * prob * (1.0 - prob)
            G = np.bincount(flat, weights=np.repeat(g, p), minlength=total_bins)
            H = np.bincount(flat, weights=np.repeat(h, p), minlength=total_bins)
            Gt, Ht = g.sum(), h.sum()
            best = (0.0, None)
            for k in range(p):
                if widths[k] < 2:
                    continue
                s = slice(offsets[k], offsets[k] + widths[k])
                GL = np.cumsum(G[s])[:-1]
                HL = np.cumsum(H[s])[:-1]
                GR, HR = Gt - GL, Ht - HL
                gain = GL**2 / (HL + self.l2) + GR**2 / (HR + self.l2) - Gt**2 / (Ht + self.l2)
                b = int(np.argmax(gain))
                if gain[b] > best[0]:
                    best = (gain[b], (k, b, GL[b], HL[b], GR[b], HR[b]))
            if best[1] is None:
                break
            k, b, gl, hl, gr, hr = best[1]
            lv = self.learning_rate * gl / (hl + self.l2)
            rv = self.learning_rate * gr / (hr + self.l2)
            left = binned[:, k] <= b
            F += np.where(left, lv, rv)
            splits.append((k, float(cuts[k][b]), float(lv), float(rv)))
        return StumpBoostModel(tuple(self.features), base, splits)


def default_library(formula: FormulaSpec) -> list:
    """Main-terms logistic, pairwise-interaction logistic, boosted stumps."""
    return [LogisticLearner(FormulaSpec.parse(formula.variables()), "glm"),
            LogisticLearner(formula.pairwise(), "glm_interaction"),
            StumpBoostLearner(tuple(formula.variables()))]


# ensemble ----------------------------------------------------------------------

def _logloss(y, p, w):
    p = clamp(p)
    return float(-np.sum(w * (y * np.log(p) + (1 - y) * np.log1p(-p))) / np.sum(w))


@dataclass
class EnsembleModel:
    members: list
    weights: np.ndarray
    cv_losses: np.ndarray
    names: list
    ensemble_cv_loss: float = np.nan

    def predict(self, frame) -> np.ndarray:
        P = np.column_stack([m.predict(frame) for m in self.members])
        return clamp(P @ self.weights)


def _simplex_descent(P, y, w, tol=1e-8, max_sweeps=200):
    K = P.shape[1]
    losses = np.array([_logloss(y, P[:, k], w) for k in range(K)])
    wts = np.zeros(K)
    wts[int(np.argmin(losses))] = 1.0
    cur = float(losses.min())
    for _ in range(max_sweeps):
        start = cur
        for k in range(K):
            if wts[k] >= 1.0:
                continue
            rest = wts.copy()
            rest[k] = 0.0
            rest /= rest.sum()
            pk, pr = P[:, k], P @ rest
            res = minimize_scalar(lambda t: _logloss(y, t * pk + (1 - t) * pr, w),
                                  bounds=(0.0, 1.0), method="bounded",
                                  options={"xatol": 1e-10})
            if res.fun < cur:
                wts = (1 - res.x) * rest
                wts[k] += res.x
                cur = float(res.fun)
        if start - cur < tol:
            break
    return wts / wts.sum(), cur


def fit_ensemble(learners, frame, y, folds, w=None) -> EnsembleModel:
    """Cross-validated convex combination of ``learners``.

    ``folds`` gives a fold label per row.  Weights minimise the
    cross-validated log-loss over the simplex by coordinate descent started at
    the best single member, so the ensemble's cross-validated loss never
    exceeds the best member's.
    """
    y = np.asarray(y, dtype=float)
    w = np.ones(len(y)) if w is None else np.asarray(w, dtype=float)
    folds = np.asarray(folds)
    labels = np.unique(folds)
    if len(labels) < 2:
        raise ValueError("ensemble needs at least two folds")
    cv, kept = [], []
    for lrn in learners:
        pred = np.empty(len(y))
        try:
            for lab in labels:
                tr, te = np.flatnonzero(folds != lab), np.flatnonzero(folds == lab)
                model = lrn.fit(frame.take(tr), y[tr], w[tr])
                pred[te] = model.predict(frame.take(te))
            if not np.all(np.isfinite(pred)):
                raise FloatingPointError("non-finite predictions")
        except Exception as exc:  # noqa: BLE001 - member failures are tolerated
            warnings.warn(f"ensemble member {getattr(lrn, 'name', lrn)} dropped: {exc}")
            continue
        cv.append(clamp(pred))
        kept.append(lrn)
    if not kept:
        raise RuntimeError("every ensemble member failed to train")
    P = np.column_stack(cv)
    wts, loss = _simplex_descent(P, y, w)
    losses = np.array([_logloss(y, P[:, k], w) for k in range(P.shape[1])])
    members = [lrn.fit(frame, y, w) for lrn in kept]
    return EnsembleModel(members, wts, losses, [getattr(l, "name", "") for l in kept], loss)


# folds -------------------------------------------------------------------------

@dataclass(frozen=True)
class FoldAssignment:
    ids: np.ndarray
    folds: np.ndarray  # 1..M aligned with sorted ids
    M: int

    def of(self, ids) -> np.ndarray:
        pos = np.searchsorted(self.ids, np.asarray(ids))
        return self.folds[pos]

    def members(self, m: int) -> np.ndarray:
        return self.ids[self.folds == m]


def kfold(ids, M: int, seed) -> FoldAssignment:
    """Subject-level split into ``M`` folds of near-equal size.

    Ids are sorted before shuffling so the split does not depend on subject
    order.  ``ids`` may also be a :class:`~stochsurv.data.Panel`.
    """
    ids = getattr(ids, "ids", ids)
    ids = np.sort(np.asarray(ids))
    n = len(ids)
    if M < 2:
        raise ValueError("need at least two folds")
    if M > n:
        raise ValueError(f"cannot split {n} subjects into {M} folds")
    perm = np.random.default_rng(seed).permutation(n)
    folds = np.empty(n, dtype=int)
    folds[perm] = np.arange(n) % M + 1
    return FoldAssignment(ids, folds, M)
