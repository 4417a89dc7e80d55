import numpy as np
import pytest

from stochsurv.data import HistoryFrame, IntervalRecord, Panel, Trajectory
from stochsurv.oracle import ToyLawT1, simulate


def make_panel(subjects, covariate_names=("lstar", "l1"), horizon=3, indicator="lstar"):
    """``subjects`` maps id -> list of (covariates, a, c_next, y_next)."""
    trajs = []
    for sid, recs in subjects.items():
        rows = tuple(IntervalRecord(tuple(float(v) for v in cov), int(a), int(c),
                                    None if y is None else int(y))
                     for cov, a, c, y in recs)
        trajs.append(Trajectory((), rows, horizon, sid))
    return Panel.from_trajectories(trajs, covariate_names, indicator)


def make_frame(lstar_hist, a_hist=None, a=None, extra=None):
    """Frame at ``j = len(lstar_hist[0]) - 1`` with ``lstar`` (and optional
    ``extra`` covariates) histories given row-wise."""
    lstar_hist = np.atleast_2d(np.asarray(lstar_hist, dtype=float))
    n, t = lstar_hist.shape
    cols = [lstar_hist]
    names = ["lstar"]
    for name, vals in (extra or {}).items():
        cols.append(np.atleast_2d(np.asarray(vals, dtype=float)))
        names.append(name)
    cov = np.stack(cols, axis=2)
    trt = np.zeros((n, t - 1)) if a_hist is None else np.atleast_2d(np.asarray(a_hist, float))
    frame = HistoryFrame(t - 1, tuple(names), (), np.zeros((n, 0)), cov, trt.reshape(n, t - 1))
    return frame if a is None else frame.with_treatment(a)


@pytest.fixture
def p1():
    """Three well-formed subjects over three intervals."""
    return make_panel({
        1: [((1, 0), 1, 0, 1), ((1, 1), 1, 0, 1), ((0, 1), 0, 0, 1)],
        2: [((0, 0), 0, 0, 0)],
        3: [((0, 1), 0, 0, 1), ((1, 0), 1, 1, None)],
    })


@pytest.fixture
def p2():
    """Three subjects, two intervals, one binary indicator; used with hand-set
    propensities."""
    return make_panel({
        1: [((1,), 0, 0, 1), ((1,), 1, 0, 1)],
        2: [((0,), 1, 0, 1), ((1,), 0, 0, 0)],
        3: [((1,), 1, 0, 1), ((0,), 0, 1, None)],
    }, covariate_names=("lstar",), horizon=2)


@pytest.fixture(scope="session")
def toy_law():
    return ToyLawT1()


@pytest.fixture
def toy_panel(toy_law):
    return simulate(toy_law, 200, np.random.default_rng(4))


def single_interval_panel(lstar, a, y):
    """Uncensored one-interval panel with a binary indication."""
    n = len(a)
    return Panel(np.arange(n), np.asarray(lstar, float).reshape(n, 1, 1),
                 np.asarray(a, float).reshape(n, 1), np.zeros((n, 1)),
                 np.asarray(y, float).reshape(n, 1), np.ones(n, dtype=int), ("lstar",), "lstar",
                 np.zeros((n, 0)), ())


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
