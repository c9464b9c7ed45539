"""Convergence and accuracy metrics."""

import numpy as np

from isfedavg.exceptions import DimensionMismatch, EmptyTestSet

DB_FLOOR = -320.0


def msd(w, w_opt) -> float:
    """Squared Euclidean distance between a model and the reference."""
    w = np.atleast_1d(np.asarray(w, dtype=np.float64))
    w_opt = np.atleast_1d(np.asarray(w_opt, dtype=np.float64))
    if w.shape != w_opt.shape:
        raise DimensionMismatch(f"shapes {w.shape} and {w_opt.shape} differ")
    diff = w - w_opt
    return float(diff @ diff)


def to_db(value):
    """``10 log10(value)``, with zero mapped to -320 dB."""
    v = np.asarray(value, dtype=np.float64)
    with np.errstate(divide="ignore"):
        out = np.maximum(10.0 * np.log10(v), DB_FLOOR)
    return float(out) if out.ndim == 0 else out


def msd_db(w, w_opt) -> float:
    return to_db(msd(w, w_opt))


def testing_error(w, test_set) -> float:
    """Percentage of test samples whose predicted sign disagrees with the
    label.  A score of exactly zero predicts +1."""
    if test_set is None or len(test_set) == 0:
        raise EmptyTestSet("no test samples")
    scores = test_set.features @ np.asarray(w, dtype=np.float64)
    pred = np.where(scores >= 0, 1.0, -1.0)
    return float(100.0 * np.mean(pred != test_set.targets))
