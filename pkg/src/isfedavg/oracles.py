"""Brute-force reference computations.

Everything here works by listing outcomes or scanning grids, without
reusing the closed-form code paths, so it can be used to check them.
Only suitable for tiny problems.
"""

import functools
import itertools
from typing import Callable, List, Tuple

import numpy as np

Outcome = Tuple[float, Tuple[int, ...]]


def enumerate_outcomes(p, size: int, scheme: str) -> List[Outcome]:
    """Every possible batch with its probability.

    ``scheme`` is ``"with"`` (i.i.d. trials with probabilities ``p``),
    ``"sequential"`` (trials renormalized over remaining elements, ``p``
    are the per-trial sampling probabilities) or ``"systematic"`` (the
    unshuffled sweep, ``p`` are normalized inclusion probabilities).
    """
    p = [float(v) for v in p]
    n = len(p)
    out: List[Outcome] = []
    if scheme == "with":
        for seq in itertools.product(range(n), repeat=size):
            prob = 1.0
            for j in seq:
                prob *= p[j]
            if prob > 0:
                out.append((prob, seq))
    elif scheme == "sequential":
        for seq in itertools.permutations(range(n), size):
            prob, used = 1.0, 0.0
            for j in seq:
                prob *= p[j] / (1.0 - used)
                used += p[j]
            if prob > 0:
                out.append((prob, seq))
    elif scheme == "systematic":
        totals = [0.0]
        for v in p:
            totals.append(totals[-1] + size * v)
        cuts = sorted({0.0, 1.0} | {t - np.floor(t) for t in totals})
        for a, b in zip(cuts[:-1], cuts[1:]):
            if b - a <= 0:
                continue
            d = 0.5 * (a + b)
            seq = []
            for step in range(size):
                x = d + step
                hit = [k for k in range(n) if totals[k] <= x < totals[k + 1]]
                # rounding can leave the last total a hair below ``size``
                seq.append(hit[0] if hit else max(k for k in range(n) if p[k] > 0))
            out.append((b - a, tuple(seq)))
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    return out


def inclusion_from_outcomes(outcomes: List[Outcome], n: int) -> np.ndarray:
    incl = np.zeros(n)
    for prob, seq in outcomes:
        for j in set(seq):
            incl[j] += prob
    return incl


def pair_inclusion_from_outcomes(outcomes: List[Outcome], n: int) -> np.ndarray:
    pair = np.zeros((n, n))
    for prob, seq in outcomes:
        s = sorted(set(seq))
        for i in s:
            for j in s:
                pair[i, j] += prob
    return pair


def estimator_moments(values, weights, outcomes: List[Outcome]):
    """Exact mean and mean-square error (about the population mean) of
    ``(1/B) sum_b x_b / (N w_b)`` over the listed outcomes."""
    x = np.asarray(values, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = len(x)
    target = x.mean(axis=0)
    mean = np.zeros(x.shape[1])
    mse = 0.0
    total = 0.0
    for prob, seq in outcomes:
        est = sum(x[j] / (n * weights[j]) for j in seq) / len(seq)
        mean += prob * est
        mse += prob * float(np.sum((est - target) ** 2))
        total += prob
    return mean / total, mse / total


@functools.lru_cache(maxsize=8)
def _grid(dim: int, resolution: float, interior: bool):
    pts = _build_grid(dim, resolution, interior)
    pts.setflags(write=False)
    return pts


def simplex_grid(dim: int, resolution: float = 0.01, interior: bool = True):
    """All points of the probability simplex on a regular grid.

    With ``interior`` the coordinates are strictly positive.  The result
    is cached and read-only.
    """
    return _grid(dim, resolution, interior)


def _build_grid(dim, resolution, interior):
    steps = int(round(1.0 / resolution))
    lo = 1 if interior else 0
    pts = []
    for head in itertools.product(range(lo, steps + 1), repeat=dim - 1):
        last = steps - sum(head)
        if last >= lo:
            pts.append(head + (last,))
    return np.array(pts, dtype=np.float64) / steps


def grid_minimum(objective: Callable[[np.ndarray], np.ndarray], dim: int,
                 resolution: float = 0.01):
    """Minimize a vectorized objective over :func:`simplex_grid` points.

    ``objective`` receives an array of shape (n_points, dim).
    Returns (best point, best value).
    """
    pts = simplex_grid(dim, resolution)
    vals = objective(pts)
    i = int(np.argmin(vals))
    return pts[i], float(vals[i])


def central_difference(f: Callable[[np.ndarray], float], w, direction, step=1e-6):
    w = np.asarray(w, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    return (f(w + step * direction) - f(w - step * direction)) / (2 * step)
