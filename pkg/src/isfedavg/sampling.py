"""Weighted selection with and without replacement.

Two notions of probability are kept apart here.  A *sampling* probability
is what a sequential draw uses at each trial; an *inclusion* probability is
the chance that an element ends up in the final subset.  For a subset of
size B the inclusion probabilities sum to B, and their normalized version
(divided by B) is what the federated estimators weight by.

The main algorithm draws without replacement with the systematic scheme,
which realizes any feasible set of normalized inclusion probabilities
``p`` directly: element n is included with probability ``B * p[n]``.
"""

from dataclasses import dataclass
from typing import Literal, Optional, Sequence, Union

import numpy as np
import numpy.typing as npt

from isfedavg.exceptions import (
    BatchTooLarge,
    EmptyProbabilities,
    InclusionOverflow,
    NegativeEntry,
    NotNormalized,
    TooLargeToEnumerate,
)

ProbabilityVector = npt.NDArray[np.float64]
RNGLike = Union[np.random.Generator, int, None]

NORMALIZATION_TOL = 1e-9
INCLUSION_TOL = 1e-12
MAX_ENUMERATION = 12


@dataclass(frozen=True)
class SampleDraw:
    """Indices selected by one draw.

    ``indices`` is ordered by selection (systematic draws come out in
    sweep order); ``replacement`` records how they were obtained.
    """

    indices: npt.NDArray[np.int64]
    replacement: bool

    def __len__(self) -> int:
        return len(self.indices)


def as_generator(rng) -> np.random.Generator:
    """Pass generators through; seed a new one from anything else
    ``default_rng`` accepts (int, None, SeedSequence)."""
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def validate_probabilities(raw: Sequence[float]) -> ProbabilityVector:
    """Check that ``raw`` lies on the probability simplex.

    Sums within 1e-9 of one are renormalized so the result sums to one
    up to rounding.  The returned array is a fresh float64 copy.
    """
    p = np.array(raw, dtype=np.float64).ravel()
    if p.size == 0:
        raise EmptyProbabilities("probability vector is empty")
    if not np.all(np.isfinite(p)):
        raise NotNormalized("probability vector has non-finite entries")
    if np.any(p < 0):
        raise NegativeEntry(f"negative entry {p.min()!r}")
    total = p.sum()
    if abs(total - 1.0) > NORMALIZATION_TOL:
        raise NotNormalized(f"entries sum to {total!r}")
    return p / total


def cap_inclusion(p: ProbabilityVector, size: int) -> ProbabilityVector:
    """Make ``p`` feasible for drawing ``size`` distinct elements.

    Entries with ``size * p > 1`` are pinned at ``1 / size`` and the
    remaining mass is spread over the rest in proportion to their current
    values; repeated until nothing overflows.  Ordering is preserved.
    """
    p = np.asarray(p, dtype=np.float64)
    if size * p.max() <= 1.0 + INCLUSION_TOL:
        return p
    if np.count_nonzero(p) < size:
        raise InclusionOverflow(
            f"only {np.count_nonzero(p)} positive entries for {size} draws"
        )
    capped = np.zeros(p.shape, dtype=bool)
    q = p.copy()
    while True:
        over = (size * q > 1.0 + INCLUSION_TOL) & ~capped
        if not over.any():
            break
        capped |= over
        free_mass = 1.0 - capped.sum() / size
        rest = p[~capped]
        q = np.where(capped, 1.0 / size, 0.0)
        q[~capped] = rest * (free_mass / rest.sum())
    return q


def sample_with_replacement(
    p: ProbabilityVector, size: int, rng: RNGLike = None
) -> SampleDraw:
    """Draw ``size`` i.i.d. indices, index n with probability ``p[n]``."""
    if size < 1:
        raise ValueError("size must be at least 1")
    rng = as_generator(rng)
    cdf = np.cumsum(p)
    idx = np.searchsorted(cdf, rng.random(size) * cdf[-1], side="right")
    # guard against the top of the cdf landing on a zero-probability tail
    if idx.max() >= len(p):
        np.minimum(idx, _last_positive(p), out=idx)
    return SampleDraw(idx.astype(np.int64), replacement=True)


def sample_with_replacement_batch(
    p: ProbabilityVector, size: int, draws: int, rng: RNGLike = None
) -> npt.NDArray[np.int64]:
    """``draws`` independent with-replacement draws, shape (draws, size)."""
    rng = as_generator(rng)
    cdf = np.cumsum(p)
    idx = np.searchsorted(cdf, rng.random((draws, size)) * cdf[-1], side="right")
    return np.minimum(idx, _last_positive(p)).astype(np.int64)


def _last_positive(p) -> int:
    nz = np.flatnonzero(np.asarray(p) > 0)
    return int(nz[-1])


def _check_feasible(p: ProbabilityVector, size: int) -> None:
    if size < 1 or size > len(p):
        raise BatchTooLarge(f"cannot draw {size} of {len(p)} elements")
    top = size * float(np.max(p))
    if top > 1.0 + INCLUSION_TOL:
        raise InclusionOverflow(f"inclusion probability {top!r} exceeds one")


def systematic_sample_without_replacement(
    p: ProbabilityVector,
    size: int,
    rng: RNGLike = None,
    *,
    shuffle: bool = True,
    offset: Optional[float] = None,
) -> SampleDraw:
    """Systematic sampling over progressive totals of ``size * p``.

    With cumulative totals ``Pi[k] = size * (p[0] + ... + p[k])`` and one
    uniform ``d`` in [0, 1), element k is selected when some
    ``d + l`` (l = 0 .. size-1) falls in ``[Pi[k-1], Pi[k])``.  A point
    landing exactly on a boundary goes to the right-hand interval.

    ``shuffle`` applies a random permutation to the element order before
    the sweep (the marginals are unaffected, adjacent elements stop being
    paired).  ``offset`` fixes ``d`` instead of drawing it.
    """
    p = np.asarray(p, dtype=np.float64)
    _check_feasible(p, size)
    rng = as_generator(rng)
    order = rng.permutation(len(p)) if shuffle else None
    q = p[order] if shuffle else p
    totals = np.cumsum(size * q)
    d = rng.random() if offset is None else float(offset)
    if not 0.0 <= d < 1.0:
        raise ValueError("offset must lie in [0, 1)")
    pos = np.searchsorted(totals, d + np.arange(size), side="right")
    # zero-width intervals never catch a point, so only rounding at the top
    # (or a zero-probability tail) can push a point past the end
    if pos[-1] >= len(q):
        np.minimum(pos, _last_positive(q), out=pos)
    idx = order[pos] if shuffle else pos
    return SampleDraw(idx.astype(np.int64), replacement=False)


def systematic_sample_batch(
    p: ProbabilityVector,
    size: int,
    draws: int,
    rng: RNGLike = None,
    *,
    shuffle: bool = True,
    chunk: int = 20000,
) -> npt.NDArray[np.int64]:
    """Vectorized version of :func:`systematic_sample_without_replacement`.

    Returns an integer array of shape (draws, size).
    """
    p = np.asarray(p, dtype=np.float64)
    _check_feasible(p, size)
    rng = as_generator(rng)
    n = len(p)
    out = np.empty((draws, size), dtype=np.int64)
    steps = np.arange(size)
    for start in range(0, draws, chunk):
        m = min(chunk, draws - start)
        if shuffle:
            order = np.argsort(rng.random((m, n)), axis=1)
            q = p[order]
        else:
            order = None
            q = np.broadcast_to(p, (m, n))
        totals = np.cumsum(size * q, axis=1)
        points = rng.random(m)[:, None] + steps
        pos = (totals[:, None, :] <= points[:, :, None]).sum(axis=2)
        last = n - 1 - np.argmax(q[:, ::-1] > 0, axis=1)
        np.minimum(pos, last[:, None], out=pos)
        if shuffle:
            pos = np.take_along_axis(order, pos, axis=1)
        out[start : start + m] = pos
    return out


def sequential_sample_without_replacement(
    p: ProbabilityVector, size: int, rng: RNGLike = None
) -> SampleDraw:
    """Draw one index at a time, renormalizing over what is left.

    This is the textbook illustration where inclusion probabilities differ
    from the per-trial sampling probabilities ``p``.
    """
    p = np.asarray(p, dtype=np.float64)
    if size > np.count_nonzero(p):
        raise BatchTooLarge(
            f"cannot draw {size} distinct indices from {np.count_nonzero(p)} "
            "positive entries"
        )
    rng = as_generator(rng)
    remaining = p.copy()
    picked = np.empty(size, dtype=np.int64)
    for t in range(size):
        cdf = np.cumsum(remaining)
        j = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
        j = min(j, _last_positive(remaining))
        picked[t] = j
        remaining[j] = 0.0
    return SampleDraw(picked, replacement=False)


Scheme = Literal["sequential", "systematic"]


def _sequential_subset_probabilities(p: ProbabilityVector, size: int):
    """Probability of every final subset under sequential drawing.

    Dynamic program over bitmasks: P(S) sums over the last element j of S
    of P(S - j) * p_j / (1 - p(S - j)); this equals the sum over all
    orderings of S.  Returns (masks of popcount ``size``, probabilities,
    membership matrix).
    """
    n = len(p)
    nmask = 1 << n
    members = ((np.arange(nmask)[:, None] >> np.arange(n)) & 1).astype(bool)
    mass = members @ p
    count = members.sum(axis=1)
    prob = np.zeros(nmask)
    prob[0] = 1.0
    for mask in np.argsort(count, kind="stable"):
        pm = prob[mask]
        if pm == 0.0 or count[mask] >= size:
            continue
        left = 1.0 - mass[mask]
        for j in np.flatnonzero(~members[mask]):
            if p[j] > 0:
                prob[mask | (1 << j)] += pm * p[j] / left
    final = count == size
    return prob[final], members[final]


def exact_inclusion_probabilities(
    p: ProbabilityVector, size: int, scheme: Scheme = "systematic"
) -> npt.NDArray[np.float64]:
    """Per-element inclusion probabilities (these sum to ``size``).

    ``systematic`` is the closed form ``min(size * p, 1)``; ``sequential``
    sums the probability of every possible outcome and is limited to
    twelve elements.
    """
    p = np.asarray(p, dtype=np.float64)
    if size > len(p):
        raise BatchTooLarge(f"cannot draw {size} of {len(p)} elements")
    if scheme == "systematic":
        return np.minimum(size * p, 1.0)
    if scheme == "sequential":
        if len(p) > MAX_ENUMERATION:
            raise TooLargeToEnumerate(f"{len(p)} elements > {MAX_ENUMERATION}")
        prob, members = _sequential_subset_probabilities(p, size)
        return prob @ members
    raise ValueError(f"unknown scheme {scheme!r}")


def _systematic_cover(start: float, length: float):
    """Offsets d in [0, 1) for which some d + l lands in [start, start+length)."""
    if length >= 1.0 - INCLUSION_TOL:
        return [(0.0, 1.0)]
    lo = start - np.floor(start)
    hi = lo + length
    if hi <= 1.0:
        return [(lo, hi)]
    return [(lo, 1.0), (0.0, hi - 1.0)]


def pair_inclusion_probabilities(
    p: ProbabilityVector, size: int, scheme: Scheme = "systematic"
) -> npt.NDArray[np.float64]:
    """Joint inclusion matrix P(i and j both selected); diagonal holds
    the single inclusion probabilities.

    The systematic case is for the unshuffled sweep and is computed by
    intersecting, for each pair, the sets of offsets that select them.
    """
    p = np.asarray(p, dtype=np.float64)
    n = len(p)
    if size > n:
        raise BatchTooLarge(f"cannot draw {size} of {n} elements")
    if scheme == "sequential":
        if n > MAX_ENUMERATION:
            raise TooLargeToEnumerate(f"{n} elements > {MAX_ENUMERATION}")
        prob, members = _sequential_subset_probabilities(p, size)
        m = members.astype(np.float64)
        return (m * prob[:, None]).T @ m
    if scheme != "systematic":
        raise ValueError(f"unknown scheme {scheme!r}")
    _check_feasible(p, size)
    totals = np.concatenate([[0.0], np.cumsum(size * p)])
    covers = [_systematic_cover(totals[k], size * p[k]) if p[k] > 0 else []
              for k in range(n)]
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i, n):
            overlap = 0.0
            for a0, a1 in covers[i]:
                for b0, b1 in covers[j]:
                    overlap += max(0.0, min(a1, b1) - max(a0, b0))
            out[i, j] = out[j, i] = overlap
    return out
