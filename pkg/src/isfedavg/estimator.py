"""Horvitz-Thompson mini-batch mean estimators and their exact moments.

For a population ``x_1 .. x_N`` and normalized inclusion probabilities
``p`` the estimator of the population mean is

    xhat = (1/B) * sum_b x_b / (N * p_b)

over a mini-batch of size B.  The same formula serves draws with and
without replacement; only the distribution of the batch differs.
"""

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
import numpy.typing as npt

from isfedavg.exceptions import (
    DimensionMismatch,
    InvalidPairMatrix,
    MissingMoments,
    ZeroProbabilityDrawn,
)
from isfedavg.sampling import SampleDraw


@dataclass
class WeightedSampleSet:
    """Population elements with optional per-element moments.

    Without ``means``/``variances`` the elements are treated as fixed
    numbers: each mean is the value itself and every variance is zero,
    which is the situation for a stored dataset.
    """

    values: npt.NDArray[np.float64]
    means: Optional[npt.NDArray[np.float64]] = None
    variances: Optional[npt.NDArray[np.float64]] = None

    def __post_init__(self):
        self.values = _as_rows(self.values)
        if self.means is not None:
            self.means = _as_rows(self.means)
            if self.means.shape != self.values.shape:
                raise DimensionMismatch("means and values differ in shape")
        if self.variances is not None:
            self.variances = np.asarray(self.variances, dtype=np.float64)
            if self.variances.shape != (len(self.values),):
                raise DimensionMismatch("one variance per element expected")
            if np.any(self.variances < 0):
                raise ValueError("variances must be non-negative")

    def moments(self):
        """Return (means, variances), filling the fixed-value defaults."""
        if self.means is None and self.variances is None:
            return self.values, np.zeros(len(self.values))
        if self.means is None or self.variances is None:
            raise MissingMoments("means and variances must be given together")
        return self.means, self.variances


def _as_rows(x) -> npt.NDArray[np.float64]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise DimensionMismatch("expected a list of vectors")
    return x


def ht_estimate(values, p, draw: SampleDraw) -> npt.NDArray[np.float64]:
    """Reweighted mini-batch mean ``(1/B) sum_b x_b / (N p_b)``.

    Scalar inputs give a length-1 vector.
    """
    x = _as_rows(values)
    p = np.asarray(p, dtype=np.float64)
    idx = np.asarray(draw.indices if isinstance(draw, SampleDraw) else draw)
    pb = p[idx]
    if np.any(pb <= 0):
        raise ZeroProbabilityDrawn("drew an element with zero probability")
    n = len(x)
    return (x[idx] / (n * pb)[:, None]).mean(axis=0)


def _scaled_deviation(means, p):
    """Rows ``xbar_n / (N p_n) - xbar`` and the population mean."""
    n = len(means)
    xbar = means.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        dev = means / (n * p)[:, None] - xbar
    return dev, xbar


def _diagonal_terms(means, variances, p):
    n = len(means)
    positive = p > 0
    if np.any(~positive & ((variances > 0) | np.any(means != 0, axis=1))):
        raise ZeroProbabilityDrawn(
            "an element with non-zero moments has zero probability; "
            "the estimator is biased"
        )
    dev, _ = _scaled_deviation(means, p)
    terms = np.zeros(n)
    pp = p[positive]
    terms[positive] = pp * (
        variances[positive] / (n * n * pp * pp)
        + np.einsum("ij,ij->i", dev[positive], dev[positive])
    )
    return terms, dev


def ht_variance_with_replacement(sample_set: WeightedSampleSet, p, size: int) -> float:
    """Exact mean-square error of the estimator for i.i.d. draws.

    ``(1/B) sum_n p_n (sigma_n^2 / (N p_n)^2 + ||xbar_n / (N p_n) - xbar||^2)``
    """
    means, variances = sample_set.moments()
    p = np.asarray(p, dtype=np.float64)
    terms, _ = _diagonal_terms(means, variances, p)
    return float(terms.sum() / size)


class WithoutReplacementVariance(NamedTuple):
    exact: float
    bound: float


def ht_variance_without_replacement(
    sample_set: WeightedSampleSet, p, size: int, pair_inclusion
) -> WithoutReplacementVariance:
    """Exact mean-square error for a fixed-size draw without replacement.

    ``pair_inclusion[i, j]`` is the probability that i and j are both in
    the batch (diagonal ignored).  The exact value adds the pairwise cross
    term to the with-replacement expression.  ``bound`` is the cross-term
    free upper bound ``sum_n p_n (...)``, obtained by Jensen's inequality
    over the batch average, so it carries no ``1/B`` factor.
    """
    means, variances = sample_set.moments()
    p = np.asarray(p, dtype=np.float64)
    pair = np.asarray(pair_inclusion, dtype=np.float64)
    n = len(means)
    if pair.shape != (n, n):
        raise InvalidPairMatrix(f"expected shape {(n, n)}, got {pair.shape}")
    if not np.allclose(pair, pair.T, atol=1e-12, rtol=0):
        raise InvalidPairMatrix("pair inclusion matrix is not symmetric")
    if np.any(pair < -1e-12) or np.any(pair > 1 + 1e-12):
        raise InvalidPairMatrix("pair inclusion probabilities outside [0, 1]")
    terms, dev = _diagonal_terms(means, variances, p)
    dev = np.where(np.isfinite(dev), dev, 0.0)
    off = pair - np.diag(np.diag(pair))
    cross = float(np.einsum("ij,ik,jk->", off, dev, dev))
    exact = terms.sum() / size + cross / size**2
    return WithoutReplacementVariance(float(exact), float(terms.sum()))
