"""Inclusion-probability schedules for agents and their data.

Data points are weighted by the norm of their gradient; agents by
``sqrt(sigma_k^2 + alpha_k ||grad P_k||^2)`` where ``sigma_k^2`` is the
agent's data-variability constant and ``alpha_k = 3 + 6 / (E_k B_k)``.
Evaluated at the minimizer these are the variance-optimal choices; the
plug-in schedule evaluates them at the current iterate and the adaptive
schedule only refreshes the entries that were sampled.
"""

from dataclasses import dataclass, replace
from collections.abc import Sequence
from typing import List, Optional, Tuple

import numpy as np
import numpy.typing as npt

from isfedavg.exceptions import MassOverflow

Array = npt.NDArray[np.float64]

PROBABILITY_FLOOR = 1e-6


def _normalize_scores(scores) -> Array:
    scores = np.asarray(scores, dtype=np.float64)
    total = scores.sum()
    if total <= 0.0:
        # every score zero: nothing to prefer
        return np.full(len(scores), 1.0 / len(scores))
    return scores / total


def alpha(epochs, batches) -> Array:
    return 3.0 + 6.0 / (np.asarray(epochs, dtype=np.float64) * np.asarray(batches))


def optimal_data_probabilities(gradient_norms) -> Array:
    """``p_n`` proportional to the per-sample gradient norm."""
    norms = np.asarray(gradient_norms, dtype=np.float64)
    if np.any(norms < 0):
        raise ValueError("gradient norms must be non-negative")
    return _normalize_scores(norms)


def agent_scores(sigma_sk, grad_norms, alpha_k) -> Array:
    return np.sqrt(
        np.asarray(sigma_sk, dtype=np.float64)
        + np.asarray(alpha_k, dtype=np.float64) * np.square(grad_norms)
    )


def optimal_agent_probabilities(sigma_sk, grad_norms_at_opt, alpha_k) -> Array:
    """``p_k`` proportional to ``sqrt(sigma_k^2 + alpha_k ||grad P_k||^2)``."""
    if not len(sigma_sk) == len(grad_norms_at_opt) == len(alpha_k):
        raise ValueError("inputs must have one entry per agent")
    return _normalize_scores(agent_scores(sigma_sk, grad_norms_at_opt, alpha_k))


def data_variability(gradient_norms, probs, epochs: float, batch: float) -> float:
    """``6 / (E B N^2) * sum_n ||grad Q_n||^2 / p_n``.

    Terms with a zero gradient contribute nothing even when ``p_n`` is
    zero as well.
    """
    g2 = np.square(np.asarray(gradient_norms, dtype=np.float64))
    p = np.asarray(probs, dtype=np.float64)
    n = len(g2)
    live = g2 > 0
    if np.any(p[live] <= 0):
        return float("inf")
    return float(6.0 / (epochs * batch * n * n) * np.sum(g2[live] / p[live]))


def apply_floor(p, floor: float = PROBABILITY_FLOOR) -> Array:
    """Clamp entries below ``floor`` and renormalize."""
    p = np.asarray(p, dtype=np.float64)
    if p.min() >= floor:
        return p
    q = np.maximum(p, floor)
    return q / q.sum()


def agent_variabilities(instance, w, data_probs, epochs, batches) -> Array:
    """Per-agent data-variability constants evaluated at ``w``."""
    out = np.empty(instance.num_agents)
    for k in range(instance.num_agents):
        norms = instance.sample_gradient_norms(k, w)
        out[k] = data_variability(norms, data_probs[k], epochs[k], batches[k])
    return out


def plugin_probabilities(
    instance, w, epochs: Sequence[int], batches: Sequence[int]
) -> Tuple[Array, List[Array]]:
    """Optimal-form probabilities evaluated at ``w`` with exact gradients.

    Returns ``(agent_probs, data_probs)``.  At the minimizer this is the
    optimal schedule.
    """
    agent_probs, data_probs, _ = plugin_schedule(instance, w, epochs, batches)
    return agent_probs, [p.copy() for p in data_probs]


class SegmentedVector(Sequence):
    """Read-only per-agent views into one concatenated array."""

    def __init__(self, flat: Array, starts, sizes):
        self._flat = flat
        self._starts = np.asarray(starts)
        self._ends = self._starts + np.asarray(sizes)

    def __len__(self) -> int:
        return len(self._starts)

    def __getitem__(self, k):
        if isinstance(k, slice):
            return [self[i] for i in range(*k.indices(len(self)))]
        return self._flat[self._starts[k] : self._ends[k]]


def plugin_schedule(instance, w, epochs, batches):
    """Like :func:`plugin_probabilities` but also returns the per-agent
    data-variability constants.  All agents are handled in one pass and
    the data vectors come back as a :class:`SegmentedVector`."""
    sizes = instance.sizes
    _, _, starts = instance.stacked()
    norms = instance.all_sample_gradient_norms(w)
    sums = np.add.reduceat(norms, starts)
    safe = np.where(sums > 0, sums, 1.0)
    flat = norms / np.repeat(safe, sizes)
    for k in np.flatnonzero(sums <= 0):
        flat[starts[k] : starts[k] + sizes[k]] = 1.0 / sizes[k]
    flat.setflags(write=False)
    data_probs = SegmentedVector(flat, starts, sizes)
    # with p proportional to the norms, sum_n g_n^2 / p_n = (sum_n g_n)^2
    sigma = 6.0 / (np.asarray(epochs) * np.asarray(batches) * sizes**2) * sums**2
    local = instance.local_gradients(w)
    agent_probs = optimal_agent_probabilities(
        sigma, np.linalg.norm(local, axis=1), alpha(epochs, batches)
    )
    return agent_probs, data_probs, sigma


@dataclass(frozen=True)
class AdaptiveState:
    """Running probability estimates owned by one training loop."""

    agent_probs: Array
    data_probs: Tuple[Array, ...]
    sigma_sk: Array
    alpha_k: Array

    @classmethod
    def uniform(cls, sizes, epochs, batches) -> "AdaptiveState":
        k = len(sizes)
        return cls(
            agent_probs=np.full(k, 1.0 / k),
            data_probs=tuple(np.full(int(n), 1.0 / n) for n in sizes),
            sigma_sk=np.zeros(k),
            alpha_k=alpha(epochs, batches),
        )


def _partial_update(p: Array, chosen, scores) -> Array:
    """Redistribute the mass held by ``chosen`` in proportion to ``scores``.

    Entries outside ``chosen`` are copied unchanged.
    """
    chosen = np.asarray(chosen, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    p = p.copy()
    mask = np.zeros(len(p), dtype=bool)
    mask[chosen] = True
    rest = p[~mask].sum()
    if rest >= 1.0:
        p = p / p.sum()
        rest = p[~mask].sum()
        if rest >= 1.0:
            raise MassOverflow("sampled entries hold no probability mass")
    p[chosen] = _normalize_scores(scores) * (1.0 - rest)
    return p


def _unique(indices, values):
    indices = np.asarray(indices, dtype=np.int64)
    values = np.asarray(values, dtype=np.float64)
    idx, first = np.unique(indices, return_index=True)
    return idx, values[first]


def update_agent_probabilities(
    state: AdaptiveState,
    participants,
    stochastic_grad_norms,
    sigma_sk: Optional[Sequence[float]] = None,
) -> AdaptiveState:
    """Refresh the probabilities of this round's participants.

    ``stochastic_grad_norms`` (and optionally freshly computed
    ``sigma_sk``) are aligned with ``participants``.  Participants share
    the mass they held before, split according to
    ``sqrt(sigma^2 + alpha ||grad||^2)``; everyone else is untouched.
    Repeated participants use their first occurrence.
    """
    idx = getattr(participants, "indices", participants)
    chosen, norms = _unique(idx, stochastic_grad_norms)
    sigma = state.sigma_sk
    if sigma_sk is not None:
        _, fresh = _unique(idx, sigma_sk)
        sigma = sigma.copy()
        sigma[chosen] = fresh
    scores = agent_scores(sigma[chosen], norms, state.alpha_k[chosen])
    probs = _partial_update(state.agent_probs, chosen, scores)
    return replace(state, agent_probs=probs, sigma_sk=sigma)


def update_data_probabilities(
    state: AdaptiveState, k: int, batch, sample_grad_norms
) -> AdaptiveState:
    """Refresh agent k's probabilities for the sampled points only."""
    idx = getattr(batch, "indices", batch)
    chosen, norms = _unique(idx, sample_grad_norms)
    data = list(state.data_probs)
    data[k] = _partial_update(data[k], chosen, norms)
    return replace(state, data_probs=tuple(data))
