"""Federated averaging with importance-sampled agents and mini-batches.

Each iteration picks L agents, every picked agent runs E_k local epochs
from the shared model, and the server averages the L results.  Each
epoch draws B_k samples and steps along the reweighted gradient

    g = (1/B_k) sum_b grad Q_k(w; x_b) / (N_k p_b)
    w <- w - mu * g / (E_k K p_k)

With uniform probabilities this reduces to plain FedAvg with the epoch
count folded into the step size.
"""

from dataclasses import dataclass, field
from typing import List, Literal, NamedTuple, Optional, Sequence, Union

import numpy as np
import numpy.typing as npt

from isfedavg.exceptions import BatchTooLarge, ConfigError
from isfedavg.metrics import msd, testing_error
from isfedavg.probabilities import (
    AdaptiveState,
    apply_floor,
    plugin_schedule,
    update_agent_probabilities,
    update_data_probabilities,
)
from isfedavg.problems import ProblemInstance, risk_minimizer
from isfedavg.sampling import (
    SampleDraw,
    as_generator,
    cap_inclusion,
    sample_with_replacement,
    sample_with_replacement_batch,
    systematic_sample_batch,
    systematic_sample_without_replacement,
)

Array = npt.NDArray[np.float64]
Scheme = Literal["uniform", "optimal", "plugin", "adaptive"]
SCHEMES = ("uniform", "optimal", "plugin", "adaptive")


@dataclass
class FederationConfig:
    """Run settings.  ``epochs`` and ``batches`` may be scalars or one
    value per agent."""

    num_agents: int
    participants: int
    epochs: Union[int, Sequence[int]]
    batches: Union[int, Sequence[int]]
    step_size: float
    iterations: int
    scheme: Scheme = "uniform"
    replacement: Literal["with", "without"] = "without"
    seed: object = 0
    initial: Optional[Array] = None
    record_noise: bool = False

    def __post_init__(self):
        k = self.num_agents
        self.epochs = _per_agent(self.epochs, k, "epochs")
        self.batches = _per_agent(self.batches, k, "batches")
        if not 1 <= self.participants <= k:
            raise ConfigError(f"participants must lie in [1, {k}]")
        if np.any(self.epochs < 1) or np.any(self.batches < 1):
            raise ConfigError("epochs and batch sizes must be at least 1")
        if not self.step_size > 0:
            raise ConfigError("step size must be positive")
        if self.iterations < 0:
            raise ConfigError("iterations must be non-negative")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}")
        if self.replacement not in ("with", "without"):
            raise ConfigError("replacement must be 'with' or 'without'")

    @property
    def with_replacement(self) -> bool:
        return self.replacement == "with"

    def check(self, instance: ProblemInstance) -> None:
        if instance.num_agents != self.num_agents:
            raise ConfigError(
                f"config has {self.num_agents} agents, instance has {instance.num_agents}"
            )
        if np.any(self.batches > instance.sizes):
            raise BatchTooLarge("a batch size exceeds its agent's sample count")


def _per_agent(value, k, name) -> npt.NDArray[np.int64]:
    arr = np.asarray(value, dtype=np.int64)
    if arr.ndim == 0:
        return np.full(k, int(arr))
    if arr.shape != (k,):
        raise ConfigError(f"{name} needs one entry per agent")
    return arr


@dataclass(frozen=True)
class ProbabilitySet:
    """Normalized inclusion probabilities for agents and each agent's data."""

    agent_probs: Array
    data_probs: tuple

    @classmethod
    def uniform(cls, sizes) -> "ProbabilitySet":
        k = len(sizes)
        return cls(np.full(k, 1.0 / k), tuple(np.full(int(n), 1.0 / n) for n in sizes))


class LocalStep(NamedTuple):
    """One local epoch: the iterate it started from and its batch."""

    start: Array
    batch: npt.NDArray[np.int64]


@dataclass
class IterationRecord:
    iterate: Array
    participants: SampleDraw
    msd: Optional[float] = None
    test_error: Optional[float] = None
    realized_gradient_noise: Optional[Array] = None
    # updated schedule, set by adaptive rounds only
    probs: object = field(default=None, repr=False)


def usable_probabilities(p, size: int, with_replacement: bool) -> Array:
    """The vector actually used for drawing and for importance weights.

    Tiny entries are floored; for draws without replacement entries
    whose inclusion probability would exceed one are capped.
    """
    p = apply_floor(p)
    return p if with_replacement else cap_inclusion(p, size)


def _draw(p, size, with_replacement, rng) -> npt.NDArray[np.int64]:
    if with_replacement:
        return sample_with_replacement(p, size, rng).indices
    return systematic_sample_without_replacement(p, size, rng).indices


def local_run(
    instance: ProblemInstance,
    k: int,
    w_start,
    config: FederationConfig,
    probs,
    rng,
    *,
    agent_prob: Optional[float] = None,
    trace: Optional[List[LocalStep]] = None,
) -> Array:
    """Run agent k's E_k local epochs from ``w_start``.

    ``agent_prob`` is the agent's usable inclusion probability; when
    omitted it is derived from ``probs.agent_probs``.  Passing a list as
    ``trace`` collects a :class:`LocalStep` per epoch.
    """
    rng = as_generator(rng)
    repl = config.with_replacement
    epochs, batch = int(config.epochs[k]), int(config.batches[k])
    if agent_prob is None:
        agent_prob = usable_probabilities(
            probs.agent_probs, config.participants, repl
        )[k]
    p_data = usable_probabilities(probs.data_probs[k], batch, repl)
    n = len(p_data)
    step = config.step_size / (epochs * config.num_agents * agent_prob)
    w = np.array(w_start, dtype=np.float64)
    for _ in range(epochs):
        idx = _draw(p_data, batch, repl, rng)
        grads = instance.sample_gradients(k, w, idx)
        g = (grads / (n * batch * p_data[idx])[:, None]).sum(axis=0)
        if trace is not None:
            trace.append(LocalStep(w.copy(), idx))
        w = w - step * g
    return w


def batch_gradient_estimate(instance, k, w, batches, p_data) -> Array:
    """Reweighted gradient at fixed ``w`` averaged over the given batches."""
    idx = np.concatenate(batches)
    grads = instance.sample_gradients(k, w, idx)
    n = len(p_data)
    return (grads / (n * p_data[idx])[:, None]).sum(axis=0) / len(idx)


def gradient_noise_sample(instance, w, draw, probs, epoch_plan) -> Array:
    """Realized gradient error at ``w`` for one draw of agents and batches.

    ``probs`` must hold the usable probabilities.  ``epoch_plan[j]`` is the
    list of per-epoch batch indices used by the j-th drawn agent.
    """
    idx = getattr(draw, "indices", draw)
    k_total = instance.num_agents
    acc = np.zeros(instance.dim)
    for j, k in enumerate(idx):
        est = batch_gradient_estimate(instance, k, w, epoch_plan[j], probs.data_probs[k])
        acc += est / (k_total * probs.agent_probs[k])
    return acc / len(idx) - instance.global_gradient(w)


def gradient_noise_batch(instance, w, config: FederationConfig, probs, draws: int, rng) -> Array:
    """``draws`` independent realizations of the gradient error at ``w``.

    Per-sample gradients are evaluated once; only the selection is
    redrawn.  ``probs`` are raw schedules and are made usable here.
    Returns an array of shape (draws, M).
    """
    rng = as_generator(rng)
    repl = config.with_replacement
    L = config.participants
    p_agents = usable_probabilities(probs.agent_probs, L, repl)
    if repl:
        agents = sample_with_replacement_batch(p_agents, L, draws, rng)
    else:
        agents = systematic_sample_batch(p_agents, L, draws, rng)
    total = np.zeros((draws, instance.dim))
    for k in range(instance.num_agents):
        rows, cols = np.nonzero(agents == k)
        if len(rows) == 0:
            continue
        epochs, batch = int(config.epochs[k]), int(config.batches[k])
        p_data = usable_probabilities(probs.data_probs[k], batch, repl)
        scaled = instance.sample_gradients(k, w) / (len(p_data) * p_data)[:, None]
        count = len(rows) * epochs
        if repl:
            idx = sample_with_replacement_batch(p_data, batch, count, rng)
        else:
            idx = systematic_sample_batch(p_data, batch, count, rng)
        est = scaled[idx].mean(axis=1).reshape(len(rows), epochs, -1).mean(axis=1)
        np.add.at(total, rows, est / (instance.num_agents * p_agents[k]))
    return total / L - instance.global_gradient(w)


def _schedule_probs(probs, config):
    """Usable agent vector for this iteration."""
    return usable_probabilities(probs.agent_probs, config.participants, config.with_replacement)


def iterate(
    instance: ProblemInstance,
    w_prev,
    config: FederationConfig,
    probs,
    rng,
    *,
    reference: Optional[Array] = None,
) -> IterationRecord:
    """One server round from ``w_prev``.

    ``probs`` is a :class:`ProbabilitySet` or, for the adaptive scheme, an
    :class:`AdaptiveState`; in the latter case the returned record carries
    the updated state in ``probs``.
    """
    rng = as_generator(rng)
    w_prev = np.asarray(w_prev, dtype=np.float64)
    repl = config.with_replacement
    p_agents = _schedule_probs(probs, config)
    chosen = _draw(p_agents, config.participants, repl, rng)
    adaptive = isinstance(probs, AdaptiveState)
    track = adaptive or config.record_noise
    outputs = np.empty((len(chosen), instance.dim))
    plans = []
    for j, k in enumerate(chosen):
        trace: Optional[List[LocalStep]] = [] if track else None
        outputs[j] = local_run(
            instance, k, w_prev, config, probs, rng, agent_prob=p_agents[k], trace=trace
        )
        if track:
            plans.append([s.batch for s in trace])
    w_new = outputs.mean(axis=0)
    record = IterationRecord(iterate=w_new, participants=SampleDraw(chosen, repl))
    if reference is not None:
        record.msd = msd(w_new, reference)
    if instance.kind == "logistic" and instance.test_set is not None:
        record.test_error = testing_error(w_new, instance.test_set)
    if config.record_noise:
        usable = ProbabilitySet(
            p_agents,
            {int(k): usable_probabilities(probs.data_probs[k], int(config.batches[k]), repl)
             for k in chosen},
        )
        record.realized_gradient_noise = gradient_noise_sample(
            instance, w_prev, chosen, usable, plans
        )
    if adaptive:
        record.probs = _adaptive_update(instance, w_prev, config, probs, chosen, plans)
    return record


def _adaptive_update(instance, w_prev, config, state: AdaptiveState, chosen, plans):
    repl = config.with_replacement
    seen = {}
    for j, k in enumerate(chosen):
        seen.setdefault(int(k), j)
    agents = np.fromiter(seen.keys(), dtype=np.int64)
    est_norms = np.empty(len(agents))
    sigmas = np.empty(len(agents))
    new_state = state
    for i, k in enumerate(agents):
        batch = int(config.batches[k])
        p_data = usable_probabilities(state.data_probs[k], batch, repl)
        grads = instance.sample_gradients(k, w_prev)
        norms = np.sqrt(np.einsum("ij,ij->i", grads, grads))
        batches = plans[seen[k]]
        idx = np.concatenate(batches)
        est = (grads[idx] / (len(p_data) * p_data[idx])[:, None]).mean(axis=0)
        est_norms[i] = np.linalg.norm(est)
        # evaluated at the gradient-proportional data probabilities, which the
        # agent can form from its own gradients, as in the plug-in schedule
        sigmas[i] = 6.0 / (config.epochs[k] * batch * len(norms) ** 2) * norms.sum() ** 2
        sampled = np.unique(idx)
        new_state = update_data_probabilities(new_state, k, sampled, norms[sampled])
    return update_agent_probabilities(new_state, agents, est_norms, sigmas)


def initial_probabilities(instance, config: FederationConfig, w_opt=None):
    """Starting schedule for the configured scheme."""
    if config.scheme == "adaptive":
        return AdaptiveState.uniform(instance.sizes, config.epochs, config.batches)
    if config.scheme == "optimal":
        if w_opt is None:
            w_opt = risk_minimizer(instance)
        agents, data, _ = plugin_schedule(instance, w_opt, config.epochs, config.batches)
        return ProbabilitySet(agents, data)
    return ProbabilitySet.uniform(instance.sizes)


def train(
    instance: ProblemInstance,
    config: FederationConfig,
    *,
    w_opt: Optional[Array] = None,
    probs=None,
) -> List[IterationRecord]:
    """Run ``config.iterations`` rounds from the initial model.

    For regression, MSD is measured against ``w_opt`` (computed when not
    given).  ``probs`` overrides the scheme's starting schedule.
    """
    config.check(instance)
    rng = as_generator(config.seed)
    w = np.zeros(instance.dim) if config.initial is None else np.array(config.initial, float)
    reference = None
    if instance.kind == "regression":
        reference = risk_minimizer(instance) if w_opt is None else np.asarray(w_opt)
    if probs is None:
        probs = initial_probabilities(instance, config, w_opt if w_opt is not None else reference)
    records = []
    for _ in range(config.iterations):
        if config.scheme == "plugin":
            agents, data, _ = plugin_schedule(instance, w, config.epochs, config.batches)
            probs = ProbabilitySet(agents, data)
        rec = iterate(instance, w, config, probs, rng, reference=reference)
        if rec.probs is not None:
            probs = rec.probs
            if records:
                # only the latest adaptive state is worth keeping around
                records[-1].probs = None
        w = rec.iterate
        records.append(rec)
    return records
