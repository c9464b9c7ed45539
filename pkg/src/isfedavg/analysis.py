"""Numeric values of the convergence constants for a concrete instance.

Per agent k, with data probabilities p_n and E_k epochs of B_k samples:

    agent_noise_slope[k] = 3 delta^2 / (E_k B_k) * (1 + sum_n 1 / (N_k^2 p_n))
    data_variability[k]  = 6 / (E_k B_k N_k^2) * sum_n ||grad Q(w_opt; x_n)||^2 / p_n
    local_noise_floor[k] = 3 / (B_k N_k^2) * sum_n ||grad Q(w_k_opt; x_n)||^2 / p_n

and across agents, with agent probabilities p_k,

    noise_slope = 3 delta^2 + (1/K^2) sum_k (agent_noise_slope[k] + 3 delta^2) / p_k
    noise_floor = (1/K^2) sum_k (data_variability[k] + alpha_k ||grad P_k(w_opt)||^2) / p_k

which hold as stated for draws without replacement and get an extra 1/L
for draws with replacement.  The mean-square error then contracts by

    contraction = 1 - 2 mu nu + mu^2 (delta^2 + noise_slope)

per iteration towards a floor of order mu * noise_floor.
"""

from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import numpy.typing as npt

from isfedavg.federated import FederationConfig, usable_probabilities
from isfedavg.probabilities import alpha as alpha_constants
from isfedavg.problems import ProblemInstance, risk_minimizer

Array = npt.NDArray[np.float64]


@dataclass
class TheoryConstants:
    strong_convexity: float
    lipschitz: float
    local_spread: float
    agent_noise_slope: Array
    data_variability: Array
    local_noise_floor: Array
    alpha: Array
    noise_slope: float
    noise_floor: float
    with_replacement: bool
    participants: int
    agent_probs: Array
    epochs: Array

    def scalars(self) -> Dict[str, float]:
        keys = ("strong_convexity", "lipschitz", "local_spread", "noise_slope", "noise_floor")
        return {k: float(getattr(self, k)) for k in keys}

    def as_dict(self) -> dict:
        out = asdict(self)
        for k, v in out.items():
            if isinstance(v, np.ndarray):
                out[k] = v.tolist()
        return out


def curvature_constants(instance: ProblemInstance) -> Tuple[float, float, float]:
    """Strong convexity, per-sample gradient Lipschitz constant, and the
    largest distance between a local minimizer and the global one."""
    x, _, _ = instance.stacked()
    sq = np.einsum("ij,ij->i", x, x)
    rho = instance.ridge
    if instance.kind == "regression":
        nu = 2.0 * float(np.linalg.eigvalsh(instance.covariance())[0]) + 2.0 * rho
        delta = 2.0 * float(sq.max()) + 2.0 * rho
    else:
        nu = 2.0 * rho
        delta = float(sq.max()) / 4.0 + 2.0 * rho
    w_opt = risk_minimizer(instance)
    xi = max(
        float(np.linalg.norm(risk_minimizer(instance, k) - w_opt))
        for k in range(instance.num_agents)
    )
    return nu, delta, xi


def noise_constants(
    instance: ProblemInstance,
    probs,
    config: FederationConfig,
    w_ref=None,
    local_refs: Optional[Sequence[Array]] = None,
    curvature: Optional[Tuple[float, float, float]] = None,
) -> TheoryConstants:
    """Evaluate the gradient-noise constants for the probabilities that a
    run with ``config`` would actually use.

    ``w_ref`` defaults to the global minimizer and ``local_refs`` to the
    per-agent minimizers.  ``curvature`` may pass precomputed
    :func:`curvature_constants`.
    """
    repl = config.with_replacement
    L, K = config.participants, instance.num_agents
    nu, delta, xi = curvature if curvature is not None else curvature_constants(instance)
    if w_ref is None:
        w_ref = risk_minimizer(instance)
    if local_refs is None:
        local_refs = [risk_minimizer(instance, k) for k in range(K)]
    p_agents = usable_probabilities(probs.agent_probs, L, repl)
    epochs = np.asarray(config.epochs, dtype=np.float64)
    batches = np.asarray(config.batches, dtype=np.float64)
    sizes = instance.sizes.astype(np.float64)
    slope_k = np.empty(K)
    variability = np.empty(K)
    local_floor = np.empty(K)
    for k in range(K):
        p = usable_probabilities(probs.data_probs[k], int(batches[k]), repl)
        inv = 1.0 / (sizes[k] ** 2 * p)
        g_opt = instance.sample_gradients(k, w_ref)
        g_loc = instance.sample_gradients(k, local_refs[k])
        eb = epochs[k] * batches[k]
        slope_k[k] = 3.0 * delta**2 / eb * (1.0 + inv.sum())
        variability[k] = 6.0 / eb * float(inv @ np.einsum("ij,ij->i", g_opt, g_opt))
        local_floor[k] = 3.0 / batches[k] * float(inv @ np.einsum("ij,ij->i", g_loc, g_loc))
    alpha = alpha_constants(epochs, batches)
    local_grad = np.linalg.norm(instance.local_gradients(w_ref), axis=1)
    slope = 3.0 * delta**2 + np.sum((slope_k + 3.0 * delta**2) / p_agents) / K**2
    floor = np.sum((variability + alpha * local_grad**2) / p_agents) / K**2
    scale = 1.0 / L if repl else 1.0
    return TheoryConstants(
        strong_convexity=nu,
        lipschitz=delta,
        local_spread=xi,
        agent_noise_slope=slope_k,
        data_variability=variability,
        local_noise_floor=local_floor,
        alpha=alpha,
        noise_slope=float(slope * scale),
        noise_floor=float(floor * scale),
        with_replacement=repl,
        participants=L,
        agent_probs=p_agents,
        epochs=epochs,
    )


def step_size_bounds(constants: TheoryConstants) -> Tuple[float, Array]:
    """Largest admissible step size for the global recursion and for
    each agent's local recursion."""
    nu, delta = constants.strong_convexity, constants.lipschitz
    K = len(constants.agent_probs)
    global_bound = 2.0 * nu / (delta**2 + constants.noise_slope)
    local_weight = constants.epochs / (K**2 * constants.agent_probs**2)
    local_bounds = 2.0 * nu / (delta**2 + local_weight * constants.agent_noise_slope)
    return float(global_bound), local_bounds


def rates(constants: TheoryConstants, mu: float, config=None) -> Tuple[float, Array, float]:
    """Global contraction factor, per-agent local factors, and the
    largest step size for which all of them stay below one."""
    nu, delta = constants.strong_convexity, constants.lipschitz
    K = len(constants.agent_probs)
    lam = 1.0 - 2.0 * mu * nu + mu**2 * (delta**2 + constants.noise_slope)
    local_weight = constants.epochs / (K**2 * constants.agent_probs**2)
    lam_k = 1.0 - 2.0 * nu * mu + mu**2 * (delta**2 + local_weight * constants.agent_noise_slope)
    g, loc = step_size_bounds(constants)
    return float(lam), lam_k, float(min(g, loc.min()))


def msd_envelope(constants: TheoryConstants, mu: float, msd0: float, iterations: int) -> Array:
    """Upper bound on the expected MSD after 0 .. iterations rounds."""
    lam, _, _ = rates(constants, mu)
    i = np.arange(iterations + 1)
    decay = lam**i
    return decay * msd0 + (1.0 - decay) / (1.0 - lam) * mu**2 * constants.noise_floor


def steady_state_bound(constants: TheoryConstants, mu: float) -> float:
    lam, _, _ = rates(constants, mu)
    return mu**2 * constants.noise_floor / (1.0 - lam)


def incremental_noise_sample(instance, trajectories, probs, w_prev=None) -> Array:
    """Realized incremental error for one round.

    ``trajectories`` holds one ``(agent, steps)`` pair per participant
    (repeats allowed), where ``steps`` are the :class:`LocalStep` records
    of that agent's local run.  ``probs`` must hold the usable
    probabilities.  The error compares each epoch's reweighted gradient
    at the local iterate with the same batch evaluated at the round's
    starting model.
    """
    K = instance.num_agents
    total = np.zeros(instance.dim)
    for k, steps in trajectories:
        w0 = steps[0].start if w_prev is None else w_prev
        p = probs.data_probs[k]
        n = len(p)
        batch = len(steps[0].batch)
        acc = np.zeros(instance.dim)
        for step in steps:
            wts = 1.0 / (n * p[step.batch])
            diff = instance.sample_gradients(k, step.start, step.batch) - instance.sample_gradients(
                k, w0, step.batch
            )
            acc += wts @ diff
        total += acc / (K * probs.agent_probs[k] * len(steps) * batch)
    return total / len(trajectories)


def constants_report(constants: TheoryConstants, mu: float) -> List[Tuple[str, float]]:
    """Flat (name, value) rows for reporting."""
    lam, lam_k, mu_max = rates(constants, mu)
    rows = list(constants.scalars().items())
    rows += [
        ("step_size", mu),
        ("contraction", lam),
        ("max_local_contraction", float(lam_k.max())),
        ("max_step_size", mu_max),
        ("steady_state_bound", steady_state_bound(constants, mu) if lam < 1 else float("inf")),
        ("mean_data_variability", float(constants.data_variability.mean())),
        ("mean_local_noise_floor", float(constants.local_noise_floor.mean())),
        ("admissible", float(mu < mu_max)),
    ]
    return rows
