"""Self-checks against brute-force references.

Each check compares a closed-form code path with exhaustive enumeration,
a grid search or a Monte-Carlo estimate and returns a
:class:`CheckResult`.  ``isfedavg verify`` runs them all.
"""

import time
from dataclasses import dataclass
from typing import Callable, List

import numpy as np

from isfedavg import oracles
from isfedavg.analysis import incremental_noise_sample, noise_constants
from isfedavg.estimator import (
    WeightedSampleSet,
    ht_estimate,
    ht_variance_with_replacement,
    ht_variance_without_replacement,
)
from isfedavg.federated import (
    FederationConfig,
    ProbabilitySet,
    gradient_noise_batch,
    initial_probabilities,
    local_run,
    usable_probabilities,
)
from isfedavg.probabilities import optimal_agent_probabilities, optimal_data_probabilities
from isfedavg.problems import ProblemInstance, generate_regression, risk_minimizer
from isfedavg.sampling import (
    SampleDraw,
    cap_inclusion,
    exact_inclusion_probabilities,
    pair_inclusion_probabilities,
    systematic_sample_batch,
    systematic_sample_without_replacement,
)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name} ({self.seconds:.1f}s): {self.detail}"


def _timed(name: str, fn: Callable[[], tuple]) -> CheckResult:
    start = time.perf_counter()
    passed, detail = fn()
    return CheckResult(name, bool(passed), detail, time.perf_counter() - start)


def small_regression() -> ProblemInstance:
    """Five heterogeneous agents with 40 two-dimensional samples each."""
    return generate_regression(
        5, 40, 2, noise_variances=[0.01, 0.05, 0.2, 0.5, 1.0], rng=7, ridge=0.001
    )


SMALL_EPOCHS = [1, 2, 3, 1, 2]
SMALL_BATCHES = [2, 3, 4, 5, 1]


# -- estimator moments ------------------------------------------------------


def _enumerated_moments(values, weights, outcomes, replacement):
    """Mean and mean-square error of ``ht_estimate`` over listed outcomes."""
    target = values.mean(axis=0)
    mean = np.zeros(values.shape[1])
    mse = 0.0
    for prob, seq in outcomes:
        est = ht_estimate(values, weights, SampleDraw(np.array(seq), replacement))
        mean += prob * est
        mse += prob * float(np.sum((est - target) ** 2))
    return mean, mse


def estimator_moments(seed: int = 0, instances: int = 20, max_size: int = 6, max_batch: int = 3):
    """Exhaustive enumeration against the estimator's mean and both
    variance formulas, for every population size and batch size."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    cases = 0
    for n in range(1, max_size + 1):
        for size in range(1, min(max_batch, n) + 1):
            for _ in range(instances):
                values = rng.normal(size=(n, 2))
                raw = rng.uniform(0.05, 1.0, n)
                raw /= raw.sum()
                target = values.mean(axis=0)
                sset = WeightedSampleSet(values)

                out = oracles.enumerate_outcomes(raw, size, "with")
                mean, mse = _enumerated_moments(values, raw, out, True)
                worst = max(worst, np.abs(mean - target).max(),
                            abs(ht_variance_with_replacement(sset, raw, size) - mse))

                p = exact_inclusion_probabilities(raw, size, "sequential") / size
                out = oracles.enumerate_outcomes(raw, size, "sequential")
                mean, mse = _enumerated_moments(values, p, out, False)
                pair = pair_inclusion_probabilities(raw, size, "sequential")
                exact = ht_variance_without_replacement(sset, p, size, pair).exact
                worst = max(worst, np.abs(mean - target).max(), abs(exact - mse))

                q = cap_inclusion(raw, size)
                out = oracles.enumerate_outcomes(q, size, "systematic")
                mean, mse = _enumerated_moments(values, q, out, False)
                pair = pair_inclusion_probabilities(q, size, "systematic")
                exact = ht_variance_without_replacement(sset, q, size, pair).exact
                worst = max(worst, np.abs(mean - target).max(), abs(exact - mse))
                cases += 3
    return worst <= 1e-10, f"{cases} cases, worst deviation {worst:.2e} (tolerance 1e-10)"


# -- inclusion probabilities ------------------------------------------------


def inclusion_probabilities(seed: int = 0, trials: int = 100_000):
    rng = np.random.default_rng(seed)
    problems = []
    worst_sum = 0.0
    for n in range(2, 9):
        for size in range(1, n + 1):
            raw = rng.uniform(0.05, 1.0, n)
            raw /= raw.sum()
            worst_sum = max(worst_sum, abs(exact_inclusion_probabilities(raw, size, "sequential").sum() - size))
            q = cap_inclusion(raw, size)
            worst_sum = max(worst_sum, abs(exact_inclusion_probabilities(q, size, "systematic").sum() - size))
    if worst_sum > 1e-10:
        problems.append(f"inclusion sums off by {worst_sum:.2e}")

    example = np.array([1 / 3, 1 / 6, 1 / 3, 1 / 6])
    closed = exact_inclusion_probabilities(example, 2, "sequential")[0]
    enumerated = oracles.inclusion_from_outcomes(oracles.enumerate_outcomes(example, 2, "sequential"), 4)[0]
    if abs(closed - 19 / 30) > 1e-12 or abs(enumerated - 19 / 30) > 1e-12:
        problems.append(f"P(first included) = {closed!r} / {enumerated!r}, expected 19/30")

    size = 3
    raw = rng.uniform(0.05, 1.0, 10)
    q = cap_inclusion(raw / raw.sum(), size)
    draws = systematic_sample_batch(q, size, trials, rng)
    freq = np.bincount(draws.ravel(), minlength=len(q)) / trials
    incl = size * q
    se = np.sqrt(incl * (1 - incl) / trials)
    z = np.abs(freq - incl) / np.where(se > 0, se, np.inf)
    if np.any(np.abs(freq - incl) > 3 * se + 1e-12):
        problems.append(f"systematic frequencies off by up to {z.max():.2f} SE")
    detail = (f"sum error {worst_sum:.1e}; P(first)={closed:.15f}; "
              f"max |freq - L p| = {z.max():.2f} SE over {trials} trials")
    return not problems, "; ".join(problems) or detail


# -- gradient noise ---------------------------------------------------------


def gradient_noise(seed: int = 0, draws: int = 100_000, slack: float = 0.2):
    """Zero mean and bounded second moment of the gradient error at three
    fixed models, for uniform and importance sampling, with and without
    replacement."""
    inst = small_regression()
    w_opt = risk_minimizer(inst)
    models = [np.zeros(2), w_opt + 0.5, w_opt - np.array([1.0, -2.0])]
    rng = np.random.default_rng(seed)
    worst_z = 0.0
    worst_ratio = 0.0
    problems = []
    for scheme in ("uniform", "optimal"):
        for repl in ("with", "without"):
            cfg = FederationConfig(5, 2, SMALL_EPOCHS, SMALL_BATCHES, 0.01, 1, scheme=scheme,
                                   replacement=repl)
            probs = initial_probabilities(inst, cfg, w_opt)
            c = noise_constants(inst, probs, cfg, w_opt)
            for w in models:
                s = gradient_noise_batch(inst, w, cfg, probs, draws, rng)
                se = s.std(axis=0, ddof=1) / np.sqrt(draws)
                z = np.abs(s.mean(axis=0)) / se
                worst_z = max(worst_z, z.max())
                second = float(np.mean(np.sum(s**2, axis=1)))
                bound = c.noise_slope * float(np.sum((w - w_opt) ** 2)) + c.noise_floor
                worst_ratio = max(worst_ratio, second / bound)
                if np.any(z > 3):
                    problems.append(f"{scheme}/{repl}: mean {z.max():.2f} SE from zero")
                if second > (1 + slack) * bound:
                    problems.append(f"{scheme}/{repl}: second moment {second:.3g} > bound {bound:.3g}")
    detail = f"max |mean| {worst_z:.2f} SE, max moment/bound {worst_ratio:.3g}"
    return not problems, "; ".join(problems) or detail


# -- probability optimality -------------------------------------------------


def probability_optimality(seed: int = 0, instances: int = 10, resolution: float = 0.01):
    rng = np.random.default_rng(seed)
    worst = np.inf
    for dim in (2, 3, 4):
        for _ in range(instances):
            norms = rng.uniform(0.05, 3.0, dim)
            p = optimal_data_probabilities(norms)
            best = float(np.sum(norms**2 / p))
            _, grid = oracles.grid_minimum(lambda pts: np.sum(norms**2 / pts, axis=1), dim, resolution)
            worst = min(worst, grid / best - 1.0)

            sigma = rng.uniform(0.0, 2.0, dim)
            grad = rng.uniform(0.0, 2.0, dim)
            alpha = rng.uniform(3.0, 9.0, dim)
            scores = sigma + alpha * grad**2
            p = optimal_agent_probabilities(sigma, grad, alpha)
            best = float(np.sum(scores / p))
            _, grid = oracles.grid_minimum(lambda pts: np.sum(scores / pts, axis=1), dim, resolution)
            worst = min(worst, grid / best - 1.0)
    ok = worst >= -1e-12
    return ok, f"smallest (grid - formula) / formula = {worst:.3e}"


# -- incremental noise ------------------------------------------------------


def _incremental_second_moment(inst, w_opt, w, cfg, draws, seed):
    probs = initial_probabilities(inst, cfg, w_opt)
    pa = usable_probabilities(probs.agent_probs, cfg.participants, False)
    usable = ProbabilitySet(pa, tuple(usable_probabilities(p, int(b), False)
                                      for p, b in zip(probs.data_probs, cfg.batches)))
    rng = np.random.default_rng(seed)
    total = 0.0
    exact_zero = True
    for _ in range(draws):
        chosen = systematic_sample_without_replacement(pa, cfg.participants, rng).indices
        traj = []
        for k in chosen:
            steps = []
            local_run(inst, k, w, cfg, probs, rng, agent_prob=pa[k], trace=steps)
            traj.append((k, steps))
        q = incremental_noise_sample(inst, traj, usable)
        exact_zero &= bool(np.all(q == 0))
        total += float(q @ q)
    return total / draws, exact_zero


def incremental_noise(seed: int = 0, draws: int = 4000, step_size: float = 0.1):
    """Single-epoch rounds carry no incremental error; with three epochs
    halving the step size shrinks its mean square by a factor in [1.5, 4].

    The same random stream is used at both step sizes, so batches and
    participants coincide and only the step changes.
    """
    inst = small_regression()
    w_opt = risk_minimizer(inst)
    w = w_opt + np.array([0.5, -0.5])
    one = FederationConfig(5, 2, 1, SMALL_BATCHES, step_size, 1, scheme="optimal")
    m1, zero = _incremental_second_moment(inst, w_opt, w, one, min(draws, 500), seed)
    three = FederationConfig(5, 2, 3, SMALL_BATCHES, step_size, 1, scheme="optimal")
    half = FederationConfig(5, 2, 3, SMALL_BATCHES, step_size / 2, 1, scheme="optimal")
    a, _ = _incremental_second_moment(inst, w_opt, w, three, draws, seed + 1)
    b, _ = _incremental_second_moment(inst, w_opt, w, half, draws, seed + 1)
    factor = a / b
    ok = zero and m1 == 0.0 and 1.5 <= factor <= 4.0
    return ok, f"single epoch exactly zero: {zero}; halving factor {factor:.3f} (band [1.5, 4])"


CHECKS = {
    "estimator_moments": estimator_moments,
    "inclusion_probabilities": inclusion_probabilities,
    "gradient_noise": gradient_noise,
    "probability_optimality": probability_optimality,
    "incremental_noise": incremental_noise,
}

QUICK_BUDGETS = {
    "estimator_moments": {"instances": 5},
    "inclusion_probabilities": {"trials": 20_000},
    "gradient_noise": {"draws": 20_000},
    "probability_optimality": {"instances": 3},
    "incremental_noise": {"draws": 1000},
}


def run_checks(seed: int = 0, quick: bool = False) -> List[CheckResult]:
    results = []
    for name, fn in CHECKS.items():
        kwargs = QUICK_BUDGETS[name] if quick else {}
        results.append(_timed(name, lambda: fn(seed=seed, **kwargs)))
    return results
