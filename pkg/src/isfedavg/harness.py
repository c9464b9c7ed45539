"""Experiment orchestration: configs, repeated runs, averaging and CSV output.

A run is described by a flat key/value mapping (usually a YAML file with
no nesting).  Every repetition draws its sampling randomness from a seed
derived from the master seed and the repetition index only, so all
schemes in one experiment see the same problem instance and, where their
distributions coincide, the same random draws.
"""

import csv
import dataclasses
import io
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import yaml

from isfedavg.analysis import constants_report, curvature_constants, noise_constants
from isfedavg.exceptions import ConfigError
from isfedavg.federated import SCHEMES, FederationConfig, ProbabilitySet, train
from isfedavg.metrics import msd, msd_db, testing_error, to_db
from isfedavg.probabilities import AdaptiveState, plugin_schedule
from isfedavg.problems import (
    AgentDataset,
    ProblemInstance,
    generate_regression,
    load_libsvm,
    partition_non_iid,
    risk_minimizer,
    synthetic_classification_pool,
)

__all__ = [
    "ExperimentSpec",
    "MetricTrace",
    "ExperimentResult",
    "load_config",
    "build_problem",
    "repetition_seed",
    "run_experiment",
    "plateau_horizon",
    "constants_table",
    "emit_csv",
    "write_trace",
    "read_trace",
    "msd",
    "msd_db",
    "testing_error",
]

log = logging.getLogger(__name__)

PLATEAU_WINDOW = 50
PLATEAU_TOLERANCE = 0.01


@dataclass
class ExperimentSpec:
    """Everything needed to reproduce one comparison of sampling schemes.

    Integer ranges such as ``epochs: [1, 5]`` are drawn once per agent
    from the data stream, so they are part of the problem instance.
    ``iterations: auto`` runs the uniform scheme for ``max_iterations``
    and cuts every trace at the first plateau of its averaged curve.
    """

    problem: str = "regression"
    # regression data
    agents: int = 10
    samples: Union[int, List[int]] = 100
    dim: int = 2
    ridge: float = 0.001
    noise: Union[str, float] = "mixture"
    noise_range: List[float] = field(default_factory=lambda: [0.5, 1.0])
    quiet_range: List[float] = field(default_factory=lambda: [5e-5, 1e-4])
    noisy_fraction: float = 0.05
    features: str = "gaussian"
    feature_covariance: Optional[Union[float, List[float]]] = None
    # classification data
    dataset: Optional[str] = None
    test_dataset: Optional[str] = None
    n_features: Optional[int] = None
    test_fraction: float = 0.25
    pool_size: int = 4000
    label_flip: float = 0.1
    shard_sizes: Optional[List[int]] = None
    # federation
    participants: int = 2
    epochs: Union[int, List[int]] = 1
    batches: Union[int, List[int]] = 1
    step_size: float = 0.01
    iterations: Union[int, str] = 100
    max_iterations: int = 2000
    replacement: str = "without"
    baseline_replacement: str = "with"
    # experiment
    schemes: List[str] = field(default_factory=lambda: list(SCHEMES))
    repetitions: int = 1
    seed: int = 0
    steady_fraction: float = 0.25
    workers: int = 1
    out: Optional[str] = None

    def __post_init__(self):
        if self.problem not in ("regression", "classification"):
            raise ConfigError(f"problem must be regression or classification, not {self.problem!r}")
        if isinstance(self.schemes, str):
            self.schemes = [self.schemes]
        if not self.schemes:
            raise ConfigError("at least one scheme is required")
        bad = [s for s in self.schemes if s not in SCHEMES]
        if bad:
            raise ConfigError(f"unknown schemes {bad}; choose from {list(SCHEMES)}")
        if len(set(self.schemes)) != len(self.schemes):
            raise ConfigError("schemes must not repeat")
        if int(self.repetitions) < 1:
            raise ConfigError("repetitions must be at least 1")
        if self.iterations != "auto" and (not _is_int(self.iterations) or int(self.iterations) < 0):
            raise ConfigError("iterations must be a non-negative integer or 'auto'")
        if self.iterations == "auto" and self.max_iterations < 2 * PLATEAU_WINDOW:
            raise ConfigError(f"max_iterations must be at least {2 * PLATEAU_WINDOW} for 'auto'")
        for key in ("replacement", "baseline_replacement"):
            if getattr(self, key) not in ("with", "without"):
                raise ConfigError(f"{key} must be 'with' or 'without'")
        if not 0 < self.steady_fraction <= 1:
            raise ConfigError("steady_fraction must lie in (0, 1]")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        if self.agents < 1 or self.dim < 1:
            raise ConfigError("agents and dim must be positive")

    @classmethod
    def from_mapping(cls, mapping: dict, **overrides) -> "ExperimentSpec":
        """Build a spec from flat key/value pairs; ``overrides`` win."""
        merged = dict(mapping or {})
        merged.update({k: v for k, v in overrides.items() if v is not None})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(merged) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        for k, v in merged.items():
            if isinstance(v, dict):
                raise ConfigError(f"config must be flat; {k!r} holds a mapping")
        try:
            return cls(**merged)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def _is_int(v) -> bool:
    return isinstance(v, (int, np.integer)) and not isinstance(v, bool)


def load_config(path) -> dict:
    """Read a flat YAML mapping.  Raises :class:`ConfigError` on any
    problem with the file."""
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must hold a key/value mapping")
    return data


def _seed_sequence(master: int, *key) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(master), spawn_key=tuple(key))


def repetition_seed(master: int, repetition: int) -> np.random.SeedSequence:
    """Sampling seed of one repetition; the scheme never enters it."""
    return _seed_sequence(master, 0, repetition)


def data_seed(master: int) -> np.random.SeedSequence:
    return _seed_sequence(master, 1)


# -- problem construction ---------------------------------------------------


@dataclass
class Problem:
    """A problem instance together with its per-agent work settings."""

    instance: ProblemInstance
    epochs: np.ndarray
    batches: np.ndarray
    w_opt: np.ndarray


def _int_setting(value, k, rng, name) -> np.ndarray:
    arr = np.asarray(value)
    if arr.ndim == 0:
        return np.full(k, int(arr), dtype=np.int64)
    if arr.shape == (2,):
        lo, hi = int(arr[0]), int(arr[1])
        if lo < 1 or hi < lo:
            raise ConfigError(f"{name} range {value} is invalid")
        return rng.integers(lo, hi + 1, size=k)
    if arr.shape == (k,):
        return arr.astype(np.int64)
    raise ConfigError(f"{name} must be a number, a [low, high] range or one value per agent")


def _noise_variances(spec: ExperimentSpec, rng) -> np.ndarray:
    k = spec.agents
    if not isinstance(spec.noise, str):
        return np.full(k, float(spec.noise))
    lo, hi = spec.noise_range
    if spec.noise == "uniform":
        return rng.uniform(lo, hi, size=k)
    if spec.noise == "loguniform":
        return np.exp(rng.uniform(np.log(lo), np.log(hi), size=k))
    if spec.noise == "mixture":
        # a few loud agents among many quiet ones
        noisy = np.zeros(k, dtype=bool)
        noisy[rng.permutation(k)[: int(round(spec.noisy_fraction * k))]] = True
        qlo, qhi = spec.quiet_range
        return np.where(noisy, rng.uniform(lo, hi, size=k), rng.uniform(qlo, qhi, size=k))
    raise ConfigError(f"unknown noise model {spec.noise!r}")


def _classification_instance(spec: ExperimentSpec, rng) -> ProblemInstance:
    if spec.dataset is not None:
        if not os.path.exists(spec.dataset):
            raise ConfigError(f"dataset {spec.dataset} not found")
        pool = load_libsvm(spec.dataset, spec.n_features)
        if spec.test_dataset is not None:
            if not os.path.exists(spec.test_dataset):
                raise ConfigError(f"test dataset {spec.test_dataset} not found")
            test = load_libsvm(spec.test_dataset, pool.dim)
            return partition_non_iid(pool, spec.agents, _size_range(spec), rng=rng,
                                     ridge=spec.ridge, test_set=test)
    else:
        pool, _ = synthetic_classification_pool(spec.pool_size, spec.dim, rng=rng, flip=spec.label_flip)
    order = rng.permutation(len(pool))
    n_test = int(round(spec.test_fraction * len(pool)))
    if n_test < 1:
        raise ConfigError("test_fraction leaves no test samples")
    test_idx, train_idx = order[:n_test], order[n_test:]
    test = AgentDataset(pool.features[test_idx], pool.targets[test_idx])
    train_pool = AgentDataset(pool.features[train_idx], pool.targets[train_idx])
    return partition_non_iid(train_pool, spec.agents, _size_range(spec), rng=rng,
                             ridge=spec.ridge, test_set=test)


def _size_range(spec) -> Optional[Tuple[int, int]]:
    if spec.shard_sizes is None:
        return None
    lo, hi = spec.shard_sizes
    return int(lo), int(hi)


def build_problem(spec: ExperimentSpec) -> Problem:
    """Realize the data, per-agent epochs/batches and the minimizer.

    Everything here depends on the master seed only, never on the
    repetition or the scheme.
    """
    rng = np.random.default_rng(data_seed(spec.seed))
    if spec.problem == "regression":
        instance = generate_regression(
            spec.agents,
            spec.samples,
            spec.dim,
            noise_variances=_noise_variances(spec, rng),
            feature_covariances=spec.feature_covariance,
            rng=rng,
            ridge=spec.ridge,
            features=spec.features,
        )
    else:
        instance = _classification_instance(spec, rng)
    k = instance.num_agents
    epochs = _int_setting(spec.epochs, k, rng, "epochs")
    batches = np.minimum(_int_setting(spec.batches, k, rng, "batches"), instance.sizes)
    return Problem(instance, epochs, batches, risk_minimizer(instance))


# -- traces -----------------------------------------------------------------


@dataclass
class MetricTrace:
    """Per-iteration metric of one scheme, per repetition and averaged.

    ``metric`` is ``"msd"`` (linear squared distance) or ``"test_error"``
    (percent).  ``runs`` has shape (repetitions, iterations).
    """

    scheme: str
    metric: str
    runs: np.ndarray
    diagnostics: Dict[str, float] = field(default_factory=dict)

    @property
    def mean(self) -> np.ndarray:
        return self.runs.mean(axis=0)

    @property
    def mean_db(self) -> np.ndarray:
        return np.atleast_1d(to_db(self.mean))

    @property
    def iterations(self) -> int:
        return self.runs.shape[1]

    def truncate(self, horizon: int) -> "MetricTrace":
        return MetricTrace(self.scheme, self.metric, self.runs[:, :horizon], dict(self.diagnostics))

    def steady_state(self, fraction: float = 0.25) -> float:
        """Average of the mean curve over the final ``fraction`` of the run."""
        if self.iterations == 0:
            return float("nan")
        start = int(np.floor(self.iterations * (1.0 - fraction)))
        return float(self.mean[min(start, self.iterations - 1):].mean())


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    traces: Dict[str, MetricTrace]
    horizon: int
    plateau_found: bool
    constants: Dict[str, List[Tuple[str, float]]]

    def summary_rows(self) -> List[Tuple[str, str, float]]:
        rows = [("all", "horizon", float(self.horizon)),
                ("all", "plateau_found", float(self.plateau_found)),
                ("all", "repetitions", float(self.spec.repetitions)),
                ("all", "seed", float(self.spec.seed))]
        for name, tr in self.traces.items():
            ss = tr.steady_state(self.spec.steady_fraction)
            if tr.metric == "msd":
                rows.append((name, "steady_state_msd", ss))
                rows.append((name, "steady_state_msd_db", to_db(ss) if ss == ss else ss))
            else:
                rows.append((name, "final_test_error_pct", float(tr.mean[-1]) if tr.iterations else ss))
            rows += [(name, k, float(v)) for k, v in sorted(tr.diagnostics.items())]
        return rows


def plateau_horizon(curve, window: int = PLATEAU_WINDOW, tolerance: float = PLATEAU_TOLERANCE):
    """First iteration at which the curve has settled.

    Compares the mean over the latest ``window`` iterations with the mean
    over the ``window`` before it and stops once they differ by less than
    ``tolerance`` relative.  Returns (horizon, found); when the curve never
    settles the horizon is its full length.
    """
    c = np.asarray(curve, dtype=np.float64)
    n = len(c)
    if n < 2 * window:
        return n, False
    sums = np.concatenate([[0.0], np.cumsum(c)])
    for end in range(2 * window, n + 1):
        recent = sums[end] - sums[end - window]
        before = sums[end - window] - sums[end - 2 * window]
        if before == 0:
            if recent == 0:
                return end, True
            continue
        if abs(recent - before) < tolerance * abs(before):
            return end, True
    return n, False


def _scheme_config(spec: ExperimentSpec, problem: Problem, scheme: str, iterations: int, seed):
    repl = spec.baseline_replacement if scheme == "uniform" else spec.replacement
    return FederationConfig(
        num_agents=problem.instance.num_agents,
        participants=spec.participants,
        epochs=problem.epochs,
        batches=problem.batches,
        step_size=spec.step_size,
        iterations=iterations,
        scheme=scheme,
        replacement=repl,
        seed=seed,
    )


def _starting_probs(problem: Problem, scheme: str):
    if scheme == "optimal":
        agents, data, _ = plugin_schedule(problem.instance, problem.w_opt, problem.epochs, problem.batches)
        return ProbabilitySet(agents, data)
    return None


def _one_repetition(args):
    spec, problem, scheme, iterations, rep, probs = args
    config = _scheme_config(spec, problem, scheme, iterations, repetition_seed(spec.seed, rep))
    records = train(problem.instance, config, w_opt=problem.w_opt, probs=probs)
    metric = "msd" if problem.instance.kind == "regression" else "test_error"
    values = np.array([getattr(r, metric) for r in records], dtype=np.float64)
    final_state = records[-1].probs if records else None
    return values, final_state


def _probability_distances(problem: Problem, states: Sequence[AdaptiveState]) -> Dict[str, float]:
    """Distances between the optimal schedule and the final adaptive
    estimates: of the repetition-averaged estimate, and averaged per run."""
    target_agents, target_data, _ = plugin_schedule(
        problem.instance, problem.w_opt, problem.epochs, problem.batches
    )
    agents = np.array([s.agent_probs for s in states])
    per_run_agent = np.linalg.norm(agents - target_agents, axis=1)
    per_run_data = np.zeros(len(states))
    data_gap = 0.0
    for k, target in enumerate(target_data):
        est = np.array([s.data_probs[k] for s in states])
        per_run_data += np.linalg.norm(est - target, axis=1)
        data_gap += float(np.linalg.norm(est.mean(axis=0) - target))
    k_total = len(target_data)
    return {
        "agent_prob_distance": float(np.linalg.norm(agents.mean(axis=0) - target_agents)),
        "data_prob_distance": data_gap / k_total,
        "agent_prob_distance_per_run": float(per_run_agent.mean()),
        "data_prob_distance_per_run": float(per_run_data.mean() / k_total),
    }


def _run_scheme(spec: ExperimentSpec, problem: Problem, scheme: str, iterations: int,
                pool: Optional[ProcessPoolExecutor]) -> MetricTrace:
    probs = _starting_probs(problem, scheme)
    jobs = [(spec, problem, scheme, iterations, r, probs) for r in range(spec.repetitions)]
    outputs = list(pool.map(_one_repetition, jobs)) if pool else [_one_repetition(j) for j in jobs]
    runs = np.vstack([v for v, _ in outputs]) if iterations else np.zeros((spec.repetitions, 0))
    metric = "msd" if problem.instance.kind == "regression" else "test_error"
    trace = MetricTrace(scheme, metric, runs)
    states = [s for _, s in outputs if isinstance(s, AdaptiveState)]
    if states:
        trace.diagnostics.update(_probability_distances(problem, states))
    return trace


def constants_table(spec: ExperimentSpec, problem: Problem, schemes: Sequence[str]):
    """Constants for the probabilities each scheme uses or converges to."""
    inst = problem.instance
    curvature = curvature_constants(inst)
    local_refs = [risk_minimizer(inst, k) for k in range(inst.num_agents)]
    uniform = ProbabilitySet.uniform(inst.sizes)
    optimal = _starting_probs(problem, "optimal")
    out = {}
    for scheme in schemes:
        cfg = _scheme_config(spec, problem, scheme, 0, 0)
        probs = uniform if scheme == "uniform" else optimal
        c = noise_constants(inst, probs, cfg, problem.w_opt, local_refs, curvature)
        out[scheme] = constants_report(c, spec.step_size)
    return out


def run_experiment(spec: ExperimentSpec, problem: Optional[Problem] = None,
                   *, with_constants: bool = True) -> ExperimentResult:
    """Run every scheme of ``spec`` for ``spec.repetitions`` seeded trainings.

    When ``spec.out`` is set, whatever finished is written there even if a
    later scheme fails.
    """
    problem = build_problem(spec) if problem is None else problem
    traces: Dict[str, MetricTrace] = {}
    auto = spec.iterations == "auto"
    horizon = spec.max_iterations if auto else int(spec.iterations)
    found = not auto
    pool = ProcessPoolExecutor(spec.workers) if spec.workers > 1 else None
    result = ExperimentResult(spec, traces, horizon, found, {})
    try:
        if auto:
            pilot = _run_scheme(spec, problem, "uniform", spec.max_iterations, pool)
            horizon, found = plateau_horizon(pilot.mean)
            result.horizon, result.plateau_found = horizon, found
            log.info("horizon %d (plateau found: %s)", horizon, found)
            if "uniform" in spec.schemes:
                traces["uniform"] = pilot.truncate(horizon)
        for scheme in spec.schemes:
            if scheme in traces:
                continue
            log.info("running %s for %d iterations x %d", scheme, horizon, spec.repetitions)
            traces[scheme] = _run_scheme(spec, problem, scheme, horizon, pool)
        if with_constants:
            result.constants = constants_table(spec, problem, spec.schemes)
    except BaseException:
        if spec.out is not None and traces:
            emit_csv(result, spec.out)
        raise
    finally:
        if pool is not None:
            pool.shutdown()
    # keep the spec's scheme order
    result.traces = {s: traces[s] for s in spec.schemes}
    if spec.out is not None:
        emit_csv(result, spec.out)
    return result


# -- CSV --------------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def _open_csv(path):
    return open(path, "w", newline="", encoding="utf-8")


def write_trace(trace: MetricTrace, path) -> None:
    """One averaged row per iteration, numbered from 1."""
    with _open_csv(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        if trace.metric == "msd":
            w.writerow(["iteration", "msd_linear", "msd_db"])
            for i, (lin, db) in enumerate(zip(trace.mean, trace.mean_db), start=1):
                w.writerow([i, _fmt(lin), _fmt(db)])
        else:
            w.writerow(["iteration", "test_error_pct"])
            for i, v in enumerate(trace.mean, start=1):
                w.writerow([i, _fmt(v)])


def read_trace(path) -> Dict[str, np.ndarray]:
    """Parse a file written by :func:`write_trace` into columns."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    cols = {name: np.array([float(r[j]) for r in rows]) for j, name in enumerate(header)}
    cols["iteration"] = cols["iteration"].astype(np.int64)
    return cols


def emit_csv(result: ExperimentResult, out_dir) -> List[Path]:
    """Write ``<scheme>.csv`` per scheme, ``constants.csv`` and ``summary.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, trace in result.traces.items():
        path = out / f"{name}.csv"
        write_trace(trace, path)
        written.append(path)
    path = out / "constants.csv"
    with _open_csv(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scheme", "name", "value"])
        for scheme, rows in result.constants.items():
            for name, value in rows:
                w.writerow([scheme, name, _fmt(value)])
    written.append(path)
    path = out / "summary.csv"
    with _open_csv(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scheme", "name", "value"])
        for scheme, name, value in result.summary_rows():
            w.writerow([scheme, name, _fmt(value)])
    written.append(path)
    return written


def format_rows(rows, header=("name", "value")) -> str:
    """Plain aligned text table for console output."""
    buf = io.StringIO()
    rows = [tuple(str(c) if not isinstance(c, float) else f"{c:.6g}" for c in r) for r in rows]
    widths = [max(len(str(h)), *(len(r[j]) for r in rows)) if rows else len(str(h))
              for j, h in enumerate(header)]
    buf.write("  ".join(str(h).ljust(wd) for h, wd in zip(header, widths)).rstrip() + "\n")
    for r in rows:
        buf.write("  ".join(c.ljust(wd) for c, wd in zip(r, widths)).rstrip() + "\n")
    return buf.getvalue()
