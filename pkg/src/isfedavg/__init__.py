"""Federated averaging with importance sampling of agents and data."""

from isfedavg.analysis import (
    TheoryConstants,
    curvature_constants,
    incremental_noise_sample,
    msd_envelope,
    noise_constants,
    rates,
)
from isfedavg.federated import FederationConfig, ProbabilitySet, iterate, local_run, train
from isfedavg.harness import ExperimentSpec, MetricTrace, emit_csv, run_experiment
from isfedavg.metrics import msd, msd_db, testing_error
from isfedavg.problems import (
    AgentDataset,
    ProblemInstance,
    generate_regression,
    load_libsvm,
    partition_non_iid,
    risk_minimizer,
)

__version__ = "0.1.0"

__all__ = [
    "AgentDataset",
    "ExperimentSpec",
    "FederationConfig",
    "MetricTrace",
    "ProbabilitySet",
    "ProblemInstance",
    "TheoryConstants",
    "curvature_constants",
    "emit_csv",
    "generate_regression",
    "incremental_noise_sample",
    "iterate",
    "load_libsvm",
    "local_run",
    "msd",
    "msd_db",
    "msd_envelope",
    "noise_constants",
    "partition_non_iid",
    "rates",
    "risk_minimizer",
    "run_experiment",
    "testing_error",
    "train",
]
