"""Uniform versus importance-sampled federated averaging on regression.

Runs the quick configuration in configs/small.yaml with every scheme and
prints the averaged steady-state deviation from the minimizer.  Pass a
directory as the first argument to also write the CSV traces there.
"""

import sys
from pathlib import Path

from isfedavg.harness import ExperimentSpec, format_rows, load_config, run_experiment

config = Path(__file__).resolve().parent.parent / "configs" / "small.yaml"
out = sys.argv[1] if len(sys.argv) > 1 else None
spec = ExperimentSpec.from_mapping(load_config(config), out=out)
result = run_experiment(spec)
print(format_rows(result.summary_rows(), header=("scheme", "name", "value")), end="")

for scheme, trace in result.traces.items():
    db = trace.mean_db
    marks = ", ".join(f"{i}: {db[i - 1]:6.1f}" for i in (1, 100, 400, trace.iterations))
    print(f"{scheme:9s} MSD dB at iteration {marks}")
