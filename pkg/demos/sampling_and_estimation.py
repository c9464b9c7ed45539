"""Weighted mini-batches and the reweighted mean.

Draws mini-batches with and without replacement from a skewed population
and shows that reweighting each picked value by its inclusion probability
keeps the batch mean unbiased, while good probabilities shrink its spread.
"""

import numpy as np

from isfedavg.estimator import ht_estimate
from isfedavg.sampling import (
    cap_inclusion,
    exact_inclusion_probabilities,
    sample_with_replacement,
    systematic_sample_without_replacement,
)

rng = np.random.default_rng(0)
values = rng.lognormal(sigma=1.5, size=12)
batch = 3
print(f"population mean: {values.mean():.4f}")

schedules = {
    "uniform": np.full(len(values), 1 / len(values)),
    # capped so that no inclusion probability exceeds one
    "proportional": cap_inclusion(values / values.sum(), batch),
}
for name, p in schedules.items():
    print(f"\n{name} probabilities, inclusion sums to",
          exact_inclusion_probabilities(p, batch).sum().round(6))
    for label, draw_fn in [("with replacement", sample_with_replacement),
                           ("systematic", systematic_sample_without_replacement)]:
        est = np.array([ht_estimate(values, p, draw_fn(p, batch, rng))[0] for _ in range(20000)])
        print(f"  {label:17s} mean {est.mean():.4f}  std {est.std():.4f}")

# Proportional probabilities make the reweighted terms nearly equal, so the
# spread collapses; capping the largest value keeps it from being exactly zero.
