"""Simulated learning curve against its analytic upper bound.

Averages 100 seeded runs on a ten-agent problem at a quarter of the
largest admissible step size and reports how close the average gets to
the predicted envelope and steady-state level.
"""

import numpy as np

from isfedavg import FederationConfig, generate_regression, msd_envelope, noise_constants, rates, train
from isfedavg.federated import initial_probabilities
from isfedavg.problems import risk_minimizer

inst = generate_regression(10, 20, 2, noise_variances=np.logspace(-2, 0, 10), rng=1,
                           ridge=0.01, features="sphere", feature_covariances=1.0)
w_opt = risk_minimizer(inst)
epochs = np.ones(10, dtype=int)
batches = np.random.default_rng(2).integers(1, 6, size=10)
base = FederationConfig(10, 3, epochs, batches, 0.001, 0, scheme="optimal")
probs = initial_probabilities(inst, base, w_opt)
consts = noise_constants(inst, probs, base, w_opt)
mu = rates(consts, 0.001)[2] / 4
lam = rates(consts, mu)[0]
horizon = int(5 / (1 - lam))
print(f"step {mu:.5f}, contraction {lam:.5f}, {horizon} iterations")

runs = []
for seed in range(100):
    cfg = FederationConfig(10, 3, epochs, batches, mu, horizon, scheme="optimal", seed=seed)
    runs.append([r.msd for r in train(inst, cfg, w_opt=w_opt, probs=probs)])
avg = np.concatenate([[w_opt @ w_opt], np.mean(runs, axis=0)])
bound = msd_envelope(consts, mu, float(w_opt @ w_opt), horizon)

for i in (0, horizon // 10, horizon // 2, horizon):
    print(f"iteration {i:4d}: simulated {avg[i]:.3e}  bound {bound[i]:.3e}")
print(f"worst simulated/bound ratio: {np.max(avg / bound):.3f}")
