import numpy as np
import pytest

from isfedavg.analysis import (
    curvature_constants,
    incremental_noise_sample,
    msd_envelope,
    noise_constants,
    rates,
    step_size_bounds,
)
from isfedavg.exceptions import SingularSystem
from isfedavg.federated import (
    FederationConfig,
    ProbabilitySet,
    initial_probabilities,
    local_run,
    usable_probabilities,
)
from isfedavg.problems import (
    AgentDataset,
    ProblemInstance,
    generate_regression,
    partition_non_iid,
    risk_minimizer,
    synthetic_classification_pool,
)


@pytest.fixture(scope="module")
def three():
    return generate_regression(3, 12, 2, noise_variances=[0.01, 0.1, 0.4], rng=13, ridge=0.01)


def test_unit_sample_lipschitz():
    inst = ProblemInstance([AgentDataset(np.array([[1.0]]), np.array([0.3]))], ridge=0.0)
    _, delta, xi = curvature_constants(inst)
    assert delta == pytest.approx(2.0)
    assert xi == 0.0
    flat = ProblemInstance([AgentDataset(np.array([[1.0, 0.0]]), np.array([0.3]))], ridge=0.0)
    with pytest.raises(SingularSystem):
        curvature_constants(flat)


def test_identical_agents_have_no_spread():
    a = generate_regression(1, 20, 3, rng=1).agents[0]
    inst = ProblemInstance([a, a, a], ridge=0.01)
    assert curvature_constants(inst)[2] == pytest.approx(0.0, abs=1e-12)


def test_strong_convexity_probe(three):
    nu, delta, xi = curvature_constants(three)
    assert 0 < nu <= delta and xi > 0
    rng = np.random.default_rng(0)
    for _ in range(100):
        w1, w2 = rng.normal(size=(2, 2)) * 3
        lhs = three.global_risk(w2)
        rhs = three.global_risk(w1) + three.global_gradient(w1) @ (w2 - w1) + nu / 2 * np.sum((w2 - w1) ** 2)
        assert lhs >= rhs - 1e-10


def test_logistic_curvature():
    pool, _ = synthetic_classification_pool(90, 3, rng=2)
    inst = partition_non_iid(pool, 3, (25, 35), rng=1, ridge=0.05)
    nu, delta, _ = curvature_constants(inst)
    assert nu == pytest.approx(0.1)
    assert delta == pytest.approx(np.max(np.sum(pool.features**2, axis=1)) / 4 + 0.1)


def test_uniform_slope_reduces(three):
    cfg = FederationConfig(3, 2, [1, 2, 3], [2, 3, 4], 0.01, 1)
    c = noise_constants(three, ProbabilitySet.uniform(three.sizes), cfg)
    delta = c.lipschitz
    np.testing.assert_allclose(c.agent_noise_slope, 6 * delta**2 / (cfg.epochs * cfg.batches), rtol=1e-12)


def test_floor_vanishes_without_gradients():
    inst = generate_regression(2, 6, 2, noise_variances=0.0, rng=3, ridge=0.0)
    cfg = FederationConfig(2, 1, 1, 2, 0.01, 1)
    c = noise_constants(inst, ProbabilitySet.uniform(inst.sizes), cfg, w_ref=inst.planted_model,
                        local_refs=[inst.planted_model] * 2)
    assert np.all(c.data_variability == 0) and c.noise_floor == pytest.approx(0.0, abs=1e-20)


def test_without_is_l_times_with(three):
    probs = ProbabilitySet(np.array([0.2, 0.3, 0.5]), tuple(np.full(12, 1 / 12) for _ in range(3)))
    kw = dict(num_agents=3, participants=2, epochs=[1, 2, 3], batches=[2, 3, 4], step_size=0.01, iterations=1)
    a = noise_constants(three, probs, FederationConfig(replacement="with", **kw))
    b = noise_constants(three, probs, FederationConfig(replacement="without", **kw))
    assert b.noise_slope == pytest.approx(2 * a.noise_slope, rel=1e-12)
    assert b.noise_floor == pytest.approx(2 * a.noise_floor, rel=1e-12)


def test_hand_evaluated_fixture(three):
    cfg = FederationConfig(3, 2, [1, 2, 3], [2, 3, 4], 0.01, 1, scheme="optimal")
    w_opt = risk_minimizer(three)
    probs = initial_probabilities(three, cfg, w_opt)
    c = noise_constants(three, probs, cfg, w_opt)
    # agent 1 by hand
    p = usable_probabilities(probs.data_probs[1], 3, False)
    g = three.sample_gradients(1, w_opt)
    manual = 6 / (2 * 3 * 144) * np.sum(np.sum(g**2, axis=1) / p)
    assert c.data_variability[1] == pytest.approx(manual, rel=1e-12)
    pk = usable_probabilities(probs.agent_probs, 2, False)
    loc = np.linalg.norm(three.local_gradients(w_opt), axis=1)
    floor = np.sum((c.data_variability + c.alpha * loc**2) / pk) / 9
    assert c.noise_floor == pytest.approx(floor, rel=1e-12)
    assert c.noise_floor == pytest.approx(CONSTANTS_FIXTURE[0], rel=1e-9)
    assert c.noise_slope == pytest.approx(CONSTANTS_FIXTURE[1], rel=1e-9)


CONSTANTS_FIXTURE = (0.8680946654586913, 4659.291404386754)


def test_rates_limits(three):
    cfg = FederationConfig(3, 2, [1, 2, 3], [2, 3, 4], 0.01, 1)
    c = noise_constants(three, ProbabilitySet.uniform(three.sizes), cfg)
    _, _, mu_max = rates(c, 0.0)
    lam, lam_k, _ = rates(c, mu_max / 2)
    assert 0 <= lam < 1 and np.all(lam_k < 1)
    lam_small, _, _ = rates(c, 1e-9)
    assert lam_small < 1 and lam_small > 1 - 1e-8
    # everything contracts strictly inside the bound and the worst rate hits one on it
    lam, lam_k, _ = rates(c, mu_max)
    assert max(lam, lam_k.max()) == pytest.approx(1.0, abs=1e-12)
    lam, lam_k, _ = rates(c, mu_max * 1.001)
    assert max(lam, lam_k.max()) > 1
    g, _ = step_size_bounds(c)
    assert rates(c, g * (1 - 1e-9))[0] < 1 < rates(c, g * (1 + 1e-9))[0]


def test_envelope_shape(three):
    cfg = FederationConfig(3, 2, 1, 2, 0.01, 1)
    c = noise_constants(three, ProbabilitySet.uniform(three.sizes), cfg)
    _, _, mu_max = rates(c, 0.0)
    env = msd_envelope(c, mu_max / 4, 2.0, 50)
    assert env[0] == 2.0 and len(env) == 51
    assert np.all(np.diff(env) <= 0)


def _round(inst, cfg, probs, w0, rng):
    pa = usable_probabilities(probs.agent_probs, cfg.participants, False)
    traj = []
    for k in range(inst.num_agents):
        steps = []
        local_run(inst, k, w0, cfg, probs, rng, agent_prob=pa[k], trace=steps)
        traj.append((k, steps))
    usable = ProbabilitySet(pa, tuple(usable_probabilities(p, b, False)
                                      for p, b in zip(probs.data_probs, cfg.batches)))
    return incremental_noise_sample(inst, traj, usable)


def test_single_epoch_has_no_incremental_error(three):
    cfg = FederationConfig(3, 3, 1, 3, 0.05, 1)
    q = _round(three, cfg, ProbabilitySet.uniform(three.sizes), np.array([1.0, -1.0]), 0)
    assert np.array_equal(q, np.zeros(2))


def test_two_epoch_full_batch_hand_oracle():
    inst = generate_regression(1, 5, 2, rng=8, ridge=0.05)
    cfg = FederationConfig(1, 1, 2, 5, 0.1, 1)
    w0 = np.array([0.5, 0.5])
    q = _round(inst, cfg, ProbabilitySet.uniform(inst.sizes), w0, 0)
    w1 = w0 - 0.1 / 2 * inst.global_gradient(w0)
    # second epoch's gradient at w1 against the same batch at w0, averaged over two epochs
    expect = (inst.global_gradient(w1) - inst.global_gradient(w0)) / 2
    np.testing.assert_allclose(q, expect, atol=1e-14)
