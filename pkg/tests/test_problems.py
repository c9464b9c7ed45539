from pathlib import Path

import numpy as np
import pytest

from isfedavg import oracles
from isfedavg.exceptions import (
    DimensionMismatch,
    IndexOutOfRange,
    InvalidCovariance,
    ParseError,
    PoolTooSmall,
)
from isfedavg.problems import (
    AgentDataset,
    ProblemInstance,
    closed_form_minimizer,
    generate_regression,
    load_libsvm,
    local_minimizer,
    partition_non_iid,
    synthetic_classification_pool,
)

DATA = Path(__file__).parent / "data" / "synthetic_200.libsvm"


@pytest.fixture(scope="module")
def regression():
    return generate_regression(4, 25, 3, noise_variances=[0.01, 0.1, 0.5, 0.0], rng=3, ridge=0.01)


@pytest.fixture(scope="module")
def logistic():
    pool, _ = synthetic_classification_pool(120, 4, rng=8)
    return partition_non_iid(pool, 3, (30, 50), rng=2, ridge=0.05)


def test_noise_free_recovers_planted():
    inst = generate_regression(5, 20, 3, noise_variances=0.0, rng=1, ridge=0.0)
    np.testing.assert_allclose(closed_form_minimizer(inst), inst.planted_model, atol=1e-8)


def test_full_scale_shapes():
    inst = generate_regression(300, 100, 2, rng=0)
    assert inst.num_agents == 300
    assert set(inst.sizes.tolist()) == {100}
    assert inst.dim == 2


def test_determinism():
    a = generate_regression(3, 10, 2, noise_variances=0.1, rng=42)
    b = generate_regression(3, 10, 2, noise_variances=0.1, rng=42)
    for x, y in zip(a.agents, b.agents):
        assert np.array_equal(x.features, y.features)
        assert np.array_equal(x.targets, y.targets)


def test_invalid_covariance():
    with pytest.raises(InvalidCovariance):
        generate_regression(2, 5, 2, feature_covariances=[[1.0, 0.0], [0.0, -1.0]], rng=0)
    with pytest.raises(InvalidCovariance):
        generate_regression(2, 5, 2, feature_covariances=np.ones(5), rng=0)


def test_ridge_shrinkage():
    inst = generate_regression(3, 20, 2, rng=5, ridge=1e8)
    w = closed_form_minimizer(inst)
    assert np.linalg.norm(w) <= 1e-6 * np.linalg.norm(inst.cross_moment())


def test_first_order_optimality(regression):
    w = closed_form_minimizer(regression)
    assert np.linalg.norm(regression.global_gradient(w)) <= 1e-8


def test_local_minimizer_zero_gradient(regression):
    for k in range(regression.num_agents):
        assert np.linalg.norm(regression.local_gradient(k, local_minimizer(regression, k))) <= 1e-8


def test_regression_gradient_algebra(regression):
    w = np.array([0.3, -1.0, 2.0])
    for k in range(regression.num_agents):
        a = regression.agents[k]
        r = a.features.T @ a.features / len(a)
        c = a.features.T @ a.targets / len(a)
        expected = 2 * (r + regression.ridge * np.eye(3)) @ w - 2 * c
        np.testing.assert_allclose(regression.local_gradient(k, w), expected, atol=1e-12)


def test_zero_residual_gradient():
    u = np.array([[1.0, 2.0]])
    w = np.array([0.5, 0.25])
    inst = ProblemInstance([AgentDataset(u, u @ w)], ridge=0.0)
    np.testing.assert_array_equal(inst.sample_gradient(0, 0, w), [0.0, 0.0])


@pytest.mark.parametrize("which", ["regression", "logistic"])
def test_sample_gradients_average_to_local(which, request):
    inst = request.getfixturevalue(which)
    w = np.linspace(-1, 1, inst.dim)
    for k in range(inst.num_agents):
        avg = np.mean([inst.sample_gradient(k, n, w) for n in range(len(inst.agents[k]))], axis=0)
        np.testing.assert_allclose(avg, inst.local_gradient(k, w), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("which", ["regression", "logistic"])
def test_finite_differences(which, request):
    inst = request.getfixturevalue(which)
    rng = np.random.default_rng(0)
    for _ in range(10):
        k = int(rng.integers(inst.num_agents))
        n = int(rng.integers(len(inst.agents[k])))
        w = rng.normal(size=inst.dim)
        v = rng.normal(size=inst.dim)
        fd = oracles.central_difference(lambda x: inst.loss(k, n, x), w, v, step=1e-6)
        an = float(inst.sample_gradient(k, n, w) @ v)
        assert abs(fd - an) <= 1e-5 * max(1.0, abs(an))


@pytest.mark.parametrize("which", ["regression", "logistic"])
def test_convexity_probe(which, request):
    inst = request.getfixturevalue(which)
    rng = np.random.default_rng(1)
    for _ in range(20):
        k = int(rng.integers(inst.num_agents))
        n = int(rng.integers(len(inst.agents[k])))
        w1, w2 = rng.normal(size=(2, inst.dim)) * 3
        for t in (0.25, 0.5, 0.75):
            mid = inst.loss(k, n, t * w1 + (1 - t) * w2)
            assert mid <= t * inst.loss(k, n, w1) + (1 - t) * inst.loss(k, n, w2) + 1e-10


def test_index_errors(regression):
    with pytest.raises(IndexOutOfRange):
        regression.local_gradient(9, np.zeros(3))
    with pytest.raises(IndexOutOfRange):
        regression.sample_gradient(0, 25, np.zeros(3))


def test_single_agent_local_is_global():
    inst = generate_regression(1, 30, 2, rng=4)
    w = np.array([1.0, -2.0])
    np.testing.assert_allclose(inst.local_gradient(0, w), inst.global_gradient(w))


class TestLibsvm:
    def test_line_format(self, tmp_path):
        f = tmp_path / "a.txt"
        f.write_text("1 1:0.5 3:-0.2\n")
        pool = load_libsvm(f, n_features=3)
        assert pool.targets.tolist() == [1.0]
        assert pool.features.tolist() == [[0.5, 0.0, -0.2]]

    def test_zero_one_labels(self, tmp_path):
        f = tmp_path / "b.txt"
        f.write_text("0 1:1\n+1 2:1\n-1 1:2\n")
        assert load_libsvm(f).targets.tolist() == [-1.0, 1.0, -1.0]

    def test_empty(self, tmp_path):
        f = tmp_path / "c.txt"
        f.write_text("")
        with pytest.raises(ParseError):
            load_libsvm(f)

    def test_bad_token_reports_line(self, tmp_path):
        f = tmp_path / "d.txt"
        f.write_text("1 1:0.5\n-1 2:abc\n")
        with pytest.raises(ParseError, match="line 2"):
            load_libsvm(f)

    def test_dimension_mismatch(self, tmp_path):
        f = tmp_path / "e.txt"
        f.write_text("1 5:0.5\n")
        with pytest.raises(DimensionMismatch):
            load_libsvm(f, n_features=3)

    def test_fixture(self):
        pool = load_libsvm(DATA, n_features=22)
        assert pool.features.shape == (200, 22)
        assert set(pool.targets.tolist()) == {-1.0, 1.0}


def _entropy(y):
    q = np.mean(y > 0)
    return 0.0 if q in (0.0, 1.0) else -(q * np.log(q) + (1 - q) * np.log(1 - q))


class TestPartition:
    def test_size_range(self):
        pool, _ = synthetic_classification_pool(40000, 5, rng=0)
        inst = partition_non_iid(pool, 100, (79, 688), rng=1)
        assert inst.sizes.min() >= 79 and inst.sizes.max() <= 688
        assert inst.sizes.sum() == 40000

    def test_single_agent_gets_everything(self):
        pool, _ = synthetic_classification_pool(50, 3, rng=0)
        inst = partition_non_iid(pool, 1, rng=0)
        assert len(inst.agents[0]) == 50

    def test_label_skew(self):
        pool = load_libsvm(DATA, n_features=22)
        inst = partition_non_iid(pool, 8, (15, 35), rng=7)
        avg = np.mean([_entropy(a.targets) for a in inst.agents])
        # recorded on this seed; shards are mostly single-label
        assert avg < _entropy(pool.targets)
        assert avg == pytest.approx(0.07029, abs=1e-4)

    def test_pool_too_small(self):
        pool, _ = synthetic_classification_pool(50, 3, rng=0)
        with pytest.raises(PoolTooSmall):
            partition_non_iid(pool, 10, (10, 20), rng=0)

    def test_deterministic(self):
        pool, _ = synthetic_classification_pool(300, 3, rng=0)
        a = partition_non_iid(pool, 5, (40, 80), rng=3)
        b = partition_non_iid(pool, 5, (40, 80), rng=3)
        assert all(np.array_equal(x.targets, y.targets) for x, y in zip(a.agents, b.agents))


def test_risk_minimizer(regression, logistic):
    from isfedavg.problems import risk_minimizer

    np.testing.assert_allclose(risk_minimizer(regression), closed_form_minimizer(regression))
    np.testing.assert_allclose(risk_minimizer(regression, 2), local_minimizer(regression, 2))
    w = risk_minimizer(logistic)
    assert np.linalg.norm(logistic.global_gradient(w)) < 1e-6
    w1 = risk_minimizer(logistic, 1)
    assert np.linalg.norm(logistic.local_gradient(1, w1)) < 1e-6


@pytest.mark.parametrize("which", ["regression", "logistic"])
def test_stacked_paths_match_per_agent(which, regression, logistic):
    inst = regression if which == "regression" else logistic
    w = np.linspace(-1, 1, inst.dim)
    per_agent = np.concatenate([inst.sample_gradient_norms(k, w) for k in range(inst.num_agents)])
    np.testing.assert_allclose(inst.all_sample_gradient_norms(w), per_agent, rtol=1e-10, atol=1e-12)
    loop = np.array([inst.sample_gradients(k, w).mean(axis=0) for k in range(inst.num_agents)])
    np.testing.assert_allclose(inst.local_gradients(w), loop, rtol=1e-10, atol=1e-12)


def test_sphere_features_bounded():
    inst = generate_regression(3, 400, 2, feature_covariances=1.0, features="sphere", rng=0)
    x, _, _ = inst.stacked()
    np.testing.assert_allclose(np.linalg.norm(x, axis=1), np.sqrt(2), rtol=1e-12)
    np.testing.assert_allclose(inst.covariance(), np.eye(2), atol=0.1)
    with pytest.raises(ValueError):
        generate_regression(1, 5, 2, features="cube")
