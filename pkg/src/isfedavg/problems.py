"""Risk functions used by the experiments.

Two families, both with a ridge penalty folded into every per-sample
loss so that the per-sample gradients average exactly to the local
gradient:

* regression: ``Q(w; u, d) = (d - u.w)^2 + rho ||w||^2``
* logistic:   ``Q(w; u, y) = log(1 + exp(-y u.w)) + rho ||w||^2``

The local risk of agent k is the average of Q over its samples and the
global risk is the plain average of the K local risks.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt
from scipy.optimize import minimize
from scipy.special import expit

from isfedavg.exceptions import (
    DimensionMismatch,
    IndexOutOfRange,
    InvalidCovariance,
    ParseError,
    PoolTooSmall,
    SingularSystem,
)
from isfedavg.sampling import as_generator

Array = npt.NDArray[np.float64]
Kind = Literal["regression", "logistic"]

MAX_CONDITION = 1e12


@dataclass
class AgentDataset:
    features: Array
    targets: Array
    agent_id: int = 0

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.targets = np.ascontiguousarray(self.targets, dtype=np.float64).ravel()
        if self.features.ndim != 2:
            raise DimensionMismatch("features must be a 2-D array")
        if len(self.features) < 1:
            raise ValueError("an agent needs at least one sample")
        if len(self.targets) != len(self.features):
            raise DimensionMismatch("one target per feature row expected")

    def __len__(self) -> int:
        return len(self.targets)

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class ProblemInstance:
    """K agents sharing a model of dimension M.

    Instances are treated as immutable once built; per-agent second-order
    statistics for the regression case are cached at construction.
    """

    agents: List[AgentDataset]
    ridge: float = 0.0
    kind: Kind = "regression"
    planted_model: Optional[Array] = None
    test_set: Optional[AgentDataset] = None
    _cov: List[Array] = field(default_factory=list, repr=False)
    _cross: List[Array] = field(default_factory=list, repr=False)
    _stacked: Optional[Tuple[Array, Array, npt.NDArray[np.int64]]] = field(
        default=None, repr=False
    )
    _moments: Optional[Tuple[Array, Array]] = field(default=None, repr=False)
    _sq_norms: Optional[Array] = field(default=None, repr=False)

    def __post_init__(self):
        if not self.agents:
            raise ValueError("at least one agent is required")
        dims = {a.dim for a in self.agents}
        if len(dims) != 1:
            raise DimensionMismatch(f"agents disagree on dimension: {sorted(dims)}")
        if self.kind not in ("regression", "logistic"):
            raise ValueError(f"unknown problem kind {self.kind!r}")
        if self.ridge < 0:
            raise ValueError("ridge must be non-negative")
        if self.kind == "regression":
            self._cov = [a.features.T @ a.features / len(a) for a in self.agents]
            self._cross = [a.features.T @ a.targets / len(a) for a in self.agents]

    @property
    def num_agents(self) -> int:
        return len(self.agents)

    @property
    def dim(self) -> int:
        return self.agents[0].dim

    @property
    def sizes(self) -> npt.NDArray[np.int64]:
        return np.array([len(a) for a in self.agents])

    def _agent(self, k: int) -> AgentDataset:
        if not 0 <= k < len(self.agents):
            raise IndexOutOfRange(f"agent {k} out of range")
        return self.agents[k]

    # losses -----------------------------------------------------------
    def sample_losses(self, k: int, w, idx=None) -> Array:
        a = self._agent(k)
        x = a.features if idx is None else a.features[idx]
        y = a.targets if idx is None else a.targets[idx]
        z = x @ w
        penalty = self.ridge * float(w @ w)
        if self.kind == "regression":
            return (y - z) ** 2 + penalty
        return np.logaddexp(0.0, -y * z) + penalty

    def loss(self, k: int, n: int, w) -> float:
        self._check_sample(k, n)
        return float(self.sample_losses(k, np.asarray(w, dtype=np.float64), [n])[0])

    def local_risk(self, k: int, w) -> float:
        return float(self.sample_losses(k, np.asarray(w, dtype=np.float64)).mean())

    def global_risk(self, w) -> float:
        return float(np.mean([self.local_risk(k, w) for k in range(self.num_agents)]))

    # gradients --------------------------------------------------------
    def sample_gradients(self, k: int, w, idx=None) -> Array:
        """Per-sample gradients of agent k at ``w``, one row per sample."""
        a = self._agent(k)
        x = a.features if idx is None else a.features[idx]
        y = a.targets if idx is None else a.targets[idx]
        if self.kind == "regression":
            scale = 2.0 * (x @ w - y)
        else:
            scale = -y * expit(-y * (x @ w))
        return x * scale[:, None] + 2.0 * self.ridge * w

    def sample_gradient_norms(self, k: int, w) -> Array:
        g = self.sample_gradients(k, w)
        return np.sqrt(np.einsum("ij,ij->i", g, g))

    def sample_gradient(self, k: int, n: int, w) -> Array:
        self._check_sample(k, n)
        return self.sample_gradients(k, np.asarray(w, dtype=np.float64), [n])[0]

    def local_gradient(self, k: int, w) -> Array:
        w = np.asarray(w, dtype=np.float64)
        if self.kind == "regression":
            self._agent(k)
            return 2.0 * (self._cov[k] @ w - self._cross[k]) + 2.0 * self.ridge * w
        return self.sample_gradients(k, w).mean(axis=0)

    def local_gradients(self, w) -> Array:
        """Matrix of all K local gradients at ``w``."""
        w = np.asarray(w, dtype=np.float64)
        if self.kind == "regression":
            cov, cross = self._stacked_moments()
            return 2.0 * (cov @ w - cross) + 2.0 * self.ridge * w
        _, _, starts = self.stacked()
        grads = self.all_sample_gradients(w)
        return np.add.reduceat(grads, starts, axis=0) / self.sizes[:, None]

    def _stacked_moments(self):
        if self._moments is None:
            self._moments = (np.array(self._cov), np.array(self._cross))
        return self._moments

    def global_gradient(self, w) -> Array:
        return self.local_gradients(w).mean(axis=0)

    def stacked(self) -> Tuple[Array, Array, npt.NDArray[np.int64]]:
        """All agents' data concatenated: (features, targets, start offsets)."""
        if self._stacked is None:
            feats = np.concatenate([a.features for a in self.agents])
            targs = np.concatenate([a.targets for a in self.agents])
            starts = np.concatenate([[0], np.cumsum(self.sizes)[:-1]]).astype(np.int64)
            self._stacked = (feats, targs, starts)
        return self._stacked

    def all_sample_gradients(self, w) -> Array:
        """Per-sample gradients of every agent stacked in agent order."""
        x, y, _ = self.stacked()
        w = np.asarray(w, dtype=np.float64)
        if self.kind == "regression":
            scale = 2.0 * (x @ w - y)
        else:
            scale = -y * expit(-y * (x @ w))
        return x * scale[:, None] + 2.0 * self.ridge * w

    def all_sample_gradient_norms(self, w) -> Array:
        """Norms of every per-sample gradient, stacked in agent order."""
        x, y, _ = self.stacked()
        w = np.asarray(w, dtype=np.float64)
        if self.kind != "regression":
            g = self.all_sample_gradients(w)
            return np.sqrt(np.einsum("ij,ij->i", g, g))
        if self._sq_norms is None:
            self._sq_norms = np.einsum("ij,ij->i", x, x)
        # ||2 r u + 2 rho w||^2 expanded, with r = u.w - d
        z = x @ w
        r = z - y
        rho = self.ridge
        sq = 4.0 * (r * r * self._sq_norms + 2.0 * rho * r * z + rho * rho * float(w @ w))
        return np.sqrt(np.maximum(sq, 0.0))

    def _check_sample(self, k: int, n: int) -> None:
        if not 0 <= n < len(self._agent(k)):
            raise IndexOutOfRange(f"sample {n} out of range for agent {k}")

    # regression statistics ---------------------------------------------
    def covariance(self, k: Optional[int] = None) -> Array:
        """Sample covariance of one agent, or the average over agents."""
        self._require_regression()
        if k is None:
            return np.mean(self._cov, axis=0)
        self._agent(k)
        return self._cov[k]

    def cross_moment(self, k: Optional[int] = None) -> Array:
        self._require_regression()
        if k is None:
            return np.mean(self._cross, axis=0)
        self._agent(k)
        return self._cross[k]

    def _require_regression(self):
        if self.kind != "regression":
            raise TypeError("only defined for regression instances")


def _solve_ridge(cov: Array, cross: Array, ridge: float) -> Array:
    a = cov + ridge * np.eye(len(cov))
    if np.linalg.cond(a) > MAX_CONDITION:
        raise SingularSystem(f"condition number {np.linalg.cond(a):.3g}")
    return np.linalg.solve(a, cross)


def closed_form_minimizer(instance: ProblemInstance) -> Array:
    """Global minimizer ``(R_u + rho I)^{-1} r_du`` of the regression risk.

    ``R_u`` and ``r_du`` are averaged first within each agent and then
    across agents.
    """
    instance._require_regression()
    return _solve_ridge(instance.covariance(), instance.cross_moment(), instance.ridge)


def local_minimizer(instance: ProblemInstance, k: int) -> Array:
    instance._require_regression()
    return _solve_ridge(instance.covariance(k), instance.cross_moment(k), instance.ridge)


def risk_minimizer(instance: ProblemInstance, k: Optional[int] = None) -> Array:
    """Minimizer of the global risk, or of agent k's local risk.

    Regression uses the closed form; logistic risks are minimized
    numerically (they are strictly convex when ``ridge > 0``).
    """
    if instance.kind == "regression":
        return closed_form_minimizer(instance) if k is None else local_minimizer(instance, k)
    if k is None:
        fun, grad = instance.global_risk, instance.global_gradient
    else:
        fun = lambda w: instance.local_risk(k, w)  # noqa: E731
        grad = lambda w: instance.local_gradient(k, w)  # noqa: E731
    res = minimize(fun, np.zeros(instance.dim), jac=grad, method="L-BFGS-B",
                   options={"gtol": 1e-12, "ftol": 1e-15, "maxiter": 10000})
    return res.x


def _covariance_list(spec, num_agents: int, dim: int, rng) -> List[Array]:
    if spec is None:
        # default: independent diagonal scales, log-uniform on [0.5, 2]
        scales = np.exp(rng.uniform(np.log(0.5), np.log(2.0), size=(num_agents, dim)))
        return [np.diag(s) for s in scales]
    spec = np.asarray(spec, dtype=np.float64)
    if spec.ndim == 0:
        return [spec * np.eye(dim)] * num_agents
    if spec.shape == (dim,):
        return [np.diag(spec)] * num_agents
    if spec.shape == (dim, dim):
        return [spec] * num_agents
    if spec.shape == (num_agents, dim):
        return [np.diag(s) for s in spec]
    if spec.shape == (num_agents, dim, dim):
        return list(spec)
    raise InvalidCovariance(f"cannot interpret covariance spec of shape {spec.shape}")


def generate_regression(
    num_agents: int,
    samples_per_agent: Union[int, Sequence[int]],
    dim: int,
    noise_variances: Union[float, Sequence[float]] = 0.01,
    feature_covariances=None,
    rng=None,
    ridge: float = 0.001,
    features: Literal["gaussian", "sphere"] = "gaussian",
) -> ProblemInstance:
    """Linear model ``d = u.w* + v`` with per-agent feature covariance.

    ``w*`` is drawn once from a standard normal.  Each agent draws
    zero-mean Gaussian features with its covariance and adds zero-mean
    Gaussian noise of its own variance.  ``feature_covariances`` may be a
    scalar, a diagonal, a full matrix, or one of those per agent; by
    default each agent gets a diagonal with entries log-uniform on
    [0.5, 2].

    ``features="sphere"`` draws directions uniformly and gives every raw
    feature vector norm ``sqrt(dim)`` before applying the covariance root,
    which keeps the covariance but bounds the per-sample curvature.
    """
    if features not in ("gaussian", "sphere"):
        raise ValueError(f"unknown feature distribution {features!r}")
    if num_agents < 1 or dim < 1:
        raise ValueError("num_agents and dim must be positive")
    rng = as_generator(rng)
    sizes = np.broadcast_to(np.asarray(samples_per_agent, dtype=np.int64), (num_agents,))
    if np.any(sizes < 1):
        raise ValueError("every agent needs at least one sample")
    noise = np.broadcast_to(np.asarray(noise_variances, dtype=np.float64), (num_agents,))
    if np.any(noise < 0):
        raise ValueError("noise variances must be non-negative")
    covs = _covariance_list(feature_covariances, num_agents, dim, rng)
    w_star = rng.standard_normal(dim)
    agents = []
    for k, (cov, n, var) in enumerate(zip(covs, sizes, noise)):
        if cov.shape != (dim, dim) or not np.allclose(cov, cov.T):
            raise InvalidCovariance(f"agent {k}: covariance must be symmetric {dim}x{dim}")
        evals, evecs = np.linalg.eigh(cov)
        if evals.min() < -1e-12:
            raise InvalidCovariance(f"agent {k}: covariance is not positive semidefinite")
        root = evecs * np.sqrt(np.clip(evals, 0, None))
        z = rng.standard_normal((int(n), dim))
        if features == "sphere":
            z *= np.sqrt(dim) / np.linalg.norm(z, axis=1, keepdims=True)
        u = z @ root.T
        d = u @ w_star + np.sqrt(var) * rng.standard_normal(int(n))
        agents.append(AgentDataset(u, d, agent_id=k))
    return ProblemInstance(agents, ridge=ridge, kind="regression", planted_model=w_star)


def synthetic_classification_pool(
    size: int, dim: int, rng=None, flip: float = 0.1, bias: float = 0.0
) -> Tuple[AgentDataset, Array]:
    """Labelled pool from a planted logistic model, for tests and demos.

    Features are Gaussian with feature-wise scales log-uniform on
    [0.25, 4]; labels follow the logistic model of a random ``w*`` and are
    then flipped with probability ``flip``.  Returns (pool, w*).
    """
    rng = as_generator(rng)
    scales = np.exp(rng.uniform(np.log(0.25), np.log(4.0), size=dim))
    w_star = rng.standard_normal(dim) * 2.0 / np.sqrt(dim)
    u = rng.standard_normal((size, dim)) * scales
    prob = expit(u @ w_star + bias)
    y = np.where(rng.random(size) < prob, 1.0, -1.0)
    y = np.where(rng.random(size) < flip, -y, y)
    return AgentDataset(u, y, agent_id=0), w_star


def load_libsvm(path, n_features: Optional[int] = None) -> AgentDataset:
    """Read a LIBSVM/SVMlight text file into a dense pool.

    Each line is ``label index:value ...`` with 1-based indices.  Positive
    labels map to +1, everything else to -1.  ``n_features`` fixes the
    width (ijcnn1 has 22); otherwise the largest index seen is used.
    """
    labels: List[float] = []
    rows: List[List[Tuple[int, float]]] = []
    width = 0
    with open(Path(path)) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            tokens = line.split()
            try:
                label = float(tokens[0])
            except ValueError:
                raise ParseError(f"bad label {tokens[0]!r}", lineno) from None
            entries = []
            for tok in tokens[1:]:
                idx, sep, val = tok.partition(":")
                try:
                    j, v = int(idx), float(val)
                except ValueError:
                    raise ParseError(f"bad feature {tok!r}", lineno) from None
                if not sep or j < 1:
                    raise ParseError(f"bad feature {tok!r}", lineno)
                if n_features is not None and j > n_features:
                    raise DimensionMismatch(
                        f"line {lineno}: index {j} exceeds {n_features} features"
                    )
                entries.append((j - 1, v))
                width = max(width, j)
            labels.append(1.0 if label > 0 else -1.0)
            rows.append(entries)
    if not rows:
        raise ParseError(f"no samples in {path}")
    width = n_features if n_features is not None else width
    x = np.zeros((len(rows), width))
    for i, entries in enumerate(rows):
        for j, v in entries:
            x[i, j] = v
    return AgentDataset(x, np.array(labels))


def partition_non_iid(
    pool: AgentDataset,
    num_agents: int,
    size_range: Optional[Tuple[int, int]] = None,
    rng=None,
    ridge: float = 0.0,
    kind: Kind = "logistic",
    test_set: Optional[AgentDataset] = None,
) -> ProblemInstance:
    """Split a pool into label-skewed contiguous shards.

    The pool is ordered by label and then by its projection on a random
    direction; consecutive slices of random sizes within ``size_range``
    become the agents.  When the pool fits, the sizes are adjusted so the
    whole pool is used.
    """
    rng = as_generator(rng)
    n = len(pool)
    lo, hi = size_range if size_range is not None else (1, n)
    if lo < 1 or hi < lo:
        raise ValueError(f"invalid size range {size_range}")
    if num_agents * lo > n:
        raise PoolTooSmall(f"{num_agents} agents x {lo} samples > pool of {n}")
    sizes = _shard_sizes(n, num_agents, lo, hi, rng)
    direction = rng.standard_normal(pool.dim)
    order = np.lexsort((pool.features @ direction, pool.targets))
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    shards = [order[bounds[i] : bounds[i + 1]] for i in range(num_agents)]
    agents = [
        AgentDataset(pool.features[s], pool.targets[s], agent_id=k)
        for k, s in enumerate(shards[i] for i in rng.permutation(num_agents))
    ]
    return ProblemInstance(agents, ridge=ridge, kind=kind, test_set=test_set)


def _shard_sizes(n, num_agents, lo, hi, rng) -> npt.NDArray[np.int64]:
    sizes = rng.integers(lo, hi + 1, size=num_agents)
    if num_agents * hi < n:
        return sizes
    # rescale towards a total of n, then settle the rounding one unit at a time
    sizes = np.clip(np.round(sizes * (n / sizes.sum())), lo, hi).astype(np.int64)
    while sizes.sum() != n:
        step = 1 if sizes.sum() < n else -1
        room = np.flatnonzero((sizes < hi) if step > 0 else (sizes > lo))
        take = rng.choice(room, size=min(len(room), abs(n - sizes.sum())), replace=False)
        sizes[take] += step
    return sizes
