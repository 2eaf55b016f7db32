"""Expert dependency graph and the two-stage confidence estimator.

The estimator scores a hidden state with a one-hidden-layer tanh MLP
followed by a sigmoid, then adjusts that score by the Jensen-Shannon
divergence between the expert's output distribution at the state and at
the state pulled toward the mean representation of its most influential
parent expert.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats as sps
from scipy.special import expit

from . import kernels
from .errors import ConfigurationError, DomainError, ShapeError
from .policy import as_vector

LN2 = math.log(2.0)


# ---------------------------------------------------------------- influence graph


def influence_score(acc_with, acc_base):
    for a in (acc_with, acc_base):
        if not 0.0 <= a <= 1.0:
            raise DomainError(f"accuracy {a} outside [0, 1]")
    return acc_with - acc_base


@dataclass(frozen=True)
class Edge:
    src: int
    dst: int
    mean_gain: float
    gains: tuple
    significant: bool = True

    def to_dict(self):
        return {"from": self.src, "to": self.dst, "mean_gain": self.mean_gain,
                "gains": list(self.gains), "significant": self.significant}


@dataclass
class DependencyGraph:
    nodes: list
    edges: list = field(default_factory=list)

    def parents(self, node):
        return {e.src: e.mean_gain for e in self.edges if e.dst == node}

    def adjacency(self):
        adj = {n: [] for n in self.nodes}
        for e in self.edges:
            adj[e.src].append(e.dst)
        return {n: sorted(v) for n, v in adj.items()}

    def to_dict(self):
        return {"nodes": list(self.nodes), "edges": [e.to_dict() for e in self.edges]}

    @classmethod
    def from_dict(cls, data):
        edges = [Edge(e["from"], e["to"], e["mean_gain"], tuple(e["gains"]), e["significant"])
                 for e in data["edges"]]
        return cls(list(data["nodes"]), edges)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def gain_is_significant(gains, level=0.05):
    """One-sided one-sample t-test of ``mean(gains) > 0``.

    Zero-variance samples are decided by the sign of the mean.
    """
    gains = np.asarray(gains, dtype=np.float64)
    if np.ptp(gains) == 0.0:
        return bool(gains[0] > 0)
    p = sps.ttest_1samp(gains, 0.0, alternative="greater").pvalue
    return bool(p < level)


def find_cycle(nodes, edges):
    """Edges of some directed cycle, or ``None`` when the graph is acyclic."""
    out = {n: [] for n in nodes}
    for e in sorted(edges, key=lambda e: (e.src, e.dst)):
        out[e.src].append(e)
    color = dict.fromkeys(nodes, 0)  # 0 unvisited, 1 on the DFS path, 2 finished
    for root in sorted(nodes):
        if color[root]:
            continue
        color[root] = 1
        path = []
        stack = [iter(out[root])]
        while stack:
            e = next(stack[-1], None)
            if e is None:
                stack.pop()
                color[path.pop().dst if path else root] = 2
                continue
            if color[e.dst] == 1:
                return _close_cycle(path, e)
            if color[e.dst] == 0:
                color[e.dst] = 1
                path.append(e)
                stack.append(iter(out[e.dst]))
    return None


def _close_cycle(path, back_edge):
    for i, pe in enumerate(path):
        if pe.src == back_edge.dst:
            return path[i:] + [back_edge]
    return [back_edge]


def build_dependency_graph(restart_accuracies, nodes, edge_threshold=0.02,
                           significance_level=0.05, test_significance=True):
    """Influence DAG from per-restart ``(acc_with, acc_base)`` pairs.

    ``restart_accuracies`` maps ``(i, j)`` to a list of pairs over R
    restarts. An edge survives when its gains pass the one-sided t-test and
    their mean exceeds ``edge_threshold``. Cycles are then broken by
    repeatedly deleting the lowest-gain edge of a detected cycle.
    """
    nodes = sorted(int(n) for n in nodes)
    node_set = set(nodes)
    edges = []
    for (i, j), pairs in sorted(restart_accuracies.items()):
        if i == j:
            continue
        if i not in node_set or j not in node_set:
            raise DomainError(f"edge ({i}, {j}) references an unknown expert")
        gains = tuple(influence_score(a, b) for a, b in pairs)
        if test_significance and len(gains) < 2:
            raise ConfigurationError("significance testing needs at least 2 restarts")
        mean = math.fsum(gains) / len(gains)
        if mean <= edge_threshold:
            continue
        if test_significance and not gain_is_significant(gains, significance_level):
            continue
        edges.append(Edge(int(i), int(j), mean, gains, True))
    while True:
        cyc = find_cycle(nodes, edges)
        if cyc is None:
            break
        weakest = min(cyc, key=lambda e: (e.mean_gain, e.src, e.dst))
        edges.remove(weakest)
    return DependencyGraph(nodes, edges)


def most_influential_parent(graph, d_star):
    if d_star not in graph.nodes:
        raise DomainError(f"unknown expert {d_star}")
    parents = graph.parents(d_star)
    if not parents:
        return None
    return min(parents, key=lambda i: (-parents[i], i))


# ---------------------------------------------------------------- estimator


@dataclass(frozen=True)
class HiddenState:
    values: np.ndarray
    step: int = 1
    site_id: int = 0
    expert_id: int = 0


def _values(h):
    return h.values if isinstance(h, HiddenState) else h


@dataclass
class ConfidenceEstimator:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: float = 0.0
    alpha: float = 1.0
    epsilon_interp: float = 0.1
    s_norm: float = LN2
    u_low: float = 0.1
    u_high: float = 0.9

    def __post_init__(self):
        self.w1 = np.ascontiguousarray(self.w1, dtype=np.float64)
        self.b1 = np.ascontiguousarray(self.b1, dtype=np.float64)
        self.w2 = np.ascontiguousarray(self.w2, dtype=np.float64)
        self.b2 = float(self.b2)
        if self.w1.ndim != 2 or self.b1.shape != (self.w1.shape[0],) or self.w2.shape != (self.w1.shape[0],):
            raise ShapeError("inconsistent MLP parameter shapes")
        if not 0 <= self.u_low < self.u_high <= 1:
            raise ConfigurationError("need 0 <= u_low < u_high <= 1")
        if not 0 <= self.epsilon_interp <= 1:
            raise ConfigurationError("epsilon_interp must lie in [0, 1]")
        if not self.s_norm > 0:
            raise ConfigurationError("s_norm must be > 0")

    @classmethod
    def init(cls, input_dim, hidden_dim=16, seed=0, **hyper):
        rng = np.random.default_rng(seed)
        w1 = rng.normal(scale=1.0 / math.sqrt(input_dim), size=(hidden_dim, input_dim))
        w2 = rng.normal(scale=1.0 / math.sqrt(hidden_dim), size=hidden_dim)
        return cls(w1, np.zeros(hidden_dim), w2, 0.0, **hyper)

    @property
    def input_dim(self):
        return self.w1.shape[1]

    @property
    def hidden_dim(self):
        return self.w1.shape[0]

    def _check(self, h):
        h = np.ascontiguousarray(_values(h), dtype=np.float64)
        if h.shape != (self.input_dim,):
            raise ShapeError(f"hidden state of shape {h.shape}, estimator expects ({self.input_dim},)")
        return h

    def base_logit(self, h):
        return kernels.mlp_logit(self._check(h), self.w1, self.b1, self.w2, self.b2)

    def base_confidence(self, h):
        return float(expit(self.base_logit(h)))

    # parameters flattened as W1 (row-major), b1, w2, b2
    def get_params(self):
        return np.concatenate([self.w1.ravel(), self.b1, self.w2, [self.b2]])

    def with_params(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        hd, d = self.w1.shape
        n1 = hd * d
        return ConfidenceEstimator(
            theta[:n1].reshape(hd, d), theta[n1 : n1 + hd], theta[n1 + hd : n1 + 2 * hd],
            theta[-1], self.alpha, self.epsilon_interp, self.s_norm, self.u_low, self.u_high,
        )

    def grad_base_confidence(self, h):
        """Gradient of the sigmoid output w.r.t. the flattened parameters."""
        h = self._check(h)
        a = np.tanh(self.w1 @ h + self.b1)
        g = float(expit(self.w2 @ a + self.b2))
        dz = g * (1.0 - g)
        dpre = dz * self.w2 * (1.0 - a * a)
        return np.concatenate([np.outer(dpre, h).ravel(), dpre, dz * a, [dz]])

    def to_dict(self):
        return {
            "mlp": {
                "input_dim": self.input_dim, "hidden_dim": self.hidden_dim, "activation": "tanh",
                "weights_1": self.w1.tolist(), "bias_1": self.b1.tolist(),
                "weights_2": self.w2.tolist(), "bias_2": self.b2,
            },
            "alpha": self.alpha, "epsilon_interp": self.epsilon_interp, "s_norm": self.s_norm,
            "u_low": self.u_low, "u_high": self.u_high,
        }

    @classmethod
    def from_dict(cls, data):
        m = data["mlp"]
        return cls(np.array(m["weights_1"]), np.array(m["bias_1"]), np.array(m["weights_2"]),
                   m["bias_2"], data["alpha"], data["epsilon_interp"], data["s_norm"],
                   data["u_low"], data["u_high"])

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def base_confidence(estimator, h):
    return estimator.base_confidence(h)


def perturb(h, mu_k, epsilon_interp):
    """Interpolate a hidden state toward a parent mean."""
    if not 0.0 <= epsilon_interp <= 1.0:
        raise DomainError("epsilon_interp must lie in [0, 1]")
    v = as_vector(_values(h), name="hidden state")
    mu = as_vector(mu_k, len(v), name="parent mean")
    out = (1.0 - epsilon_interp) * v + epsilon_interp * mu
    if isinstance(h, HiddenState):
        return HiddenState(out, h.step, h.site_id, h.expert_id)
    return out


def _as_distribution(p, name):
    p = np.ascontiguousarray(p, dtype=np.float64)
    if p.ndim != 1 or np.any(p < 0) or not np.all(np.isfinite(p)) or abs(p.sum() - 1.0) > 1e-9:
        raise DomainError(f"{name} is not a probability vector")
    return p


def js_divergence(p, q):
    """Jensen-Shannon divergence in nats; lies in ``[0, ln 2]``."""
    p = _as_distribution(p, "p")
    q = _as_distribution(q, "q")
    if p.shape != q.shape:
        raise ShapeError("distributions have different lengths")
    return kernels.js_divergence(p, q)


def stability_adjustment(expert_predict, h, h_perturbed, s_norm=LN2):
    """Negative JS divergence between the two output distributions, divided by ``s_norm``."""
    if not s_norm > 0:
        raise DomainError("s_norm must be > 0")
    return -js_divergence(expert_predict(_values(h)), expert_predict(_values(h_perturbed))) / s_norm


def confidence(u_base, delta, alpha=1.0):
    return float(expit(u_base + alpha * delta))


def target_uncertainty(predicted_dist, true_label, u_low=0.1, u_high=0.9):
    return u_low if int(np.argmax(predicted_dist)) == int(true_label) else u_high


def uncertainty_reg_loss(estimator, h, predicted_dist, true_label, u_low=None, u_high=None):
    u_low = estimator.u_low if u_low is None else u_low
    u_high = estimator.u_high if u_high is None else u_high
    u_star = target_uncertainty(predicted_dist, true_label, u_low, u_high)
    return ((1.0 - estimator.base_confidence(h)) - u_star) ** 2


def uncertainty_reg_loss_grad(estimator, h, predicted_dist, true_label, u_low=None, u_high=None):
    """Loss and its gradient w.r.t. the flattened estimator parameters."""
    u_low = estimator.u_low if u_low is None else u_low
    u_high = estimator.u_high if u_high is None else u_high
    u_star = target_uncertainty(predicted_dist, true_label, u_low, u_high)
    resid = (1.0 - estimator.base_confidence(h)) - u_star
    return resid * resid, -2.0 * resid * estimator.grad_base_confidence(h)


@dataclass(frozen=True)
class LabeledState:
    h: np.ndarray
    predicted_dist: np.ndarray
    true_label: int
    expert_id: int = 0


@dataclass
class EstimatorTrainResult:
    estimator: ConfidenceEstimator
    trace: list
    single_class: bool = False


def _corpus_arrays(corpus, estimator):
    hs = np.array([_values(ex.h) for ex in corpus], dtype=np.float64)
    targets = np.array([target_uncertainty(ex.predicted_dist, ex.true_label, estimator.u_low, estimator.u_high)
                        for ex in corpus])
    return hs, targets


def batch_loss_grad(estimator, hs, targets):
    """Mean uncertainty-regression loss over stacked states, with gradient."""
    a = np.tanh(hs @ estimator.w1.T + estimator.b1)
    g = expit(a @ estimator.w2 + estimator.b2)
    resid = (1.0 - g) - targets
    n = hs.shape[0]
    dz = (-2.0 * resid / n) * g * (1.0 - g)
    dpre = np.outer(dz, estimator.w2) * (1.0 - a * a)
    grad = np.concatenate([(dpre.T @ hs).ravel(), dpre.sum(axis=0), a.T @ dz, [dz.sum()]])
    return float(np.mean(resid * resid)), grad


def train_estimator(corpus, estimator, learning_rate=1.0, steps=200):
    """Full-batch gradient descent on the mean uncertainty-regression loss.

    The trace holds the mean loss before each update.
    """
    if not corpus:
        raise DomainError("training corpus is empty")
    correct = {int(np.argmax(ex.predicted_dist)) == int(ex.true_label) for ex in corpus}
    single_class = len(correct) < 2
    if single_class:
        warnings.warn("estimator corpus contains a single correctness class", stacklevel=2)
    hs, targets = _corpus_arrays(corpus, estimator)
    theta = estimator.get_params()
    trace = []
    for _ in range(steps):
        loss, grad = batch_loss_grad(estimator.with_params(theta), hs, targets)
        trace.append(loss)
        theta = theta - learning_rate * grad
    return EstimatorTrainResult(estimator.with_params(theta), trace, single_class)


# ---------------------------------------------------------------- parent means


def compute_parent_means(states_by_expert):
    """Mean hidden state per expert, from ``{expert_id: [h, ...]}``."""
    means = {}
    for k, states in states_by_expert.items():
        arr = np.array([_values(h) for h in states], dtype=np.float64)
        if arr.size == 0:
            raise DomainError(f"no hidden states for expert {k}")
        means[int(k)] = arr.mean(axis=0)
    return means


def save_parent_means(path, means):
    Path(path).write_text(json.dumps({str(k): [float(x) for x in v] for k, v in sorted(means.items())},
                                     indent=2) + "\n")


def load_parent_means(path):
    return {int(k): np.array(v, dtype=np.float64) for k, v in json.loads(Path(path).read_text()).items()}
