"""Zero-shot expert gating from retrieval scores.

Three stages: mean-aggregate each domain's top-k similarities, z-score them
against statistics fixed on a held-out set, then take a temperature
softmax. Expert selection activates the argmax domain, plus runners-up
when the distribution's normalized entropy is high.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError
from .knowledge import retrieve_all

DEFAULT_EPSILON = 1e-8
DEFAULT_TEMPERATURE = 1.0
DEFAULT_ENTROPY_THRESHOLD = 0.8
DEFAULT_MAX_ACTIVE = 2


@dataclass(frozen=True)
class DomainStats:
    domain_id: int
    mu: float
    sigma: float
    epsilon: float = DEFAULT_EPSILON
    sample_size: int = 0
    provenance: str = "heldout"

    def __post_init__(self):
        if self.sigma < 0:
            raise DomainError("sigma must be >= 0")
        if not self.epsilon > 0:
            raise DomainError("epsilon must be > 0")


@dataclass(frozen=True)
class RoutingDistribution:
    probs: tuple
    temperature: float
    raw_scores: tuple = ()
    normalized_scores: tuple = ()


@dataclass(frozen=True)
class ExpertSelection:
    active_experts: tuple
    entropy: float
    multi_activated: bool

    @property
    def primary(self):
        return self.active_experts[0]


def aggregate_scores(result):
    """Arithmetic mean of a retrieval result's similarities."""
    sims = result.similarities
    if not sims:
        raise DomainError(f"no hits for domain {result.domain_id}")
    return math.fsum(sims) / len(sims)


def calibrate_stats(heldout_queries, kbs, k=5, epsilon=DEFAULT_EPSILON):
    """Per-domain mean and population std of aggregated scores."""
    if not heldout_queries:
        raise DomainError("held-out query set is empty")
    scores = np.array([[aggregate_scores(r) for r in retrieve_all(kbs, q, k)] for q in heldout_queries])
    ids = sorted(str(getattr(q, "query_id", "")) for q in heldout_queries)
    provenance = "heldout:" + ",".join(ids) if any(ids) else "heldout"
    stats = []
    for col, kb in enumerate(kbs):
        s = scores[:, col]
        mu = math.fsum(s) / len(s)
        var = math.fsum((x - mu) ** 2 for x in s) / len(s)
        stats.append(DomainStats(kb.domain_id, mu, math.sqrt(var), epsilon, len(s), provenance))
    return stats


def heldout_ids(stats):
    """Query ids the statistics were estimated from (empty if unrecorded)."""
    ids = set()
    for st in stats:
        _, _, rest = st.provenance.partition(":")
        ids.update(x for x in rest.split(",") if x)
    return ids


def normalize_score(s, stats):
    return (s - stats.mu) / (stats.sigma + stats.epsilon)


def gate(normalized_scores, temperature=DEFAULT_TEMPERATURE, raw_scores=()):
    """Temperature softmax, max-shifted for stability."""
    if not temperature > 0:
        raise DomainError("temperature must be > 0")
    z = np.asarray(normalized_scores, dtype=np.float64) / temperature
    if z.size == 0:
        raise DomainError("at least one domain is required")
    with np.errstate(over="ignore"):
        e = np.exp(z - np.max(z))
    probs = e / np.sum(e)
    return RoutingDistribution(tuple(float(p) for p in probs), float(temperature),
                               tuple(float(x) for x in raw_scores),
                               tuple(float(x) for x in normalized_scores))


def normalized_entropy(probs):
    d = len(probs)
    if d <= 1:
        return 0.0
    h = -math.fsum(p * math.log(p) for p in probs if p > 0)
    return h / math.log(d)


def select_experts(dist, entropy_threshold=DEFAULT_ENTROPY_THRESHOLD, max_active=DEFAULT_MAX_ACTIVE):
    if max_active < 1:
        raise DomainError("max_active must be >= 1")
    probs = dist.probs
    order = sorted(range(len(probs)), key=lambda d: (-probs[d], d))
    h = normalized_entropy(probs)
    multi = len(probs) > 1 and max_active > 1 and h > entropy_threshold
    active = order[:max_active] if multi else order[:1]
    return ExpertSelection(tuple(active), h, multi)


def route(query, kbs, stats, k=5, temperature=DEFAULT_TEMPERATURE,
          entropy_threshold=DEFAULT_ENTROPY_THRESHOLD, max_active=DEFAULT_MAX_ACTIVE):
    """End-to-end routing; returns ``(distribution, selection, retrieval results)``."""
    by_domain = {st.domain_id: st for st in stats}
    results = retrieve_all(kbs, query, k)
    raw = [aggregate_scores(r) for r in results]
    norm = [normalize_score(s, by_domain[r.domain_id]) for s, r in zip(raw, results)]
    dist = gate(norm, temperature, raw)
    return dist, select_experts(dist, entropy_threshold, max_active), results


def routing_record(query_id, dist, selection, domain_ids=None):
    rec = {
        "query_id": query_id,
        "raw_scores": list(dist.raw_scores),
        "normalized_scores": list(dist.normalized_scores),
        "probs": list(dist.probs),
        "active_experts": [int(d) for d in selection.active_experts],
        "entropy": selection.entropy,
    }
    if domain_ids is not None:
        rec["active_experts"] = [int(domain_ids[d]) for d in selection.active_experts]
    return rec


def save_stats(path, stats):
    Path(path).write_text(json.dumps([asdict(s) for s in stats], indent=2) + "\n")


def load_stats(path):
    return [DomainStats(**s) for s in json.loads(Path(path).read_text())]
