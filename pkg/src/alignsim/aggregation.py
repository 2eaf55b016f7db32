"""Consensus over halted sites' answers.

Answers are embedded with a hashed bag-of-tokens encoder and grouped by a
density-based clustering on cosine distance. A cluster holding a strict
supermajority of the events supplies the answer of its most confident
member; otherwise every reasoning chain is packed into a reviewer prompt.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .errors import DomainError, SynthesisUnavailableError

_TOKEN = re.compile(r"[a-z0-9]+")


def load_prompt_template():
    return resources.files("alignsim").joinpath("assets/synthesis_prompt.txt").read_text()


class HashedBagEncoder:
    """Signed feature hashing of lowercase alphanumeric tokens."""

    def __init__(self, dim=256, seed=0):
        self.dim = dim
        self.seed = seed
        self._key = int(seed).to_bytes(8, "little", signed=False)

    def tokens(self, text):
        return _TOKEN.findall(text.lower())

    def _slot(self, token):
        digest = hashlib.blake2b(token.encode(), digest_size=8, key=self._key).digest()
        v = int.from_bytes(digest, "little")
        return v % self.dim, 1.0 if (v >> 63) & 1 else -1.0

    def __call__(self, text):
        vec = np.zeros(self.dim)
        for tok in self.tokens(text):
            i, sign = self._slot(tok)
            vec[i] += sign
        norm = np.linalg.norm(vec)
        if norm == 0:
            raise DomainError(f"text {text!r} has no encodable tokens")
        return vec / norm


@dataclass(frozen=True)
class AnswerEmbedding:
    answer_text: str
    vector: np.ndarray
    source_site: int
    confidence: float = 0.0


def embed_answer(encoder, answer_text, source_site=0, confidence=0.0):
    if not answer_text or not answer_text.strip():
        raise DomainError("answer text is empty")
    return AnswerEmbedding(answer_text, encoder(answer_text), source_site, confidence)


def cluster_answers(embeddings, radius=0.2, min_points=2):
    """Density-based clusters of site ids under cosine distance.

    Core points have at least ``min_points`` neighbours (self included)
    within ``radius``; connected cores form a cluster; a border point joins
    the cluster of its nearest core neighbour (ties by site id). Points
    outside every cluster come back as singletons. Clusters are identified
    by site id, so the result does not depend on input order.
    """
    if not radius > 0:
        raise DomainError("radius must be > 0")
    if not embeddings:
        raise DomainError("nothing to cluster")
    embs = sorted(embeddings, key=lambda e: e.source_site)
    sites = [e.source_site for e in embs]
    if len(set(sites)) != len(sites):
        raise DomainError("duplicate source_site among embeddings")
    vecs = np.array([e.vector for e in embs])
    dist = 1.0 - vecs @ vecs.T
    n = len(embs)
    near = dist <= radius
    core = near.sum(axis=1) >= min_points

    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if core[i] and core[j] and near[i, j]:
                parent[max(find(i), find(j))] = min(find(i), find(j))

    label = {}
    for i in range(n):
        if core[i]:
            label[i] = find(i)
    for i in range(n):
        if core[i]:
            continue
        cores = [j for j in range(n) if core[j] and near[i, j]]
        label[i] = find(min(cores, key=lambda j: (dist[i, j], sites[j]))) if cores else ("noise", i)

    groups = {}
    for i in range(n):
        groups.setdefault(label[i], []).append(sites[i])
    return sorted((sorted(g) for g in groups.values()), key=lambda g: g[0])


@dataclass(frozen=True)
class ConsensusOutcome:
    mode: str
    final_answer: str
    winning_cluster: tuple | None
    clusters: tuple
    prompt: str | None = None
    selected_site: int | None = None

    def to_dict(self):
        d = {"mode": self.mode, "final_answer": self.final_answer,
             "winning_cluster": list(self.winning_cluster) if self.winning_cluster is not None else None,
             "clusters": [list(c) for c in self.clusters]}
        if self.prompt is not None:
            d["prompt"] = self.prompt
        return d


def path_block(index, event):
    return (f"<<<path {index} | site {event.site_id}>>>\n{event.chain_text}\n"
            f"proposed answer: {event.answer}\n<<<end path {index}>>>")


def synthesis_prompt(events, question_text, template=None):
    template = load_prompt_template() if template is None else template
    head = template.replace("{Q}", question_text).rstrip("\n")
    blocks = [path_block(i + 1, e) for i, e in enumerate(events)]
    return head + "\n\n" + "\n\n".join(blocks) + "\n"


def _best(events):
    return min(events, key=lambda e: (-e.confidence, e.site_id))


def resolve(clusters, events, supermajority_fraction=2 / 3, question_text="", template=None):
    """Supermajority adoption, or a synthesis prompt when no cluster wins.

    Forced events can only supply the answer when every event is forced.
    """
    if not events:
        raise DomainError("no halt events to resolve")
    events = sorted(events, key=lambda e: (e.step, e.site_id))
    by_site = {e.site_id: e for e in events}
    n = len(events)
    clusters = tuple(tuple(c) for c in clusters)
    winners = [c for c in clusters if len(c) > supermajority_fraction * n]
    all_forced = all(e.forced for e in events)
    if winners:
        win = min(winners, key=lambda c: (-len(c), c[0]))
        members = [by_site[s] for s in win]
        eligible = members if all_forced else [e for e in members if not e.forced]
        if eligible:
            best = _best(eligible)
            return ConsensusOutcome("supermajority", best.answer, win, clusters, None, best.site_id)
    prompt = synthesis_prompt(events, question_text, template)
    return ConsensusOutcome("synthesis", prompt, None, clusters, prompt, None)


class HighestConfidenceStub:
    """Stand-in reviewer: returns the most confident chain's answer."""

    is_stub = True

    def __init__(self, events):
        self.events = list(events)

    def __call__(self, prompt):
        return _best(self.events).answer


@dataclass(frozen=True)
class SynthesisResult:
    answer: str
    stub: bool


def synthesize(reviewer, prompt):
    """Invoke the reviewer exactly once on ``prompt``."""
    try:
        answer = reviewer(prompt)
    except Exception as exc:
        raise SynthesisUnavailableError(f"reviewer failed: {exc}") from exc
    if not isinstance(answer, str) or not answer.strip():
        raise SynthesisUnavailableError("reviewer returned no answer")
    return SynthesisResult(answer, bool(getattr(reviewer, "is_stub", False)))


@dataclass
class AggregationConfig:
    radius: float = 0.2
    min_points: int = 2
    supermajority_fraction: float = 2 / 3
    encoder_dim: int = 256
    encoder_seed: int = 0


def aggregate(events, question_text, config=None, encoder=None, reviewer=None):
    """Embed, cluster, resolve and (if needed) synthesize.

    Returns ``(outcome, final_answer, stub_flag)``.
    """
    config = config or AggregationConfig()
    encoder = encoder or HashedBagEncoder(config.encoder_dim, config.encoder_seed)
    embs = [embed_answer(encoder, e.answer, e.site_id, e.confidence) for e in events]
    clusters = cluster_answers(embs, config.radius, config.min_points)
    outcome = resolve(clusters, events, config.supermajority_fraction, question_text)
    if outcome.mode == "supermajority":
        return outcome, outcome.final_answer, False
    result = synthesize(reviewer or HighestConfidenceStub(events), outcome.prompt)
    return outcome, result.answer, result.stub
