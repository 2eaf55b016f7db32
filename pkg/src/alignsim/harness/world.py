"""Synthetic domain worlds: prototypes, knowledge-base documents, queries
with ground truth, and preference data for policy training."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import GenerationError
from ..knowledge import Doc, DomainKB, ProjectionEncoder, embed_query
from ..mdpo import CrossModalPair, PreferenceTuple

ANSWER_WORDS = (
    "effusion", "pneumothorax", "cardiomegaly", "edema", "consolidation",
    "atelectasis", "nodule", "fracture", "emphysema", "fibrosis",
)

MAX_RESAMPLES = 200


@dataclass(frozen=True)
class WorldQuery:
    query_id: str
    image: np.ndarray
    question: np.ndarray
    domain: int
    answer: int
    question_text: str

    def to_dict(self):
        return {"query_id": self.query_id, "image": self.image.tolist(), "question": self.question.tolist(),
                "domain": self.domain, "answer": self.answer, "question_text": self.question_text}

    @classmethod
    def from_dict(cls, d):
        return cls(d["query_id"], np.array(d["image"]), np.array(d["question"]), d["domain"],
                   d["answer"], d["question_text"])


@dataclass
class SyntheticWorld:
    seed: int
    params: dict
    prototypes: np.ndarray
    docs: list
    heldout: list
    live: list
    answer_labels: list
    affinity: np.ndarray
    expert_params: dict = field(default_factory=dict)

    @property
    def n_domains(self):
        return self.prototypes.shape[0]

    @property
    def separation_margin(self):
        return self.params["separation_margin"]

    def encoder(self, encoder_seed=7):
        p = self.params
        return ProjectionEncoder(p["image_dim"], p["question_dim"], p["embed_dim"], encoder_seed)

    def to_dict(self):
        return {
            "seed": self.seed, "params": self.params, "prototypes": self.prototypes.tolist(),
            "docs": [[{"doc_id": d.doc_id, "text": d.text, "vector": d.vector.tolist()} for d in dom]
                     for dom in self.docs],
            "heldout": [q.to_dict() for q in self.heldout], "live": [q.to_dict() for q in self.live],
            "answer_labels": list(self.answer_labels), "affinity": self.affinity.tolist(),
            "expert_params": self.expert_params,
        }

    @classmethod
    def from_dict(cls, d):
        docs = [[Doc(x["doc_id"], np.array(x["vector"]), x["text"]) for x in dom] for dom in d["docs"]]
        return cls(d["seed"], d["params"], np.array(d["prototypes"]), docs,
                   [WorldQuery.from_dict(q) for q in d["heldout"]], [WorldQuery.from_dict(q) for q in d["live"]],
                   d["answer_labels"], np.array(d["affinity"]), d.get("expert_params", {}))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def _unit(v):
    return v / np.linalg.norm(v)


def prototype_margin(embedding, proto_embeddings, domain):
    """Own-prototype cosine minus the best other-prototype cosine."""
    sims = proto_embeddings @ embedding
    others = np.delete(sims, domain)
    return float(sims[domain] - others.max())


def generate_world(world_cfg, expert_cfg=None, seed=0, encoder_seed=7):
    """Deterministic world from ``seed``.

    Domain prototypes are orthonormal in the joint (image, question) space,
    so a margin below 1 is always attainable. Every query is resampled
    until its embedding clears ``separation_margin`` against all other
    prototypes.
    """
    w = dict(world_cfg)
    D, di, dq = w["n_domains"], w["image_dim"], w["question_dim"]
    joint = di + dq
    margin = w["separation_margin"]
    if D < 2:
        raise GenerationError("a world needs at least two domains")
    if D > joint:
        raise GenerationError(f"{D} orthogonal prototypes do not fit in {joint} dimensions")
    if not 0 <= margin < 1:
        raise GenerationError(f"separation margin {margin} is infeasible (needs 0 <= margin < 1)")
    if w["n_answers"] > len(ANSWER_WORDS) or w["n_answers"] < 2:
        raise GenerationError(f"n_answers must lie in [2, {len(ANSWER_WORDS)}]")
    if w["embed_dim"] < joint:
        raise GenerationError("embed_dim must be >= image_dim + question_dim")

    rng = np.random.default_rng([seed, 0])
    q, r = np.linalg.qr(rng.standard_normal((joint, D)))
    prototypes = (q * np.sign(np.diag(r))).T
    enc = ProjectionEncoder(di, dq, w["embed_dim"], encoder_seed)
    proto_emb = np.array([enc.encode_joint(p) for p in prototypes])

    docs = [[] for _ in range(D)]
    doc_rng = np.random.default_rng([seed, 1])
    for d in range(D):
        for i in range(w["docs_per_domain"]):
            raw = prototypes[d] + w["doc_noise"] * doc_rng.standard_normal(joint) / np.sqrt(joint)
            doc = Doc(f"d{d}_{i:04d}", enc.encode_joint(raw), f"domain {d} reference note {i}")
            docs[d].append(doc)
            if doc_rng.random() < w["cross_domain_fraction"]:
                other = int(doc_rng.choice([x for x in range(D) if x != d]))
                docs[other].append(doc)

    query_rng = np.random.default_rng([seed, 2])

    def make_query(qid):
        d = int(query_rng.integers(D))
        for _ in range(MAX_RESAMPLES):
            raw = prototypes[d] + w["query_noise"] * query_rng.standard_normal(joint) / np.sqrt(joint)
            if prototype_margin(enc.encode_joint(raw), proto_emb, d) >= margin:
                break
        else:
            raise GenerationError(f"query {qid}: margin {margin} not reached in {MAX_RESAMPLES} draws")
        answer = int(query_rng.integers(w["n_answers"]))
        return WorldQuery(qid, raw[:di].copy(), raw[di:].copy(), d, answer,
                          f"Which finding best explains case {qid}?")

    heldout = [make_query(f"h{i:04d}") for i in range(w["n_heldout"])]
    live = [make_query(f"q{i:04d}") for i in range(w["n_live"])]

    e = dict(expert_cfg or {})
    aff_rng = np.random.default_rng([seed, 3])
    affinity = np.zeros((D, D))
    density, amax = e.get("affinity_density", 0.35), e.get("affinity_max", 0.3)
    for i in range(D):
        for j in range(D):
            if i != j and aff_rng.random() < density:
                affinity[i, j] = aff_rng.uniform(0.5 * amax, amax)

    world = SyntheticWorld(seed, w, prototypes, docs, heldout, live,
                           list(ANSWER_WORDS[: w["n_answers"]]), affinity, e)
    verify_world(world, encoder_seed)
    return world


def verify_world(world, encoder_seed=7):
    """Exhaustive margin check over every query; raises on violation."""
    enc = world.encoder(encoder_seed)
    proto_emb = np.array([enc.encode_joint(p) for p in world.prototypes])
    for q in world.heldout + world.live:
        m = prototype_margin(enc(q.image, q.question), proto_emb, q.domain)
        if m < world.separation_margin:
            raise GenerationError(f"query {q.query_id} violates the separation margin ({m:.4f})")


def build_kbs(world):
    return [DomainKB(d, world.docs[d], world.params["embed_dim"]) for d in range(world.n_domains)]


def embed_queries(world, queries, encoder_seed=7):
    enc = world.encoder(encoder_seed)
    return [embed_query(enc, q.image, q.question, q.query_id) for q in queries]


def generate_preference_data(world, n_pref, n_cm, n_cal, seed=0):
    """Preference, cross-modal and calibration sets labelled by a hidden
    linear teacher that reads both the image and the question."""
    di, dq = world.params["image_dim"], world.params["question_dim"]
    labels = world.answer_labels
    n = len(labels)
    rng = np.random.default_rng([seed, 10])
    teach_img = rng.standard_normal((n, di))
    teach_txt = rng.standard_normal((n, dq))

    def best(img, txt):
        return int(np.argmax(teach_img @ img + teach_txt @ txt))

    def pref(i, prefix):
        img, txt = rng.standard_normal(di), rng.standard_normal(dq)
        w = best(img, txt)
        l = int(rng.choice([c for c in range(n) if c != w]))
        return PreferenceTuple(img, txt, labels[w], labels[l], f"{prefix}{i:04d}")

    prefs = [pref(i, "p") for i in range(n_pref)]
    cal = [pref(i, "c") for i in range(n_cal)]
    cms = []
    for _ in range(n_cm):
        txt, pos = rng.standard_normal(dq), rng.standard_normal(di)
        a = best(pos, txt)
        neg = rng.standard_normal(di)
        while best(neg, txt) == a:
            neg = rng.standard_normal(di)
        cms.append(CrossModalPair(txt, labels[a], pos, neg))
    return prefs, cms, cal
