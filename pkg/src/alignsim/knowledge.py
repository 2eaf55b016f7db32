"""Per-domain vector stores, the query-encoder contract and exact top-k
cosine retrieval."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .errors import DomainError, EmptyResultError, ShapeError
from .policy import as_vector

DEFAULT_K = 5


@dataclass(frozen=True)
class Doc:
    doc_id: str
    vector: np.ndarray
    text: str = ""


class DomainKB:
    """Immutable store of documents for one domain.

    Vectors are unit-normalized once at construction so retrieval reduces
    to dot products. ``doc_id`` ranks are precomputed for the tie-break.
    """

    def __init__(self, domain_id, docs, dim=None):
        self.domain_id = int(domain_id)
        docs = [d if isinstance(d, Doc) else Doc(str(d["doc_id"]), d["vector"], d.get("text", ""))
                for d in docs]
        if dim is None:
            if not docs:
                raise DomainError("dim is required for an empty knowledge base")
            dim = len(docs[0].vector)
        self.dim = int(dim)
        ids = [d.doc_id for d in docs]
        if len(set(ids)) != len(ids):
            raise DomainError(f"duplicate doc_id in domain {self.domain_id}")
        unit = np.empty((len(docs), self.dim))
        for i, d in enumerate(docs):
            v = as_vector(d.vector, self.dim, name=f"vector of {d.doc_id}")
            norm = np.linalg.norm(v)
            if norm == 0:
                raise DomainError(f"document {d.doc_id} has a zero vector")
            unit[i] = v / norm
        self.docs = tuple(Doc(d.doc_id, np.asarray(d.vector, dtype=np.float64), d.text) for d in docs)
        self._unit = np.ascontiguousarray(unit)
        self._unit.setflags(write=False)
        rank = np.empty(len(docs), dtype=np.int64)
        rank[sorted(range(len(ids)), key=ids.__getitem__)] = np.arange(len(docs))
        self._rank = rank
        self._rank.setflags(write=False)

    def __len__(self):
        return len(self.docs)

    @property
    def unit_vectors(self):
        return self._unit

    def doc_ids(self):
        return [d.doc_id for d in self.docs]


class ProjectionEncoder:
    """Toy frozen retrieval encoder: concatenate the two modality blocks,
    apply a fixed seeded projection, L2-normalize.

    When ``out_dim >= image_dim + question_dim`` the projection has
    orthonormal columns, so cosines between joint inputs are preserved.
    """

    def __init__(self, image_dim, question_dim, out_dim=None, seed=7):
        self.image_dim = int(image_dim)
        self.question_dim = int(question_dim)
        in_dim = self.image_dim + self.question_dim
        self.out_dim = int(out_dim or in_dim)
        self.seed = seed
        g = np.random.default_rng(seed).standard_normal((self.out_dim, in_dim))
        if self.out_dim >= in_dim:
            q, r = np.linalg.qr(g)
            self.projection = q * np.sign(np.diag(r))
        else:
            self.projection = g / np.sqrt(self.out_dim)

    def encode_joint(self, joint):
        joint = as_vector(joint, self.image_dim + self.question_dim, name="joint input")
        z = self.projection @ joint
        norm = np.linalg.norm(z)
        if norm == 0:
            raise DomainError("encoder produced a zero embedding")
        return z / norm

    def __call__(self, image, question):
        image = as_vector(image, self.image_dim, name="image features")
        question = as_vector(question, self.question_dim, name="question features")
        return self.encode_joint(np.concatenate([image, question]))

    def to_dict(self):
        return {"image_dim": self.image_dim, "question_dim": self.question_dim,
                "out_dim": self.out_dim, "seed": self.seed}


@dataclass(frozen=True)
class MultimodalQuery:
    image: np.ndarray
    question: np.ndarray
    embedding: np.ndarray
    query_id: str | None = None


def embed_query(encoder, image, question, query_id=None):
    emb = np.asarray(encoder(image, question), dtype=np.float64)
    norm = np.linalg.norm(emb)
    if not np.isclose(norm, 1.0, atol=1e-9):
        emb = emb / norm
    return MultimodalQuery(np.asarray(image, float), np.asarray(question, float), emb, query_id)


@dataclass(frozen=True)
class RetrievalResult:
    domain_id: int
    hits: tuple
    k: int

    @property
    def similarities(self):
        return [s for _, s in self.hits]

    def to_dict(self):
        return {"domain_id": self.domain_id, "k": self.k,
                "hits": [[doc_id, float(s)] for doc_id, s in self.hits]}


def _query_vector(query, dim):
    vec = query.embedding if isinstance(query, MultimodalQuery) else query
    vec = as_vector(vec, name="query embedding")
    if vec.shape[0] != dim:
        raise ShapeError(f"query dim {vec.shape[0]} != knowledge base dim {dim}")
    norm = np.linalg.norm(vec)
    if norm == 0:
        raise DomainError("query embedding is zero")
    return np.ascontiguousarray(vec / norm)


def knn(kb, query, k=DEFAULT_K):
    """Exact top-k by cosine similarity, ties broken by ascending doc_id."""
    if k < 1:
        raise DomainError("k must be >= 1")
    if len(kb) == 0:
        raise EmptyResultError(f"knowledge base for domain {kb.domain_id} is empty")
    q = _query_vector(query, kb.dim)
    idx, sims = kernels.cosine_topk(kb.unit_vectors, q, kb._rank, k)
    hits = tuple((kb.docs[i].doc_id, float(s)) for i, s in zip(idx, sims))
    return RetrievalResult(kb.domain_id, hits, k)


def retrieve_all(kbs, query, k=DEFAULT_K, parallel=False, max_workers=None):
    """One :class:`RetrievalResult` per knowledge base, in input order."""
    dims = {kb.dim for kb in kbs}
    if len(dims) > 1:
        raise ShapeError(f"knowledge bases disagree on dim: {sorted(dims)}")
    if not parallel:
        return [knn(kb, query, k) for kb in kbs]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(lambda kb: knn(kb, query, k), kbs))


# ---------------------------------------------------------------- file I/O


def save_kbs(directory, kbs):
    """Write ``kb_<domain_id>.jsonl`` files and ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for kb in kbs:
        name = f"kb_{kb.domain_id}.jsonl"
        with open(directory / name, "w") as fh:
            for d in kb.docs:
                fh.write(json.dumps({"doc_id": d.doc_id, "text": d.text,
                                     "vector": [float(x) for x in d.vector]}) + "\n")
        entries.append({"domain_id": kb.domain_id, "path": name, "count": len(kb)})
    dim = kbs[0].dim if kbs else 0
    (directory / "manifest.json").write_text(
        json.dumps({"dim": dim, "domains": entries}, indent=2) + "\n")
    return directory / "manifest.json"


def load_kbs(path):
    """Load every knowledge base listed in a manifest (file or its directory)."""
    path = Path(path)
    manifest_path = path / "manifest.json" if path.is_dir() else path
    manifest = json.loads(manifest_path.read_text())
    kbs = []
    for entry in manifest["domains"]:
        with open(manifest_path.parent / entry["path"]) as fh:
            docs = [json.loads(line) for line in fh if line.strip()]
        if len(docs) != entry["count"]:
            raise DomainError(f"{entry['path']}: manifest count {entry['count']} != {len(docs)} docs")
        kbs.append(DomainKB(entry["domain_id"], docs, manifest["dim"]))
    return kbs
