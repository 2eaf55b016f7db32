import numpy as np
import pytest

from alignsim.errors import DomainError, EmptyResultError, ShapeError
from alignsim.knowledge import (
    Doc, DomainKB, ProjectionEncoder, embed_query, knn, load_kbs, retrieve_all, save_kbs,
)


def brute_force(vectors, ids, q, k):
    unit = vectors / np.linalg.norm(vectors, axis=1, keepdims=True)
    sims = unit @ (q / np.linalg.norm(q))
    order = sorted(range(len(ids)), key=lambda i: (-sims[i], ids[i]))[:k]
    return [(ids[i], sims[i]) for i in order]


def make_kb(rng, n, dim, domain=0):
    vecs = rng.standard_normal((n, dim))
    return DomainKB(domain, [Doc(f"doc{i:05d}", v) for i, v in enumerate(vecs)]), vecs


class TestKnn:
    def test_matches_brute_force(self, rng):
        kb, vecs = make_kb(rng, 200, 16)
        q = rng.standard_normal(16)
        got = knn(kb, q, 7).hits
        want = brute_force(vecs, kb.doc_ids(), q, 7)
        assert [h[0] for h in got] == [w[0] for w in want]
        np.testing.assert_allclose([h[1] for h in got], [w[1] for w in want], rtol=0, atol=1e-12)

    def test_ties_break_by_doc_id(self):
        v = np.array([1.0, 0.0])
        kb = DomainKB(0, [Doc("zeta", v), Doc("alpha", 2 * v), Doc("mid", 3 * v), Doc("other", [0.0, 1.0])])
        assert [h[0] for h in knn(kb, v, 3).hits] == ["alpha", "mid", "zeta"]

    def test_k_larger_than_kb(self, rng):
        kb, _ = make_kb(rng, 3, 4)
        res = knn(kb, rng.standard_normal(4), 5)
        assert len(res.hits) == 3 and res.k == 5

    def test_empty_kb(self):
        with pytest.raises(EmptyResultError):
            knn(DomainKB(2, [], dim=3), np.ones(3))

    def test_errors(self, rng):
        kb, _ = make_kb(rng, 4, 3)
        with pytest.raises(ShapeError):
            knn(kb, np.ones(4))
        with pytest.raises(DomainError):
            knn(kb, np.zeros(3))
        with pytest.raises(DomainError):
            knn(kb, np.ones(3), 0)

    def test_duplicate_and_zero_docs(self):
        with pytest.raises(DomainError):
            DomainKB(0, [Doc("a", [1.0]), Doc("a", [2.0])])
        with pytest.raises(DomainError):
            DomainKB(0, [Doc("a", [0.0, 0.0])])

    def test_store_is_read_only(self, rng):
        kb, _ = make_kb(rng, 4, 3)
        with pytest.raises(ValueError):
            kb.unit_vectors[0, 0] = 1.0

    def test_parallel_equals_serial(self, rng):
        kbs = [make_kb(rng, 30, 8, d)[0] for d in range(4)]
        q = rng.standard_normal(8)
        assert retrieve_all(kbs, q, 5) == retrieve_all(kbs, q, 5, parallel=True)

    def test_retrieve_all_dim_mismatch(self, rng):
        with pytest.raises(ShapeError):
            retrieve_all([make_kb(rng, 3, 4)[0], make_kb(rng, 3, 5, 1)[0]], np.ones(4))


class TestEncoder:
    def test_frozen_seed_projection(self):
        # pinned output of the seed-7 encoder guards against silent changes
        enc = ProjectionEncoder(2, 2, 4, seed=7)
        z = enc(np.array([1.0, 0.0]), np.array([0.0, 0.0]))
        np.testing.assert_allclose(
            z, [0.00181355233256086, -0.6702979412932166, -0.7256349579431408, 0.15540684906679253],
            rtol=0, atol=1e-14)
        np.testing.assert_allclose(np.linalg.norm(z), 1.0, rtol=0, atol=1e-15)
        np.testing.assert_allclose(enc.projection.T @ enc.projection, np.eye(4), atol=1e-12)

    def test_preserves_cosine(self, rng):
        enc = ProjectionEncoder(3, 2, 10)
        a, b = rng.standard_normal(5), rng.standard_normal(5)
        cos = a @ b / np.linalg.norm(a) / np.linalg.norm(b)
        assert abs(enc.encode_joint(a) @ enc.encode_joint(b) - cos) < 1e-12

    def test_seed_changes_projection(self):
        assert not np.allclose(ProjectionEncoder(2, 2, 4, 7).projection, ProjectionEncoder(2, 2, 4, 8).projection)

    def test_embed_query_unit(self, rng):
        q = embed_query(ProjectionEncoder(3, 3, 6), rng.standard_normal(3), rng.standard_normal(3), "q1")
        assert abs(np.linalg.norm(q.embedding) - 1) < 1e-12 and q.query_id == "q1"

    def test_dimension_checks(self):
        with pytest.raises(ShapeError):
            ProjectionEncoder(2, 2)(np.ones(3), np.ones(2))


def test_kb_save_load(rng, tmp_path):
    kbs = [make_kb(rng, 5, 4, d)[0] for d in range(3)]
    save_kbs(tmp_path / "kb", kbs)
    back = load_kbs(tmp_path / "kb")
    assert [kb.domain_id for kb in back] == [0, 1, 2]
    q = rng.standard_normal(4)
    assert [knn(a, q).hits for a in kbs] == [knn(b, q).hits for b in back]
