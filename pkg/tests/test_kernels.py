"""Both kernel backends against numpy oracles and each other."""

import math

import numpy as np
import pytest

from alignsim import kernels


def test_backend_name():
    assert kernels.BACKEND in ("cython", "python")


class TestCosineTopk:
    def test_oracle(self, backend, rng):
        docs = rng.standard_normal((100, 8))
        docs /= np.linalg.norm(docs, axis=1, keepdims=True)
        q = rng.standard_normal(8)
        q /= np.linalg.norm(q)
        rank = np.arange(100, dtype=np.int64)
        idx, sims = backend.cosine_topk(np.ascontiguousarray(docs), q, rank, 10)
        want = np.lexsort((rank, -(docs @ q)))[:10]
        np.testing.assert_array_equal(idx, want)
        np.testing.assert_allclose(sims, (docs @ q)[want], rtol=0, atol=1e-14)

    def test_ties_use_rank(self, backend):
        docs = np.ascontiguousarray(np.tile([1.0, 0.0], (5, 1)))
        rank = np.array([4, 2, 0, 3, 1], dtype=np.int64)
        idx, _ = backend.cosine_topk(docs, np.array([1.0, 0.0]), rank, 3)
        np.testing.assert_array_equal(idx, [2, 4, 1])

    def test_duplicate_rows_tie_exactly(self, backend):
        rng = np.random.default_rng([40, 22])
        row = rng.standard_normal(37)
        row /= np.linalg.norm(row)
        other = rng.standard_normal((50, 37))
        other /= np.linalg.norm(other, axis=1, keepdims=True)
        docs = np.ascontiguousarray(np.vstack([other, np.tile(row, (40, 1))]))
        rank = np.arange(90, dtype=np.int64)[::-1].copy()
        idx, sims = backend.cosine_topk(docs, row, rank, 40)
        np.testing.assert_array_equal(idx, np.arange(89, 49, -1))
        assert len(set(sims.tolist())) == 1

    def test_k_clipped(self, backend):
        docs = np.ascontiguousarray(np.eye(3))
        idx, sims = backend.cosine_topk(docs, np.array([0.0, 1.0, 0.0]), np.arange(3, dtype=np.int64), 9)
        assert len(idx) == 3 and idx[0] == 1


class TestJs:
    def test_known_values(self, backend):
        assert abs(backend.js_divergence(np.array([1.0, 0.0]), np.array([0.0, 1.0])) - math.log(2)) < 1e-15
        assert backend.js_divergence(np.array([0.3, 0.7]), np.array([0.3, 0.7])) == 0.0

    def test_hand_value(self, backend):
        p, q = np.array([0.5, 0.5]), np.array([0.9, 0.1])
        m = (p + q) / 2
        want = 0.5 * np.sum(p * np.log(p / m)) + 0.5 * np.sum(q * np.log(q / m))
        assert abs(backend.js_divergence(p, q) - want) < 1e-15


def test_mlp_logit_oracle(backend, rng):
    w1, b1, w2 = rng.standard_normal((6, 4)), rng.standard_normal(6), rng.standard_normal(6)
    h = rng.standard_normal(4)
    want = w2 @ np.tanh(w1 @ h + b1) + 0.3
    assert abs(backend.mlp_logit(h, np.ascontiguousarray(w1), b1, w2, 0.3) - want) < 1e-13


def test_backends_agree(rng):
    if kernels.compiled is None:
        pytest.skip("compiled kernels not built")
    c, p = kernels.compiled, kernels.python
    for _ in range(50):
        n, d = rng.integers(1, 80), rng.integers(1, 20)
        docs = np.ascontiguousarray(rng.standard_normal((n, d)))
        q = rng.standard_normal(d)
        rank = rng.permutation(n).astype(np.int64)
        k = int(rng.integers(1, 10))
        ic, sc = c.cosine_topk(docs, q, rank, k)
        ip, sp = p.cosine_topk(docs, q, rank, k)
        np.testing.assert_array_equal(ic, ip)
        np.testing.assert_allclose(sc, sp, rtol=0, atol=1e-13)
        a, b = rng.dirichlet(np.ones(d)), rng.dirichlet(np.ones(d))
        assert abs(c.js_divergence(a, b) - p.js_divergence(a, b)) < 1e-14
