"""Pure numpy versions of the compiled kernels."""

import numpy as np


def cosine_topk(docs, query, rank, k):
    # row-wise sum, not matmul: BLAS may give identical rows different last bits
    sims = (docs * query).sum(axis=1)
    k = min(k, sims.shape[0])
    order = np.lexsort((rank, -sims))[:k]
    return order.astype(np.int64), sims[order]


def js_divergence(p, q):
    m = 0.5 * (p + q)
    left = np.sum(p[p > 0] * np.log(p[p > 0] / m[p > 0]))
    right = np.sum(q[q > 0] * np.log(q[q > 0] / m[q > 0]))
    s = float(0.5 * left + 0.5 * right)
    return s if s > 0.0 else 0.0


def mlp_logit(h, w1, b1, w2, b2):
    return float(w2 @ np.tanh(w1 @ h + b1) + b2)
