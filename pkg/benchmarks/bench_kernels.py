"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py --repeat 5
"""

import argparse
import timeit

import numpy as np

from alignsim import kernels


def cases(rng, n_docs, dim, hidden):
    docs = rng.standard_normal((n_docs, dim))
    docs /= np.linalg.norm(docs, axis=1, keepdims=True)
    docs = np.ascontiguousarray(docs)
    query = docs[0].copy()
    rank = np.arange(n_docs, dtype=np.int64)
    p, q = rng.dirichlet(np.ones(16)), rng.dirichlet(np.ones(16))
    h = rng.standard_normal(dim)
    w1, b1 = rng.standard_normal((hidden, dim)), rng.standard_normal(hidden)
    w2, b2 = rng.standard_normal(hidden), 0.1
    return {
        "cosine_topk": lambda m: m.cosine_topk(docs, query, rank, 5),
        "js_divergence": lambda m: m.js_divergence(p, q),
        "mlp_logit": lambda m: m.mlp_logit(h, w1, b1, w2, b2),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--docs", type=int, default=512)
    ap.add_argument("--dim", type=int, default=64)
    ap.add_argument("--hidden", type=int, default=16)
    ap.add_argument("--number", type=int, default=2000, help="calls per timing")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    if kernels.compiled is None:
        print("compiled kernels not built; run `pip install -e . --no-build-isolation` first")
        return 1
    funcs = cases(np.random.default_rng(0), args.docs, args.dim, args.hidden)
    print(f"{'kernel':<14} {'compiled us':>12} {'python us':>12} {'speedup':>8}")
    for name, f in funcs.items():
        t = {}
        for label, mod in (("compiled", kernels.compiled), ("python", kernels.python)):
            best = min(timeit.repeat(lambda: f(mod), number=args.number, repeat=args.repeat))
            t[label] = 1e6 * best / args.number
        print(f"{name:<14} {t['compiled']:>12.2f} {t['python']:>12.2f} {t['python'] / t['compiled']:>7.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
