"""Time the compiled kernels against the pure-Python fallback.

    python benchmarks/bench_kernels.py --entries 500 --repeat 5
"""

import argparse
import random
import timeit
from array import array

from vprefine import _kernels_py
from vprefine.codebase import DIMS, tokenize

try:
    from vprefine import _kernels
except ImportError:
    _kernels = None

WORDS = "how many cups plates are there on the table left of red dog is cat near behind what color".split()


def workload(n, seed):
    rng = random.Random(seed)
    texts = [" ".join(rng.choice(WORDS) for _ in range(rng.randint(3, 12))) for _ in range(n)]
    return [[t.encode() for t in tokenize(s)] for s in texts]


def run(impl, docs, repeat):
    def embed_all():
        return [impl.hash_embed(toks, DIMS) for toks in docs]

    rows = embed_all()
    matrix = array("d")
    for r in rows:
        matrix.extend(r)
    query = rows[0]
    t_embed = min(timeit.repeat(embed_all, number=1, repeat=repeat))
    t_dot = min(timeit.repeat(lambda: impl.dot_rows(query, matrix, len(rows)), number=1, repeat=repeat))
    return t_embed, t_dot, impl.dot_rows(query, matrix, len(rows))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--entries", type=int, default=500)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    docs = workload(args.entries, args.seed)
    impls = [("python", _kernels_py)] + ([("cython", _kernels)] if _kernels is not None else [])
    results = {}
    print(f"{'kernel':8} {'embed (ms)':>12} {'dot_rows (ms)':>14}")
    for name, impl in impls:
        t_embed, t_dot, scores = run(impl, docs, args.repeat)
        results[name] = scores
        print(f"{name:8} {t_embed * 1e3:12.3f} {t_dot * 1e3:14.3f}")
    if len(results) == 2:
        same = list(results["python"]) == list(results["cython"])
        print(f"bit-identical scores: {same}")
    else:
        print("compiled extension not built; only the fallback was timed")


if __name__ == "__main__":
    main()
