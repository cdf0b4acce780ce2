"""Compare the compiled and pure-Python similarity kernels.

    python3 benchmarks/bench_kernels.py [--nodes 200] [--repeat 3]

Both backends are fed identical inputs; the script checks their outputs are
bit-identical before reporting timings.
"""
from __future__ import annotations

import argparse
import random
import timeit

from skillforge import _pykernels as py
from skillforge.text import shingles

try:
    from skillforge import _kernels as cy
except ImportError:
    cy = None

WORDS = ("lookup submit confirm unlock activate status crate badge ledger account ref item mode "
         "error requires before ok warning needed level eco night").split()


def corpus(n: int, seed: int = 0) -> list[str]:
    rng = random.Random(seed)
    return [" ".join(rng.choices(WORDS, k=rng.randint(20, 80))) for _ in range(n)]


def prepare(k, texts):
    sh = [shingles(t) for t in texts]
    fps = [k.fingerprints(s) for s in sh]
    embs = [k.hashed_embedding(s, 256) for s in sh]
    return sh, fps, embs


def workloads(k, texts):
    sh, fps, embs = prepare(k, texts)
    others = list(zip(fps, embs, fps))

    def fingerprinting():
        for s in sh:
            k.fingerprints(s)

    def embedding():
        for s in sh:
            k.hashed_embedding(s, 256)

    def graph_weights():
        # every node against all others, as an incremental graph build does
        return [k.weights_against(f, e, f, others, 0.45, 0.35, 0.20, 1.7) for f, e in zip(fps, embs)]

    return {"fingerprints": fingerprinting, "hashed_embedding": embedding, "weights_against": graph_weights}


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--nodes", type=int, default=200)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    texts = corpus(args.nodes)
    backends = [("python", py)] + ([("cython", cy)] if cy is not None else [])
    if cy is None:
        print("compiled extension not built; timing the pure-Python backend only")
    else:
        assert workloads(cy, texts)["weights_against"]() == workloads(py, texts)["weights_against"](), \
            "backends disagree"
    results: dict[str, dict[str, float]] = {}
    for name, k in backends:
        for label, fn in workloads(k, texts).items():
            results.setdefault(label, {})[name] = min(timeit.repeat(fn, number=1, repeat=args.repeat))
    print(f"{'kernel':<18}{'python (s)':>12}{'cython (s)':>12}{'speedup':>10}")
    for label, t in results.items():
        c = t.get("cython")
        speed = f"{t['python'] / c:9.1f}x" if c else "      n/a"
        print(f"{label:<18}{t['python']:12.4f}{(c or float('nan')):12.4f}{speed}")


if __name__ == "__main__":
    main()
