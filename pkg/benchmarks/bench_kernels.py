"""Compare the compiled kernels with the pure-Python fallback.

Run with ``python3 benchmarks/bench_kernels.py``.  Each kernel is timed on
identical inputs under both backends and the outputs are checked equal.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from conceptmoe import kernels
from conceptmoe import corpus as C
from conceptmoe import tokenizer as T


def _workloads(seed: int):
    rng = np.random.default_rng(seed)
    seq = rng.integers(0, 300, size=200_000).astype(np.int64)
    seq[rng.random(seq.size) < 0.15] = kernels.SEP
    freq = rng.integers(1, 5, size=seq.size).astype(np.int64)
    logits = rng.normal(size=(20_000, 8))
    specs = C.make_languages(3)
    kb = C.generate_kb(seed, 2000)
    texts = [C.realize(st, s) for st in kb for s in specs]
    return seq, freq, logits, texts


def bench(backend, seq, freq, logits, texts, repeat: int) -> dict[str, float]:
    out = {}
    out["count_pairs"] = min(timeit.repeat(lambda: backend.count_pairs(seq, freq), number=1, repeat=repeat))

    def merge():
        s = seq.copy()
        f = freq.copy()
        backend.merge_pair(s, f, 1, 2, 999)

    out["merge_pair"] = min(timeit.repeat(merge, number=1, repeat=repeat))
    out["topk_indices"] = min(timeit.repeat(lambda: backend.topk_indices(logits, 2), number=1, repeat=repeat))
    tok = T.train(texts, 700)
    words = [w for t in texts for w in T.split_chunks(t)]
    ids = [(np.frombuffer(w.encode(), dtype=np.uint8).astype(np.int64) + T.N_SPECIAL).tolist() for w in words]
    table = backend.MergeTable(
        np.array([a for a, _ in tok.merges], dtype=np.int64),
        np.array([b for _, b in tok.merges], dtype=np.int64),
        np.arange(len(tok.merges), dtype=np.int64) + T.N_SPECIAL + T.N_BYTES,
    )
    out["merge_table_encode"] = min(
        timeit.repeat(lambda: [table.encode(x) for x in ids], number=1, repeat=repeat)
    )
    return out


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    seq, freq, logits, texts = _workloads(args.seed)
    py = bench(kernels.python_backend, seq, freq, logits, texts, args.repeat)
    if kernels.compiled_backend is None:
        print("compiled backend unavailable; python timings only")
        for k, v in py.items():
            print(f"{k:<20} {v * 1e3:>10.2f} ms")
        return
    cc = bench(kernels.compiled_backend, seq, freq, logits, texts, args.repeat)
    a = kernels.python_backend.count_pairs(seq, freq)
    b = kernels.compiled_backend.count_pairs(seq, freq)
    assert all(np.array_equal(x, y) for x, y in zip(a, b)), "count_pairs outputs differ"
    assert np.array_equal(kernels.python_backend.topk_indices(logits, 2),
                          kernels.compiled_backend.topk_indices(logits, 2)), "topk outputs differ"
    print(f"{'kernel':<20} {'python ms':>10} {'compiled ms':>12} {'speedup':>8}")
    for k in py:
        print(f"{k:<20} {py[k] * 1e3:>10.2f} {cc[k] * 1e3:>12.2f} {py[k] / cc[k]:>7.1f}x")


if __name__ == "__main__":
    main()
