"""Pure-Python/numpy versions of the hot kernels.

Semantics match ``_ckernels`` exactly; tests run both and compare.
"""

from __future__ import annotations

import numpy as np

SEP = -1


def count_pairs(seq: np.ndarray, freq: np.ndarray):
    """Weighted counts of adjacent symbol pairs that do not cross a separator.

    Returns ``(left, right, count)`` arrays sorted by ``(left, right)``.
    """
    if seq.size < 2:
        e = np.empty(0, dtype=np.int64)
        return e, e, e
    left = seq[:-1]
    right = seq[1:]
    ok = (left != SEP) & (right != SEP)
    left = left[ok]
    right = right[ok]
    w = freq[:-1][ok]
    if left.size == 0:
        e = np.empty(0, dtype=np.int64)
        return e, e, e
    keys = left.astype(np.int64) << 32 | right.astype(np.int64)
    uniq, inv = np.unique(keys, return_inverse=True)
    counts = np.bincount(inv, weights=w).astype(np.int64)
    return uniq >> 32, uniq & 0xFFFFFFFF, counts


def merge_pair(seq: np.ndarray, freq: np.ndarray, a: int, b: int, new: int) -> int:
    """Replace non-overlapping ``a b`` runs left to right, compacting in place.

    Returns the new logical length; entries past it are stale.
    """
    n = seq.size
    hits = np.nonzero((seq[:-1] == a) & (seq[1:] == b))[0]
    if hits.size == 0:
        return n
    drop = np.zeros(n, dtype=bool)
    last = -2
    for i in hits.tolist():
        if i == last + 1:
            # overlaps the previous merge (a a a with a == b)
            continue
        seq[i] = new
        drop[i + 1] = True
        last = i
    keep = ~drop
    m = int(keep.sum())
    seq[:m] = seq[keep]
    freq[:m] = freq[keep]
    return m


class MergeTable:
    """Pair -> (rank, merged id) lookup used by BPE encoding."""

    def __init__(self, lefts, rights, merged):
        self._table = {
            (int(a), int(b)): (r, int(m))
            for r, (a, b, m) in enumerate(zip(lefts, rights, merged))
        }

    def __len__(self) -> int:
        return len(self._table)

    def encode(self, ids: list[int]) -> list[int]:
        """Apply merges to ``ids`` lowest rank first until none applies."""
        table = self._table
        ids = list(ids)
        while len(ids) > 1:
            best = None
            best_pos = -1
            for i in range(len(ids) - 1):
                hit = table.get((ids[i], ids[i + 1]))
                if hit is not None and (best is None or hit[0] < best[0]):
                    best = hit
                    best_pos = i
            if best is None:
                break
            a, b = ids[best_pos], ids[best_pos + 1]
            out = []
            i = 0
            while i < len(ids):
                if i < len(ids) - 1 and ids[i] == a and ids[i + 1] == b:
                    out.append(best[1])
                    i += 2
                else:
                    out.append(ids[i])
                    i += 1
            ids = out
        return ids


def topk_indices(logits: np.ndarray, k: int) -> np.ndarray:
    """Per row, the ``k`` largest entries' indices, larger first, ties to lower index."""
    order = np.argsort(-logits, axis=-1, kind="stable")
    return np.ascontiguousarray(order[..., :k]).astype(np.int64)
