"""The compiled kernels and the numpy fallback must agree exactly."""

from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conceptmoe import kernels

BACKENDS = [kernels.python_backend]
if kernels.compiled_backend is not None:
    BACKENDS.append(kernels.compiled_backend)
SEP = kernels.SEP


def brute_pairs(seq, freq):
    c = Counter()
    for i in range(len(seq) - 1):
        if seq[i] != SEP and seq[i + 1] != SEP:
            c[(seq[i], seq[i + 1])] += freq[i]
    return c


def brute_merge(seq, a, b, new):
    out, i = [], 0
    while i < len(seq):
        if i + 1 < len(seq) and seq[i] == a and seq[i + 1] == b:
            out.append(new)
            i += 2
        else:
            out.append(seq[i])
            i += 1
    return out


def test_selected_backend_is_reported():
    assert kernels.BACKEND_NAME in ("compiled", "python")


@pytest.mark.parametrize("be", BACKENDS, ids=lambda b: b.__name__)
@settings(max_examples=60, deadline=None)
@given(st.lists(st.sampled_from([SEP, 4, 5, 6, 7]), max_size=40))
def test_count_pairs_matches_brute_force(be, raw):
    seq = np.array(raw, dtype=np.int64)
    freq = np.arange(1, len(raw) + 1, dtype=np.int64)
    left, right, cnt = be.count_pairs(seq, freq)
    got = {(int(l), int(r)): int(c) for l, r, c in zip(left, right, cnt)}
    assert got == dict(brute_pairs(raw, freq.tolist()))
    keys = list(zip(left.tolist(), right.tolist()))
    assert keys == sorted(keys)


@pytest.mark.parametrize("be", BACKENDS, ids=lambda b: b.__name__)
@settings(max_examples=60, deadline=None)
@given(st.lists(st.sampled_from([SEP, 4, 5]), max_size=40), st.sampled_from([(4, 5), (4, 4), (5, 4)]))
def test_merge_pair_matches_brute_force(be, raw, pair):
    seq = np.array(raw, dtype=np.int64)
    freq = np.ones(len(raw), dtype=np.int64)
    n = be.merge_pair(seq, freq, pair[0], pair[1], 99)
    assert seq[:n].tolist() == brute_merge(raw, pair[0], pair[1], 99)


@pytest.mark.parametrize("be", BACKENDS, ids=lambda b: b.__name__)
def test_merge_table_applies_lowest_rank_first(be):
    # rank 0: (4,5)->10, rank 1: (5,6)->11, rank 2: (10,6)->12
    table = be.MergeTable([4, 5, 10], [5, 6, 6], [10, 11, 12])
    assert table.encode([4, 5, 6]) == [12]
    assert table.encode([5, 6, 4]) == [11, 4]
    assert table.encode([]) == []


@pytest.mark.parametrize("be", BACKENDS, ids=lambda b: b.__name__)
def test_topk_ties_go_to_lower_index(be):
    logits = np.array([[1.0, 1.0, 1.0, 1.0], [0.0, 3.0, 3.0, 1.0]])
    assert be.topk_indices(logits, 2).tolist() == [[0, 1], [1, 2]]


def test_backends_agree_on_random_inputs():
    if kernels.compiled_backend is None:
        pytest.skip("compiled backend not built")
    rng = np.random.default_rng(0)
    py, cc = kernels.python_backend, kernels.compiled_backend
    logits = np.round(rng.normal(size=(500, 8)), 1)  # rounding creates ties
    for k in (1, 2, 5, 8):
        assert np.array_equal(py.topk_indices(logits, k), cc.topk_indices(logits, k))
    seq = rng.integers(4, 12, size=3000).astype(np.int64)
    seq[rng.random(3000) < 0.2] = SEP
    freq = rng.integers(1, 4, size=3000).astype(np.int64)
    for x, y in zip(py.count_pairs(seq, freq), cc.count_pairs(seq, freq)):
        assert np.array_equal(x, y)
    s1, s2 = seq.copy(), seq.copy()
    n1 = py.merge_pair(s1, freq.copy(), 5, 5, 40)
    n2 = cc.merge_pair(s2, freq.copy(), 5, 5, 40)
    assert n1 == n2 and np.array_equal(s1[:n1], s2[:n2])


@pytest.mark.parametrize("top", [3, 300, 50_000])
def test_count_pairs_agree_for_small_and_large_id_ranges(top):
    # large ids take the hash-map path of the compiled kernel, small ones the dense table
    if kernels.compiled_backend is None:
        pytest.skip("compiled backend not built")
    rng = np.random.default_rng(top)
    seq = rng.integers(0, top, size=5000).astype(np.int64)
    seq[rng.random(5000) < 0.1] = SEP
    freq = rng.integers(1, 6, size=5000).astype(np.int64)
    py = kernels.python_backend.count_pairs(seq, freq)
    cc = kernels.compiled_backend.count_pairs(seq, freq)
    for x, y in zip(py, cc):
        assert np.array_equal(x, y)
    assert dict(zip(zip(py[0].tolist(), py[1].tolist()), py[2].tolist())) == brute_pairs(seq.tolist(), freq.tolist())
