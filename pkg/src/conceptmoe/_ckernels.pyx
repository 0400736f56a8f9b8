# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
# distutils: language = c++
"""Compiled versions of the hot kernels; see ``_pykernels`` for semantics."""

import numpy as np
cimport numpy as cnp
from libcpp.unordered_map cimport unordered_map
from libcpp.pair cimport pair
from libcpp.vector cimport vector
from libcpp.algorithm cimport sort as cpp_sort
from cython.operator cimport dereference as cython_deref

cnp.import_array()

ctypedef long long i64

cdef i64 SEP = -1


# id ranges up to this many pairs are counted in a dense table
cdef Py_ssize_t DENSE_LIMIT = 1 << 22


def count_pairs(i64[::1] seq, i64[::1] freq):
    cdef Py_ssize_t n = seq.shape[0], i, j, m = 0
    cdef i64 a, b, key, top = -1
    for i in range(n):
        if seq[i] > top:
            top = seq[i]
    cdef Py_ssize_t width = top + 1
    if width > 0 and width * width <= DENSE_LIMIT:
        return _count_dense(seq, freq, width)
    cdef unordered_map[i64, i64] counts
    for i in range(n - 1):
        a = seq[i]
        b = seq[i + 1]
        if a == SEP or b == SEP:
            continue
        key = (a << 32) | b
        counts[key] += freq[i]
    cdef vector[i64] keys
    keys.reserve(counts.size())
    for kv in counts:
        keys.push_back(kv.first)
    cpp_sort(keys.begin(), keys.end())
    m = keys.size()
    left = np.empty(m, dtype=np.int64)
    right = np.empty(m, dtype=np.int64)
    cnt = np.empty(m, dtype=np.int64)
    cdef i64[::1] lv = left, rv = right, cv = cnt
    for j in range(m):
        key = keys[j]
        lv[j] = key >> 32
        rv[j] = key & 0xFFFFFFFF
        cv[j] = counts[key]
    return left, right, cnt


cdef _count_dense(i64[::1] seq, i64[::1] freq, Py_ssize_t width):
    cdef Py_ssize_t n = seq.shape[0], i, j, m = 0
    cdef i64 a, b
    table_arr = np.zeros(width * width, dtype=np.int64)
    seen_arr = np.zeros(width * width, dtype=np.uint8)
    cdef i64[::1] table = table_arr
    cdef unsigned char[::1] seen = seen_arr
    for i in range(n - 1):
        a = seq[i]
        b = seq[i + 1]
        if a == SEP or b == SEP:
            continue
        j = a * width + b
        table[j] += freq[i]
        if not seen[j]:
            seen[j] = 1
            m += 1
    left = np.empty(m, dtype=np.int64)
    right = np.empty(m, dtype=np.int64)
    cnt = np.empty(m, dtype=np.int64)
    cdef i64[::1] lv = left, rv = right, cv = cnt
    m = 0
    for j in range(width * width):
        if seen[j]:
            lv[m] = j // width
            rv[m] = j % width
            cv[m] = table[j]
            m += 1
    return left, right, cnt


def merge_pair(i64[::1] seq, i64[::1] freq, i64 a, i64 b, i64 new):
    cdef Py_ssize_t n = seq.shape[0], r = 0, w = 0
    while r < n:
        if r + 1 < n and seq[r] == a and seq[r + 1] == b:
            seq[w] = new
            freq[w] = freq[r]
            r += 2
        else:
            seq[w] = seq[r]
            freq[w] = freq[r]
            r += 1
        w += 1
    return w


cdef class MergeTable:
    cdef unordered_map[i64, pair[i64, i64]] table

    def __init__(self, lefts, rights, merged):
        cdef i64 r = 0
        for a, b, m in zip(lefts, rights, merged):
            self.table[(<i64>a << 32) | <i64>b] = pair[i64, i64](r, <i64>m)
            r += 1

    def __len__(self):
        return self.table.size()

    def encode(self, ids):
        cdef vector[i64] buf
        for t in ids:
            buf.push_back(<i64>t)
        cdef Py_ssize_t n = buf.size(), i, w, best_pos
        cdef i64 best_rank, best_new, a, b
        cdef unordered_map[i64, pair[i64, i64]].iterator it
        while n > 1:
            best_rank = -1
            best_pos = -1
            best_new = 0
            for i in range(n - 1):
                it = self.table.find((buf[i] << 32) | buf[i + 1])
                if it != self.table.end():
                    if best_rank < 0 or deref_rank(it) < best_rank:
                        best_rank = deref_rank(it)
                        best_new = deref_new(it)
                        best_pos = i
            if best_rank < 0:
                break
            a = buf[best_pos]
            b = buf[best_pos + 1]
            w = 0
            i = 0
            while i < n:
                if i + 1 < n and buf[i] == a and buf[i + 1] == b:
                    buf[w] = best_new
                    i += 2
                else:
                    buf[w] = buf[i]
                    i += 1
                w += 1
            n = w
        return [buf[i] for i in range(n)]


cdef inline i64 deref_rank(unordered_map[i64, pair[i64, i64]].iterator it):
    return cython_deref(it).second.first


cdef inline i64 deref_new(unordered_map[i64, pair[i64, i64]].iterator it):
    return cython_deref(it).second.second



def topk_indices(double[:, ::1] logits, Py_ssize_t k):
    cdef Py_ssize_t n = logits.shape[0], m = logits.shape[1], r, i, j, pos
    out = np.empty((n, k), dtype=np.int64)
    cdef i64[:, ::1] ov = out
    cdef double v
    # insertion into a sorted k-buffer; strict > keeps the lower index on ties
    for r in range(n):
        pos = 0
        for i in range(m):
            v = logits[r, i]
            if pos < k:
                j = pos
                pos += 1
            elif v > logits[r, ov[r, k - 1]]:
                j = k - 1
            else:
                continue
            while j > 0 and v > logits[r, ov[r, j - 1]]:
                ov[r, j] = ov[r, j - 1]
                j -= 1
            ov[r, j] = i
    return out
