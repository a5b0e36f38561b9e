# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels. Arithmetic mirrors ``_pykernels`` operation for operation."""

import numpy as np
cimport numpy as cnp
from libc.stdint cimport uint64_t
from libc.stdlib cimport malloc, free

cnp.import_array()


def pairwise_sum(x):
    cdef const double[::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0]
    cdef Py_ssize_t size = 1, i
    cdef double *buf
    cdef double result
    if n == 0:
        return 0.0
    while size < n:
        size <<= 1
    buf = <double *> malloc(size * sizeof(double))
    if buf == NULL:
        raise MemoryError()
    for i in range(n):
        buf[i] = xv[i]
    for i in range(n, size):
        buf[i] = 0.0
    while size > 1:
        size >>= 1
        for i in range(size):
            buf[i] = buf[2 * i] + buf[2 * i + 1]
    result = buf[0]
    free(buf)
    return result


def splitmix_keys(seed, Py_ssize_t n):
    cdef uint64_t s = <uint64_t> (int(seed) & 0xFFFFFFFFFFFFFFFF)
    cdef uint64_t z
    cdef Py_ssize_t i
    out = np.empty(n, dtype=np.uint64)
    cdef uint64_t[::1] ov = out
    for i in range(n):
        z = s + (<uint64_t> (i + 1)) * 0x9E3779B97F4A7C15ULL
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL
        ov[i] = z ^ (z >> 31)
    return out


def pseudo_outcomes(mu, label, annotated, score, weight):
    cdef const double[::1] mv = np.ascontiguousarray(mu, dtype=np.float64)
    cdef const double[::1] lv = np.ascontiguousarray(label, dtype=np.float64)
    cdef const cnp.uint8_t[::1] av = np.ascontiguousarray(annotated, dtype=np.uint8)
    cdef const double[::1] sv = np.ascontiguousarray(score, dtype=np.float64)
    cdef const double[::1] wv = np.ascontiguousarray(weight, dtype=np.float64)
    cdef Py_ssize_t n = mv.shape[0], i
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] ov = out
    cdef double v
    for i in range(n):
        if av[i]:
            v = mv[i] + (lv[i] - mv[i]) / sv[i]
        else:
            v = mv[i]
        ov[i] = wv[i] * v
    return out


def cluster_totals(values, codes, Py_ssize_t n_groups):
    cdef const double[::1] vv = np.ascontiguousarray(values, dtype=np.float64)
    cdef const cnp.int64_t[::1] cv = np.ascontiguousarray(codes, dtype=np.int64)
    cdef Py_ssize_t n = vv.shape[0], i
    out = np.zeros(n_groups, dtype=np.float64)
    cdef double[::1] ov = out
    for i in range(n):
        ov[cv[i]] += vv[i]
    return out


cdef double _kth_smallest(double *a, Py_ssize_t n, Py_ssize_t k) nogil:
    # Hoare quickselect on a scratch copy; k is 0-based.
    cdef Py_ssize_t lo = 0, hi = n - 1, i, j
    cdef double pivot, tmp
    while lo < hi:
        pivot = a[(lo + hi) // 2]
        i = lo
        j = hi
        while i <= j:
            while a[i] < pivot:
                i += 1
            while a[j] > pivot:
                j -= 1
            if i <= j:
                tmp = a[i]
                a[i] = a[j]
                a[j] = tmp
                i += 1
                j -= 1
        if k <= j:
            hi = j
        elif k >= i:
            lo = i
        else:
            break
    return a[k]


def knn_predict(train_x, train_y, query_x, Py_ssize_t k):
    cdef const double[:, ::1] tx = np.ascontiguousarray(train_x, dtype=np.float64)
    cdef const double[::1] ty = np.ascontiguousarray(train_y, dtype=np.float64)
    cdef const double[:, ::1] qx = np.ascontiguousarray(query_x, dtype=np.float64)
    cdef Py_ssize_t n_train = tx.shape[0], p = tx.shape[1], n_query = qx.shape[0]
    cdef Py_ssize_t q, i, j, count
    cdef double kth, total, diff
    if k > n_train:
        k = n_train
    out = np.empty(n_query, dtype=np.float64)
    cdef double[::1] ov = out
    cdef double *d2 = <double *> malloc(n_train * sizeof(double))
    cdef double *scratch = <double *> malloc(n_train * sizeof(double))
    if d2 == NULL or scratch == NULL:
        free(d2)
        free(scratch)
        raise MemoryError()
    try:
        with nogil:
            for q in range(n_query):
                for i in range(n_train):
                    d2[i] = 0.0
                for j in range(p):
                    for i in range(n_train):
                        diff = tx[i, j] - qx[q, j]
                        d2[i] = d2[i] + diff * diff
                for i in range(n_train):
                    scratch[i] = d2[i]
                kth = _kth_smallest(scratch, n_train, k - 1)
                total = 0.0
                count = 0
                for i in range(n_train):
                    if d2[i] <= kth:
                        total = total + ty[i]
                        count += 1
                ov[q] = total / count
    finally:
        free(d2)
        free(scratch)
    return out
