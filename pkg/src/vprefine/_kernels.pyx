# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hashing/scoring kernels; must stay bit-identical to _kernels_py."""

from cpython.array cimport array, clone
from libc.math cimport sqrt
from libc.stdint cimport uint64_t

cdef uint64_t FNV_OFFSET = 0xcbf29ce484222325ULL
cdef uint64_t FNV_PRIME = 0x100000001b3ULL
cdef array _DOUBLES = array("d")


cdef inline uint64_t _fnv(const unsigned char[:] data) noexcept nogil:
    cdef uint64_t h = FNV_OFFSET
    cdef Py_ssize_t i
    for i in range(data.shape[0]):
        h = h ^ data[i]
        h = h * FNV_PRIME
    return h


def fnv1a64(const unsigned char[:] data):
    return _fnv(data)


def hash_embed(list tokens, Py_ssize_t dims):
    cdef array out = clone(_DOUBLES, dims, zero=True)
    cdef double[::1] v = out
    cdef uint64_t h
    cdef Py_ssize_t i
    cdef double norm = 0.0
    for tok in tokens:
        h = _fnv(tok)
        if (h >> 8) & 1:
            v[h % dims] -= 1.0
        else:
            v[h % dims] += 1.0
    for i in range(dims):
        norm += v[i] * v[i]
    if norm > 0.0:
        norm = sqrt(norm)
        for i in range(dims):
            v[i] = v[i] / norm
    return out


def dot_rows(const double[::1] query, const double[::1] matrix, Py_ssize_t n):
    cdef Py_ssize_t dims = query.shape[0]
    cdef array out = clone(_DOUBLES, n, zero=True)
    cdef double[::1] res = out
    cdef Py_ssize_t r, i, off
    cdef double s
    with nogil:
        for r in range(n):
            s = 0.0
            off = r * dims
            for i in range(dims):
                s = s + query[i] * matrix[off + i]
            res[r] = s
    return out
