# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled similarity kernels; see ``_pykernels`` for the reference semantics."""
from array import array

from libc.math cimport sqrt
from libc.stdint cimport uint64_t

BACKEND = "cython"

cdef uint64_t FNV_OFFSET = 0xCBF29CE484222325ULL
cdef uint64_t FNV_PRIME = 0x100000001B3ULL


cdef inline uint64_t _fnv1a(bytes data):
    cdef uint64_t h = FNV_OFFSET
    cdef const unsigned char[:] view = data
    cdef Py_ssize_t i
    for i in range(view.shape[0]):
        h ^= view[i]
        h *= FNV_PRIME
    return h


def fingerprint(str text):
    return _fnv1a(text.encode("utf-8"))


def fingerprints(shingles):
    return array("Q", sorted({_fnv1a((<str>s).encode("utf-8")) for s in shingles}))


cdef double _jaccard(const uint64_t[:] a, const uint64_t[:] b) noexcept nogil:
    cdef Py_ssize_t na = a.shape[0], nb = b.shape[0]
    cdef Py_ssize_t i = 0, j = 0, inter = 0
    if na == 0 and nb == 0:
        return 0.0
    while i < na and j < nb:
        if a[i] == b[j]:
            inter += 1
            i += 1
            j += 1
        elif a[i] < b[j]:
            i += 1
        else:
            j += 1
    return <double>inter / <double>(na + nb - inter)


cdef double _dot(const double[:] a, const double[:] b) noexcept nogil:
    cdef double s = 0.0
    cdef Py_ssize_t i
    for i in range(a.shape[0]):
        s += a[i] * b[i]
    return s


def jaccard_sorted(a, b):
    if len(a) == 0 and len(b) == 0:
        return 0.0
    return _jaccard(_as_q(a), _as_q(b))


def dot(a, b):
    return _dot(_as_d(a), _as_d(b))


cdef inline object _as_q(object seq):
    if isinstance(seq, array) and seq.typecode == "Q":
        return seq
    return array("Q", seq)


cdef inline object _as_d(object seq):
    if isinstance(seq, array) and seq.typecode == "d":
        return seq
    return array("d", seq)


def hashed_embedding(shingles, int dim):
    cdef double[:] acc
    out = array("d", bytes(8 * dim))
    acc = out
    cdef uint64_t h
    cdef Py_ssize_t idx, i
    cdef double sq = 0.0, norm
    for s in shingles:
        h = _fnv1a((<str>s).encode("utf-8"))
        idx = <Py_ssize_t>(h % <uint64_t>dim)
        if (h >> 32) & 1:
            acc[idx] -= 1.0
        else:
            acc[idx] += 1.0
    for i in range(dim):
        sq += acc[i] * acc[i]
    if sq == 0.0:
        return out
    norm = sqrt(sq)
    for i in range(dim):
        acc[i] = acc[i] / norm
    return out


cdef double _pair(const uint64_t[:] fa, const uint64_t[:] fb,
                  const double[:] ea, const double[:] eb,
                  const uint64_t[:] ra, const uint64_t[:] rb,
                  double alpha, double beta, double gamma,
                  double err_weight) noexcept nogil:
    cdef double sparse = _jaccard(fa, fb)
    cdef double emb = _dot(ea, eb)
    cdef double err
    if emb < 0.0:
        emb = 0.0
    if ra.shape[0] == 0 and rb.shape[0] == 0:
        err = 0.0
    else:
        err = err_weight * _jaccard(ra, rb)
        if err > 1.0:
            err = 1.0
    return alpha * sparse + beta * emb + gamma * err


def pair_weight(fa, fb, ea, eb, ra, rb,
                double alpha, double beta, double gamma, double err_weight):
    return _pair(_as_q(fa), _as_q(fb), _as_d(ea), _as_d(eb), _as_q(ra), _as_q(rb),
                 alpha, beta, gamma, err_weight)


def weights_against(fa, ea, ra, others,
                    double alpha, double beta, double gamma, double err_weight):
    cdef const uint64_t[:] mfa = _as_q(fa)
    cdef const double[:] mea = _as_d(ea)
    cdef const uint64_t[:] mra = _as_q(ra)
    out = []
    for fb, eb, rb in others:
        out.append(_pair(mfa, _as_q(fb), mea, _as_d(eb), mra, _as_q(rb),
                         alpha, beta, gamma, err_weight))
    return out
