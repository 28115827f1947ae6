# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops. Semantics mirror ``_pykernels`` exactly."""
import numpy as np
cimport numpy as cnp
from libc.math cimport log
from libc.stdint cimport uint64_t

cnp.import_array()


cdef extern from *:
    """
    /* branchless SWAR count: without -mpopcnt the builtin becomes a libgcc call */
    static inline int dmh_popcount64(unsigned long long x) {
        x = x - ((x >> 1) & 0x5555555555555555ULL);
        x = (x & 0x3333333333333333ULL) + ((x >> 2) & 0x3333333333333333ULL);
        x = (x + (x >> 4)) & 0x0F0F0F0F0F0F0F0FULL;
        return (int)((x * 0x0101010101010101ULL) >> 56);
    }
    """
    int dmh_popcount64(unsigned long long x) nogil


def gauss_seidel_sweep(double[:, ::1] Y, const double[:, ::1] base,
                       const cnp.int64_t[:, ::1] nbr, const double[:, ::1] W,
                       double alpha, double denom):
    cdef Py_ssize_t n = Y.shape[0], d = Y.shape[1], k = nbr.shape[1]
    cdef Py_ssize_t i, j, t
    cdef cnp.int64_t m
    cdef double w
    cdef double[::1] acc = np.empty(d, dtype=np.float64)
    with nogil:
        for i in range(n):
            for t in range(d):
                acc[t] = 0.0
            for j in range(k):
                m = nbr[i, j]
                w = W[i, j]
                for t in range(d):
                    acc[t] += w * Y[m, t]
            for t in range(d):
                Y[i, t] = (base[i, t] + alpha * acc[t]) / denom


def plogp_sum(const double[:, ::1] P):
    cdef Py_ssize_t n = P.shape[0], i, j
    cdef double acc = 0.0, pij
    with nogil:
        for i in range(n):
            for j in range(n):
                pij = P[i, j]
                if i != j and pij > 0.0:
                    acc += pij * log(pij)
    return acc


def gbe_loss_grad(const double[:, ::1] P, const double[:, ::1] H, double gamma,
                  bint want_grad=True, plogp=None):
    cdef Py_ssize_t n = H.shape[0], c = H.shape[1]
    cdef Py_ssize_t i, j, t
    cdef double diff, kij, z = 0.0, cross = 0.0, quant = 0.0, psym, coef, s, ptot = 0.0
    cdef double ent = plogp_sum(P) if plogp is None else plogp
    cdef Py_ssize_t nk = n if want_grad else 1
    cdef cnp.ndarray[cnp.float64_t, ndim=2] Karr = np.empty((nk, nk), dtype=np.float64)
    cdef double[:, ::1] K = Karr
    cdef double[:, ::1] G
    grad = None
    with nogil:
        for i in range(n):
            for j in range(i + 1, n):
                kij = 0.0
                for t in range(c):
                    diff = H[i, t] - H[j, t]
                    kij += diff * diff
                kij = 1.0 / (1.0 + 0.25 * kij)
                if want_grad:
                    K[i, j] = kij
                z += 2.0 * kij
                psym = P[i, j] + P[j, i]
                ptot += psym
                if psym > 0.0:
                    cross += psym * log(kij)
        for i in range(n):
            for t in range(c):
                s = 1.0 if H[i, t] > 0.0 else -1.0
                quant += (H[i, t] - s) * (H[i, t] - s)
    # KL = sum P log P - sum P log K + (sum P) log z
    loss = ent - cross + ptot * log(z) + gamma * quant
    if want_grad:
        grad = np.zeros((n, c), dtype=np.float64)
        G = grad
        with nogil:
            for i in range(n):
                for j in range(i + 1, n):
                    kij = K[i, j]
                    coef = (P[i, j] + P[j, i] - 2.0 * kij / z) * kij * 0.5
                    for t in range(c):
                        diff = coef * (H[i, t] - H[j, t])
                        G[i, t] += diff
                        G[j, t] -= diff
            for i in range(n):
                for t in range(c):
                    s = 1.0 if H[i, t] > 0.0 else -1.0
                    G[i, t] += 2.0 * gamma * (H[i, t] - s)
    return loss, grad


def hamming_packed(const uint64_t[:, ::1] A, const uint64_t[:, ::1] B):
    cdef Py_ssize_t m = A.shape[0], n = B.shape[0], w = A.shape[1]
    cdef Py_ssize_t i, j, t
    cdef int acc
    out = np.empty((m, n), dtype=np.int32)
    cdef int[:, ::1] O = out
    with nogil:
        for i in range(m):
            for j in range(n):
                acc = 0
                for t in range(w):
                    acc += dmh_popcount64(A[i, t] ^ B[j, t])
                O[i, j] = acc
    return out
