# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled direct-summation kernel for the augmented Poisson field.

Mirrors :func:`pfjm._field_py.field_batch`; see that function for the contract.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log

cnp.import_array()


def field_batch(const double[:, ::1] X, const double[::1] r, const double[:, ::1] Y,
                const double[::1] logw, int D):
    cdef Py_ssize_t P = X.shape[0]
    cdef Py_ssize_t N = X.shape[1]
    cdef Py_ssize_t M = Y.shape[0]
    cdef double half_power = 0.5 * (N + D)

    ex_np = np.zeros((P, N), dtype=np.float64)
    er_np = np.zeros(P, dtype=np.float64)
    scale_np = np.zeros(P, dtype=np.float64)
    logmag_np = np.empty(M, dtype=np.float64)
    cdef double[:, ::1] ex = ex_np
    cdef double[::1] er = er_np
    cdef double[::1] scale = scale_np
    cdef double[::1] logmag = logmag_np

    cdef Py_ssize_t p, i, j
    cdef double d2, diff, m, s, rp, total

    with nogil:
        for p in range(P):
            rp = r[p]
            m = -1e300
            for i in range(M):
                d2 = rp * rp
                for j in range(N):
                    diff = X[p, j] - Y[i, j]
                    d2 = d2 + diff * diff
                logmag[i] = logw[i] - half_power * log(d2)
                if logmag[i] > m:
                    m = logmag[i]
            total = 0.0
            for i in range(M):
                s = exp(logmag[i] - m)
                total = total + s
                for j in range(N):
                    ex[p, j] = ex[p, j] + s * (X[p, j] - Y[i, j])
            er[p] = rp * total
            scale[p] = m
    return ex_np, er_np, scale_np
