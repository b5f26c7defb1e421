# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled tridiagonal kernels (Thomas algorithm and fused CN sweeps).

Same array convention as the fallback: lower[i] multiplies x[i-1], upper[i]
multiplies x[i+1]; lower[0] / upper[n-1] are ignored.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef void _thomas(double[::1] lower, double[::1] diag, double[::1] upper,
                  double[::1] rhs, double[::1] out, double[::1] cp,
                  double[::1] dp) nogil:
    cdef Py_ssize_t n = diag.shape[0]
    cdef Py_ssize_t i
    cdef double m
    cp[0] = upper[0] / diag[0]
    dp[0] = rhs[0] / diag[0]
    for i in range(1, n):
        m = diag[i] - lower[i] * cp[i - 1]
        cp[i] = upper[i] / m
        dp[i] = (rhs[i] - lower[i] * dp[i - 1]) / m
    out[n - 1] = dp[n - 1]
    for i in range(n - 2, -1, -1):
        out[i] = dp[i] - cp[i] * out[i + 1]


def tridiag_solve(double[::1] lower, double[::1] diag, double[::1] upper,
                  double[::1] rhs):
    cdef Py_ssize_t n = diag.shape[0]
    out_arr = np.empty(n)
    cp_arr = np.empty(n)
    dp_arr = np.empty(n)
    cdef double[::1] out = out_arr
    cdef double[::1] cp = cp_arr
    cdef double[::1] dp = dp_arr
    with nogil:
        _thomas(lower, diag, upper, rhs, out, cp, dp)
    return out_arr


def tridiag_matvec(double[::1] lower, double[::1] diag, double[::1] upper,
                   double[::1] x):
    cdef Py_ssize_t n = diag.shape[0]
    out_arr = np.empty(n)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i
    with nogil:
        out[0] = diag[0] * x[0] + upper[0] * x[1]
        for i in range(1, n - 1):
            out[i] = lower[i] * x[i - 1] + diag[i] * x[i] + upper[i] * x[i + 1]
        out[n - 1] = lower[n - 1] * x[n - 2] + diag[n - 1] * x[n - 1]
    return out_arr


def cn_sweep(double[::1] lower, double[::1] diag, double[::1] upper,
             double[::1] u, double dt, Py_ssize_t nsteps):
    cdef Py_ssize_t n = diag.shape[0]
    cdef double half = 0.5 * dt
    out_arr = np.array(u, dtype=float, copy=True)
    rhs_arr = np.empty(n)
    lo_m = np.empty(n)
    di_m = np.empty(n)
    up_m = np.empty(n)
    cp_arr = np.empty(n)
    dp_arr = np.empty(n)
    cdef double[::1] out = out_arr
    cdef double[::1] rhs = rhs_arr
    cdef double[::1] lom = lo_m
    cdef double[::1] dim = di_m
    cdef double[::1] upm = up_m
    cdef double[::1] cp = cp_arr
    cdef double[::1] dp = dp_arr
    cdef Py_ssize_t i, k
    with nogil:
        for i in range(n):
            lom[i] = -half * lower[i]
            dim[i] = 1.0 - half * diag[i]
            upm[i] = -half * upper[i]
        for k in range(nsteps):
            rhs[0] = (1.0 + half * diag[0]) * out[0] + half * upper[0] * out[1]
            for i in range(1, n - 1):
                rhs[i] = (half * lower[i] * out[i - 1]
                          + (1.0 + half * diag[i]) * out[i]
                          + half * upper[i] * out[i + 1])
            rhs[n - 1] = (half * lower[n - 1] * out[n - 2]
                          + (1.0 + half * diag[n - 1]) * out[n - 1])
            _thomas(lom, dim, upm, rhs, out, cp, dp)
    return out_arr
