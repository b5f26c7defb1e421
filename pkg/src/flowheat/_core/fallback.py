"""Pure-numpy implementations of the hot tridiagonal kernels.

Array convention (all length n): ``lower[i]`` multiplies ``x[i-1]`` and
``upper[i]`` multiplies ``x[i+1]``; ``lower[0]`` and ``upper[n-1]`` are ignored.
"""

import numpy as np
from scipy.linalg import solve_banded


def tridiag_matvec(lower, diag, upper, x):
    y = diag * x
    y[1:] += lower[1:] * x[:-1]
    y[:-1] += upper[:-1] * x[1:]
    return y


def tridiag_solve(lower, diag, upper, rhs):
    n = diag.shape[0]
    ab = np.zeros((3, n))
    ab[0, 1:] = upper[:-1]
    ab[1, :] = diag
    ab[2, :-1] = lower[1:]
    return solve_banded((1, 1), ab, rhs)


def cn_sweep(lower, diag, upper, u, dt, nsteps):
    """Repeated Crank-Nicolson steps u <- (I - dt/2 A)^-1 (I + dt/2 A) u
    for a frozen tridiagonal operator A."""
    half = 0.5 * dt
    lo_p, di_p, up_p = half * lower, 1.0 + half * diag, half * upper
    n = diag.shape[0]
    ab = np.zeros((3, n))
    ab[0, 1:] = -half * upper[:-1]
    ab[1, :] = 1.0 - half * diag
    ab[2, :-1] = -half * lower[1:]
    out = np.array(u, dtype=float, copy=True)
    for _ in range(nsteps):
        rhs = tridiag_matvec(lo_p, di_p, up_p, out)
        out = solve_banded((1, 1), ab, rhs)
    return out
