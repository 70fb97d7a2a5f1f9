# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled ensemble step kernel.

Fuses the multiply-by-exponential and translate-by-dt stages of one
simulation step into a single pass per path, avoiding the two full-ensemble
temporaries the numpy fallback allocates. Branch semantics are identical to
bondlab._kernels_py.step_exp_shift.
"""

from libc.math cimport exp
from libc.stdlib cimport free, malloc

import numpy as np

BACKEND = "compiled"


def step_exp_shift(
    double[:, ::1] states,
    double[:, ::1] expo,
    double[::1] fill,
    int k0,
    double frac,
    double[:, ::1] out,
):
    """See bondlab._kernels_py.step_exp_shift for the contract."""
    cdef Py_ssize_t n_paths = states.shape[0]
    cdef Py_ssize_t n = states.shape[1]
    cdef Py_ssize_t p, j, m
    cdef double w0 = 1.0 - frac
    cdef double fv
    cdef double* tmp = <double*> malloc(n * sizeof(double))
    if tmp == NULL:
        raise MemoryError("kernel scratch row allocation failed")
    try:
        with nogil:
            for p in range(n_paths):
                fv = fill[p]
                for j in range(n):
                    tmp[j] = states[p, j] * exp(expo[p, j])
                if k0 >= n:
                    for j in range(n):
                        out[p, j] = fv
                elif frac == 0.0:
                    m = n - k0
                    for j in range(m):
                        out[p, j] = tmp[j + k0]
                    for j in range(m, n):
                        out[p, j] = fv
                else:
                    m = n - k0 - 1
                    for j in range(m):
                        out[p, j] = w0 * tmp[j + k0] + frac * tmp[j + k0 + 1]
                    for j in range(m, n):
                        out[p, j] = fv
    finally:
        free(tmp)
