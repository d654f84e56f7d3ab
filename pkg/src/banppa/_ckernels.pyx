# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled per-event kernel; same contract as ``_kernels_py.event_terms``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, floor

cnp.import_array()

cdef double EULER = 0.57721566490153286060651209


cdef inline void _herm(double s, const double[::1] y, const double[::1] d, double h,
                       Py_ssize_t n, double* val, double* der) noexcept nogil:
    cdef Py_ssize_t i = <Py_ssize_t>floor(s)
    if i < 0:
        i = 0
    elif i > n - 1:
        i = n - 1
    cdef double t = s - i
    cdef double t2 = t * t
    cdef double t3 = t2 * t
    cdef double y0 = y[i]
    cdef double y1 = y[i + 1]
    cdef double m0 = d[i] * h
    cdef double m1 = d[i + 1] * h
    val[0] = (2 * t3 - 3 * t2 + 1) * y0 + (t3 - 2 * t2 + t) * m0 + (-2 * t3 + 3 * t2) * y1 + (t3 - t2) * m1
    der[0] = ((6 * t2 - 6 * t) * y0 + (3 * t2 - 4 * t + 1) * m0
              + (6 * t - 6 * t2) * y1 + (3 * t2 - 2 * t) * m1) / h


def event_terms(double[:, ::1] mean, double[:, ::1] var, double[:, ::1] logw, tbl):
    cdef Py_ssize_t N = mean.shape[0]
    cdef Py_ssize_t K = mean.shape[1]
    cdef double z1 = tbl.z1
    cdef double zmax = tbl.zmax
    cdef Py_ssize_t n1 = tbl.n1
    cdef Py_ssize_t n2 = tbl.n2
    cdef double h1 = tbl.h1
    cdef double hl = tbl.hl
    cdef double logz1 = log(z1)
    cdef const double[::1] y1 = np.ascontiguousarray(tbl.y1, dtype=np.float64)
    cdef const double[::1] d1 = np.ascontiguousarray(tbl.d1, dtype=np.float64)
    cdef const double[::1] y2 = np.ascontiguousarray(tbl.y2, dtype=np.float64)
    cdef const double[::1] d2 = np.ascontiguousarray(tbl.d2, dtype=np.float64)

    lse_a = np.empty(N)
    resp_a = np.empty((N, K))
    gmean_a = np.empty((N, K))
    gvar_a = np.empty((N, K))
    elog_a = np.empty((N, K))
    cdef double[::1] lse = lse_a
    cdef double[:, ::1] resp = resp_a
    cdef double[:, ::1] gmean = gmean_a
    cdef double[:, ::1] gvar = gvar_a
    cdef double[:, ::1] elog = elog_a

    cdef Py_ssize_t n, k
    cdef double m, v, z, g, dg, a, amax, s, r
    with nogil:
        for n in range(N):
            amax = -1e308
            for k in range(K):
                m = mean[n, k]
                v = var[n, k]
                if v < 1e-12:
                    v = 1e-12
                z = m * m / (2 * v)
                if z <= z1:
                    _herm(z / h1, y1, d1, h1, n1, &g, &dg)
                elif z >= zmax:
                    g = -(log(4 * z) + EULER)
                    dg = -1.0 / z
                else:
                    _herm((log(z) - logz1) / hl, y2, d2, hl, n2, &g, &dg)
                    dg = dg / z
                elog[n, k] = -g - EULER + log(0.5 * v)
                # stash derivative pieces; weighted by resp below
                gmean[n, k] = -dg * m / v
                gvar[n, k] = dg * z / v + 1.0 / v
                a = logw[n, k] + elog[n, k]
                resp[n, k] = a
                if a > amax:
                    amax = a
            s = 0.0
            for k in range(K):
                r = exp(resp[n, k] - amax)
                resp[n, k] = r
                s += r
            lse[n] = amax + log(s)
            for k in range(K):
                r = resp[n, k] / s
                resp[n, k] = r
                gmean[n, k] *= r
                gvar[n, k] *= r
    return lse_a, resp_a, gmean_a, gvar_a, elog_a
