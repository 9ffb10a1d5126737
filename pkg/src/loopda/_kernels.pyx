# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled stepping kernels for the three-variable models.

Signatures and return conventions match ``loopda._pykernels``.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport cbrt, pow, fabs, isfinite

cnp.import_array()

cdef enum:
    LORENZ63 = 0
    EULER = 0


cdef inline double _h(double x) noexcept nogil:
    if x >= 1.0:
        return cbrt(x)
    return (44.0 * x * x - 55.0 * x * x * x + 20.0 * x * x * x * x) / 9.0


cdef inline double _hp(double x) noexcept nogil:
    if x >= 1.0:
        return pow(x, -2.0 / 3.0) / 3.0
    return (88.0 * x - 165.0 * x * x + 80.0 * x * x * x) / 9.0


cdef inline double _sign(double x) noexcept nogil:
    if x > 0.0:
        return 1.0
    if x < 0.0:
        return -1.0
    return 0.0


cdef inline void _rhs(int model, double a, double b, double c,
                      double* s, double* out) noexcept nogil:
    cdef double x = s[0], y = s[1], z = s[2], damp
    if model == LORENZ63:
        out[0] = a * (y - x)
        out[1] = b * x - y - x * z
        out[2] = x * y - c * z
    else:
        damp = 1.0 + c * _h(fabs(x))
        out[0] = a * (y - x)
        out[1] = b * x - y * damp - x * z
        out[2] = x * y - z * damp


cdef inline void _jac(int model, double a, double b, double c,
                      double* s, double* J) noexcept nogil:
    # row-major 3x3
    cdef double x = s[0], y = s[1], z = s[2], damp, g
    if model == LORENZ63:
        J[0] = -a; J[1] = a; J[2] = 0.0
        J[3] = b - z; J[4] = -1.0; J[5] = -x
        J[6] = y; J[7] = x; J[8] = -c
    else:
        damp = 1.0 + c * _h(fabs(x))
        g = c * _sign(x) * _hp(fabs(x))
        J[0] = -a; J[1] = a; J[2] = 0.0
        J[3] = b - y * g - z; J[4] = -damp; J[5] = -x
        J[6] = y - z * g; J[7] = x; J[8] = -damp


cdef inline bint _step(int model, double a, double b, double c, double* s,
                       double dt, int scheme) noexcept nogil:
    cdef double k1[3]
    cdef double k2[3]
    cdef double tmp[3]
    cdef int j
    _rhs(model, a, b, c, s, k1)
    if scheme == EULER:
        for j in range(3):
            s[j] = s[j] + dt * k1[j]
    else:
        for j in range(3):
            tmp[j] = s[j] + dt * k1[j]
        _rhs(model, a, b, c, tmp, k2)
        for j in range(3):
            s[j] = s[j] + 0.5 * dt * (k1[j] + k2[j])
    return isfinite(s[0]) and isfinite(s[1]) and isfinite(s[2])


def trajectory_batch(int model, P, X0, double dt, Py_ssize_t nsteps, int scheme):
    cdef double[:, ::1] pv = np.ascontiguousarray(P, dtype=np.float64)
    cdef double[:, ::1] x0 = np.ascontiguousarray(X0, dtype=np.float64)
    cdef Py_ssize_t k = x0.shape[0], m, i
    cdef cnp.ndarray[cnp.float64_t, ndim=3] states = np.empty((nsteps + 1, k, 3))
    cdef double[:, :, ::1] sv = states
    cdef double s[3]
    cdef int j
    cdef Py_ssize_t bad = -1
    with nogil:
        for m in range(k):
            for j in range(3):
                s[j] = x0[m, j]
                sv[0, m, j] = s[j]
            for i in range(1, nsteps + 1):
                if bad >= 0 and i > bad:
                    break
                if not _step(model, pv[m, 0], pv[m, 1], pv[m, 2], s, dt, scheme):
                    bad = i
                for j in range(3):
                    sv[i, m, j] = s[j]
    if bad >= 0:
        return states[:bad + 1], bad
    return states, -1


def advance_batch(int model, P, X0, double dt, Py_ssize_t nsteps, int scheme):
    cdef double[:, ::1] pv = np.ascontiguousarray(P, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] X = np.array(X0, dtype=np.float64, order="C", copy=True)
    cdef double[:, ::1] xv = X
    cdef Py_ssize_t k = xv.shape[0], m, i
    cdef Py_ssize_t bad = -1
    with nogil:
        for m in range(k):
            for i in range(1, nsteps + 1):
                if not _step(model, pv[m, 0], pv[m, 1], pv[m, 2], &xv[m, 0], dt, scheme):
                    if bad < 0 or i < bad:
                        bad = i
                    break
    return X, bad


def tlm(int model, p, x0, double dt, Py_ssize_t nsteps, int scheme):
    cdef double[::1] pv = np.ascontiguousarray(p, dtype=np.float64)
    cdef double a = pv[0], b = pv[1], c = pv[2]
    cdef double s[3]
    cdef double k1[3]
    cdef double k2[3]
    cdef double xe[3]
    cdef double J1[9]
    cdef double J2[9]
    cdef double M[9]
    cdef double A[9]
    cdef double Lnew[9]
    cdef double acc
    cdef cnp.ndarray[cnp.float64_t, ndim=2] L = np.eye(3)
    cdef double[:, ::1] lv = L
    cdef Py_ssize_t i
    cdef int r, q, t
    cdef bint ok
    x = np.ascontiguousarray(x0, dtype=np.float64)
    for r in range(3):
        s[r] = x[r]
    with nogil:
        for i in range(1, nsteps + 1):
            _jac(model, a, b, c, s, J1)
            _rhs(model, a, b, c, s, k1)
            if scheme == EULER:
                for r in range(9):
                    A[r] = dt * J1[r]
                for r in range(3):
                    A[4 * r] += 1.0
                    s[r] = s[r] + dt * k1[r]
            else:
                for r in range(3):
                    xe[r] = s[r] + dt * k1[r]
                _jac(model, a, b, c, xe, J2)
                _rhs(model, a, b, c, xe, k2)
                # M = I + dt * J1
                for r in range(9):
                    M[r] = dt * J1[r]
                for r in range(3):
                    M[4 * r] += 1.0
                # A = I + dt/2 * (J1 + J2 @ M)
                for r in range(3):
                    for q in range(3):
                        acc = 0.0
                        for t in range(3):
                            acc = acc + J2[3 * r + t] * M[3 * t + q]
                        A[3 * r + q] = 0.5 * dt * (J1[3 * r + q] + acc)
                    A[4 * r] += 1.0
                for r in range(3):
                    s[r] = s[r] + 0.5 * dt * (k1[r] + k2[r])
            ok = isfinite(s[0]) and isfinite(s[1]) and isfinite(s[2])
            for r in range(3):
                for q in range(3):
                    acc = 0.0
                    for t in range(3):
                        acc = acc + A[3 * r + t] * lv[t, q]
                    Lnew[3 * r + q] = acc
                    if not isfinite(acc):
                        ok = False
            for r in range(3):
                for q in range(3):
                    lv[r, q] = Lnew[3 * r + q]
            if not ok:
                with gil:
                    return np.array([s[0], s[1], s[2]]), L, i
    return np.array([s[0], s[1], s[2]]), L, -1
