# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops: xoshiro256** streams, Box-Muller, one-sided Jacobi."""

from libc.math cimport sqrt, log, cos, sin, fabs, copysign
from libc.stdint cimport uint64_t

cdef double TWO_PI = 6.283185307179586
cdef double INV_2_53 = 1.0 / 9007199254740992.0


cdef inline uint64_t _rotl(uint64_t x, int k) nogil:
    return (x << k) | (x >> (64 - k))


cdef inline uint64_t _next(uint64_t* s) nogil:
    cdef uint64_t result = _rotl(s[1] * 5, 7) * 9
    cdef uint64_t t = s[1] << 17
    s[2] ^= s[0]
    s[3] ^= s[1]
    s[1] ^= s[2]
    s[0] ^= s[3]
    s[2] ^= t
    s[3] = _rotl(s[3], 45)
    return result


def fill_u64(uint64_t[::1] state, uint64_t[::1] out):
    cdef Py_ssize_t i
    cdef uint64_t s[4]
    for i in range(4):
        s[i] = state[i]
    for i in range(out.shape[0]):
        out[i] = _next(s)
    for i in range(4):
        state[i] = s[i]


def fill_uniform(uint64_t[::1] state, double[::1] out):
    cdef Py_ssize_t i
    cdef uint64_t s[4]
    for i in range(4):
        s[i] = state[i]
    for i in range(out.shape[0]):
        out[i] = (_next(s) >> 11) * INV_2_53
    for i in range(4):
        state[i] = s[i]


def fill_normal(uint64_t[::1] state, double[::1] out):
    """Box-Muller pairs; an odd tail still consumes a full pair."""
    cdef Py_ssize_t i = 0, n = out.shape[0]
    cdef uint64_t s[4]
    cdef double u1, u2, r, th
    for i in range(4):
        s[i] = state[i]
    i = 0
    while i < n:
        u1 = 1.0 - (_next(s) >> 11) * INV_2_53
        u2 = (_next(s) >> 11) * INV_2_53
        r = sqrt(-2.0 * log(u1))
        th = TWO_PI * u2
        out[i] = r * cos(th)
        if i + 1 < n:
            out[i + 1] = r * sin(th)
        i += 2
    for i in range(4):
        state[i] = s[i]


def jacobi_sweeps(double[:, ::1] at, double[:, ::1] vt, double tol, int max_sweeps):
    """Orthogonalise the rows of ``at`` in place, mirroring rotations in ``vt``.

    Rows of ``at`` are the columns of the matrix being decomposed. Returns
    the number of sweeps performed.
    """
    cdef Py_ssize_t n = at.shape[0], m = at.shape[1], nv = vt.shape[1]
    cdef Py_ssize_t p, q, i
    cdef int sweep, rotated
    cdef double alpha, beta, gamma, zeta, t, c, s, ap, aq
    for sweep in range(max_sweeps):
        rotated = 0
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for i in range(m):
                    alpha += at[p, i] * at[p, i]
                    beta += at[q, i] * at[q, i]
                    gamma += at[p, i] * at[q, i]
                if alpha == 0.0 or beta == 0.0:
                    continue
                if fabs(gamma) <= tol * sqrt(alpha * beta):
                    continue
                rotated += 1
                zeta = (beta - alpha) / (2.0 * gamma)
                t = copysign(1.0, zeta) / (fabs(zeta) + sqrt(1.0 + zeta * zeta))
                c = 1.0 / sqrt(1.0 + t * t)
                s = c * t
                for i in range(m):
                    ap = at[p, i]
                    aq = at[q, i]
                    at[p, i] = c * ap - s * aq
                    at[q, i] = s * ap + c * aq
                for i in range(nv):
                    ap = vt[p, i]
                    aq = vt[q, i]
                    vt[p, i] = c * ap - s * aq
                    vt[q, i] = s * ap + c * aq
        if rotated == 0:
            return sweep + 1
    return max_sweeps
