"""Pure-Python twins of the compiled kernels in ``_kernels.pyx``.

The RNG routines are bit-identical to the compiled ones. The Jacobi sweep
uses numpy dot products, so its rounding differs in the last bits.
"""

from __future__ import annotations

import math

import numpy as np

_MASK = 0xFFFFFFFFFFFFFFFF
_TWO_PI = 6.283185307179586
_INV_2_53 = 1.0 / 9007199254740992.0


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK


def _stream(state: np.ndarray):
    s0, s1, s2, s3 = (int(v) for v in state)
    try:
        while True:
            result = (_rotl((s1 * 5) & _MASK, 7) * 9) & _MASK
            t = (s1 << 17) & _MASK
            s2 ^= s0
            s3 ^= s1
            s1 ^= s2
            s0 ^= s3
            s2 ^= t
            s3 = _rotl(s3, 45)
            yield result
    finally:
        state[:] = np.array([s0, s1, s2, s3], dtype=np.uint64)


def fill_u64(state: np.ndarray, out: np.ndarray) -> None:
    gen = _stream(state)
    for i in range(out.shape[0]):
        out[i] = next(gen)
    gen.close()


def fill_uniform(state: np.ndarray, out: np.ndarray) -> None:
    gen = _stream(state)
    for i in range(out.shape[0]):
        out[i] = (next(gen) >> 11) * _INV_2_53
    gen.close()


def fill_normal(state: np.ndarray, out: np.ndarray) -> None:
    gen = _stream(state)
    n = out.shape[0]
    i = 0
    while i < n:
        u1 = 1.0 - (next(gen) >> 11) * _INV_2_53
        u2 = (next(gen) >> 11) * _INV_2_53
        r = math.sqrt(-2.0 * math.log(u1))
        th = _TWO_PI * u2
        out[i] = r * math.cos(th)
        if i + 1 < n:
            out[i + 1] = r * math.sin(th)
        i += 2
    gen.close()


def jacobi_sweeps(at: np.ndarray, vt: np.ndarray, tol: float, max_sweeps: int) -> int:
    n = at.shape[0]
    for sweep in range(max_sweeps):
        rotated = 0
        for p in range(n - 1):
            for q in range(p + 1, n):
                ap, aq = at[p], at[q]
                alpha = float(ap @ ap)
                beta = float(aq @ aq)
                gamma = float(ap @ aq)
                if alpha == 0.0 or beta == 0.0:
                    continue
                if abs(gamma) <= tol * math.sqrt(alpha * beta):
                    continue
                rotated += 1
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                at[p], at[q] = c * ap - s * aq, s * ap + c * aq
                vp, vq = vt[p], vt[q]
                vt[p], vt[q] = c * vp - s * vq, s * vp + c * vq
        if rotated == 0:
            return sweep + 1
    return max_sweeps
