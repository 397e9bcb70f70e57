"""Singular value decomposition by one-sided (Hestenes) Jacobi rotations."""

from __future__ import annotations

import numpy as np

from ._backend import kernels

_TOL = 1e-15
_MAX_SWEEPS = 80


def _complete_basis(u: np.ndarray, filled: np.ndarray) -> np.ndarray:
    """Fill the columns of ``u`` not marked in ``filled`` with an orthonormal completion."""
    m, k = u.shape
    basis = [u[:, j] for j in range(k) if filled[j]]
    e = 0
    for j in range(k):
        if filled[j]:
            continue
        while True:
            v = np.zeros(m)
            v[e % m] = 1.0
            e += 1
            for _ in range(2):
                for b in basis:
                    v -= (b @ v) * b
            nv = np.linalg.norm(v)
            if nv > 1e-8:
                break
        v /= nv
        u[:, j] = v
        basis.append(v)
    return u


def svd(m) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD ``m = U @ diag(S) @ V.T`` with ``S`` descending.

    ``U`` is ``[r, k]``, ``S`` is ``[k]`` and ``V`` is ``[c, k]`` where
    ``k = min(r, c)``.
    """
    a = np.asarray(getattr(m, "data", m), dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"svd expects a 2-D matrix, got shape {a.shape}")
    if a.shape[0] < a.shape[1]:
        u, s, v = svd(a.T)
        return v, s, u
    rows, cols = a.shape
    at = np.array(a.T, order="C")  # always a copy: the sweep works in place
    vt = np.eye(cols)
    kernels.jacobi_sweeps(at, vt, _TOL, _MAX_SWEEPS)
    s = np.sqrt((at * at).sum(axis=1))
    order = np.argsort(-s, kind="stable")
    s = s[order]
    at = at[order]
    vt = vt[order]
    scale = s[0] if s.size and s[0] > 0 else 1.0
    filled = s > scale * 1e-13 * max(rows, cols)
    u = np.zeros((rows, cols))
    u[:, filled] = (at[filled] / s[filled, None]).T
    u = _complete_basis(u, filled)
    return u, s, vt.T.copy()


def low_rank_reconstruct(m, r: int) -> np.ndarray:
    """Best rank-``r`` approximation under the Frobenius norm."""
    a = np.asarray(getattr(m, "data", m), dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"low_rank_reconstruct expects a 2-D matrix, got shape {a.shape}")
    k = min(a.shape)
    if not 1 <= r <= k:
        raise ValueError(f"rank {r} outside [1, {k}]")
    if r == k:
        # full rank keeps every component; skip the round trip
        return a.copy()
    u, s, v = svd(a)
    return (u[:, :r] * s[:r]) @ v[:, :r].T
