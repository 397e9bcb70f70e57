"""Time the compiled kernels against the pure-Python fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Each row reports the best wall time of ``--repeat`` runs and checks that both
backends produced the same bytes (random streams) or the same spectrum (SVD).
"""

import argparse
import sys
import time

import numpy as np

from mmcompress.numkit import _fallback
from mmcompress.numkit._backend import COMPILED


def _best(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def _fill_case(mod, name: str, n: int, dtype):
    def run():
        state = np.array([1, 2, 3, 4], dtype=np.uint64)
        out = np.empty(n, dtype=dtype)
        getattr(mod, name)(state, out)
        return out

    return run


def _jacobi_case(mod, m: np.ndarray):
    def run():
        at = np.ascontiguousarray(m.T.copy())
        vt = np.eye(m.shape[1])
        mod.jacobi_sweeps(at, vt, 1e-15, 60)
        return np.sort(np.linalg.norm(at, axis=1))[::-1]

    return run


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if not COMPILED:
        print("compiled kernels are not built; run `pip install -e . --no-build-isolation` first")
        return 1
    from mmcompress.numkit import _kernels

    cases = [(f"{name} n={n}", name, n, dt) for name, dt in (("fill_u64", np.uint64), ("fill_uniform", np.float64), ("fill_normal", np.float64)) for n in (1_000, 100_000)]
    rng = np.random.default_rng(0)
    mats = [(f"jacobi_sweeps {s}x{s}", rng.standard_normal((s, s))) for s in (16, 32, 64)]

    print(f"{'kernel':<24} {'compiled_ms':>12} {'python_ms':>12} {'speedup':>9}  agree")
    for label, name, n, dt in cases:
        a, b = _fill_case(_kernels, name, n, dt), _fill_case(_fallback, name, n, dt)
        agree = a().tobytes() == b().tobytes()
        tc, tp = _best(a, args.repeat), _best(b, max(1, args.repeat // 2))
        print(f"{label:<24} {tc * 1e3:12.3f} {tp * 1e3:12.3f} {tp / tc:9.1f}  {agree}")
    for label, m in mats:
        a, b = _jacobi_case(_kernels, m), _jacobi_case(_fallback, m)
        agree = bool(np.allclose(a(), b(), rtol=1e-12, atol=1e-12))
        tc, tp = _best(a, args.repeat), _best(b, 1)
        print(f"{label:<24} {tc * 1e3:12.3f} {tp * 1e3:12.3f} {tp / tc:9.1f}  {agree}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
