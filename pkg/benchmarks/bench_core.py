"""Benchmark the compiled tridiagonal core against the numpy fallback.

Usage: python benchmarks/bench_core.py [grid sizes ...]
"""

import sys
import time

import numpy as np

from flowheat import _core
from flowheat._core import fallback


def _time(fn, *args, repeat=200):
    best = float("inf")
    for _ in range(5):
        t0 = time.perf_counter()
        for _ in range(repeat):
            fn(*args)
        best = min(best, (time.perf_counter() - t0) / repeat)
    return best


def run(sizes):
    compiled = None
    if _core.BACKEND == "compiled":
        from flowheat._core import _speedups as compiled  # noqa: F401
    print(f"active backend: {_core.BACKEND}")
    header = f"{'n':>6} {'kernel':<12} {'numpy':>12} {'compiled':>12} {'speedup':>9}"
    print(header)
    print("-" * len(header))
    rng = np.random.default_rng(0)
    for n in sizes:
        lo = rng.normal(size=n) * 0.1
        di = rng.normal(size=n) - 4.0
        up = rng.normal(size=n) * 0.1
        x = rng.random(n)
        rows = [
            ("matvec", (lo, di, up, x), 500),
            ("solve", (lo, di, up, x), 500),
            ("cn_sweep(50)", (lo, di, up, x, 1e-4, 50), 20),
        ]
        for name, args, repeat in rows:
            fb_fn = getattr(fallback, "tridiag_" + name if "sweep" not in name else "cn_sweep")
            t_fb = _time(fb_fn, *args, repeat=repeat)
            if compiled is not None:
                c_fn = getattr(
                    compiled, "tridiag_" + name if "sweep" not in name else "cn_sweep"
                )
                t_c = _time(c_fn, *args, repeat=repeat)
                print(
                    f"{n:>6} {name:<12} {t_fb*1e6:>10.1f}us {t_c*1e6:>10.1f}us "
                    f"{t_fb/t_c:>8.1f}x"
                )
            else:
                print(f"{n:>6} {name:<12} {t_fb*1e6:>10.1f}us {'-':>12} {'-':>9}")


if __name__ == "__main__":
    sizes = [int(a) for a in sys.argv[1:]] or [257, 1025, 4097]
    run(sizes)
