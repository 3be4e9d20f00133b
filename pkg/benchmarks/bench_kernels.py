"""Time the compiled kernel lane against the pure-numpy fallback.

Both lanes share the flat-array contract, so each kernel is timed on the
same preallocated contiguous buffers; the table reports median wall time
per call and the speedup of the compiled lane. Run from a built tree:

    python3 benchmarks/bench_kernels.py --sizes 1e3,1e5,1e6 --repeats 200
"""
import argparse
import time

import numpy as np

from d2c.tensorcore.kernels import pybackend

try:
    from d2c.tensorcore.kernels import _fastcore
except ImportError:
    _fastcore = None


def _median_time(fn, repeats):
    fn()                                     # warm up caches / lazy init
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def _cases(n, rng):
    x = rng.standard_normal(n).astype(np.float32)
    gy = rng.standard_normal(n).astype(np.float32)
    y = np.tanh(x)
    out = np.empty_like(x)

    def adam_case(impl):
        p = rng.standard_normal(n).astype(np.float32)
        g = rng.standard_normal(n).astype(np.float32)
        m = np.zeros(n, dtype=np.float32)
        v = np.zeros(n, dtype=np.float32)
        step = [0]

        def run():
            step[0] += 1
            impl.adam_update(p, g, m, v, step[0], 1e-3, 0.9, 0.999, 1e-8)
        return run

    return [
        ("silu_fwd", lambda impl: lambda: impl.silu_fwd(x, out)),
        ("silu_bwd", lambda impl: lambda: impl.silu_bwd(x, gy, out)),
        ("tanh_fwd", lambda impl: lambda: impl.tanh_fwd(x, out)),
        ("tanh_bwd", lambda impl: lambda: impl.tanh_bwd(y, gy, out)),
        ("adam_update", adam_case),
    ]


def _check_agreement(n, rng):
    """Max |compiled - fallback| over every kernel at size n."""
    x = rng.standard_normal(n).astype(np.float32)
    gy = rng.standard_normal(n).astype(np.float32)
    worst = 0.0
    for fwd, args in (("silu_fwd", (x,)), ("silu_bwd", (x, gy)),
                      ("tanh_fwd", (x,)), ("tanh_bwd", (np.tanh(x), gy))):
        a = np.empty_like(x)
        b = np.empty_like(x)
        getattr(_fastcore, fwd)(*args, a)
        getattr(pybackend, fwd)(*args, b)
        worst = max(worst, float(np.abs(a - b).max()))
    pa = rng.standard_normal(n).astype(np.float32)
    ga = rng.standard_normal(n).astype(np.float32)
    state = [(pa.copy(), np.zeros(n, np.float32), np.zeros(n, np.float32)),
             (pa.copy(), np.zeros(n, np.float32), np.zeros(n, np.float32))]
    for impl, (p, m, v) in zip((_fastcore, pybackend), state):
        for t in range(1, 4):
            impl.adam_update(p, ga, m, v, t, 1e-3, 0.9, 0.999, 1e-8)
    worst = max(worst, float(np.abs(state[0][0] - state[1][0]).max()))
    return worst


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", default="1e3,1e5,1e6",
                    help="comma-separated element counts")
    ap.add_argument("--repeats", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    sizes = [int(float(s)) for s in args.sizes.split(",")]

    lanes = [("python", pybackend)]
    if _fastcore is not None:
        lanes.append(("cython", _fastcore))
    else:
        print("compiled extension not importable; timing the fallback only")

    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<12} {'n':>9} " +
          " ".join(f"{name + ' (us)':>13}" for name, _ in lanes) +
          ("   speedup" if len(lanes) == 2 else ""))
    for n in sizes:
        for name, make in _cases(n, rng):
            row = [f"{name:<12} {n:>9}"]
            med = {}
            for lane, impl in lanes:
                med[lane] = _median_time(make(impl), args.repeats)
                row.append(f"{med[lane] * 1e6:>13.1f}")
            if len(lanes) == 2:
                row.append(f"{med['python'] / med['cython']:>9.2f}x")
            print(" ".join(row))

    if _fastcore is not None:
        worst = _check_agreement(max(sizes), rng)
        print(f"\nlane agreement: max |cython - python| = {worst:.3e} "
              f"over all kernels at n={max(sizes)}")


if __name__ == "__main__":
    main()
